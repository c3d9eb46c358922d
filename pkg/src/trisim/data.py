"""Synthetic paraphrase-style pair data and dataset files."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import FormatError, SynthEncoder, load_block_stack, pad_to, synonyms

SPLITS = ("train", "val", "test")
MATCH, NOT_MATCH = 0, 1


@dataclass(frozen=True)
class PairExample:
    seq_x: tuple[int, ...]
    seq_y: tuple[int, ...]
    label: int


def _perturb(seq: list[int], vocab: int, rng: np.random.Generator, p_sub: float) -> list[int]:
    out = list(seq)
    for i, t in enumerate(out):
        if rng.random() < p_sub:
            alts = [s for s in synonyms(t, vocab) if s != t]
            if alts:
                out[i] = alts[int(rng.integers(len(alts)))]
    if len(out) >= 2:
        i = int(rng.integers(len(out) - 1))
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def gen_synth_dataset(n_pairs: int, vocab: int, length_range=(6, 12), seed: int = 0,
                      p_sub: float = 0.2) -> dict[str, list[PairExample]]:
    """Balanced binary pairs split 80/10/10.

    A matching pair is a base sequence and a perturbed copy (synonym swaps
    with probability ``p_sub`` plus one adjacent transposition); a
    non-matching pair is two independent sequences.  Every base sequence is
    unique, so splits never share one.  Token 0 is reserved for padding.
    """
    if vocab < 4:
        raise ValueError("vocab must be >= 4")
    if n_pairs < 10:
        raise ValueError("need at least 10 pairs")
    lo, hi = length_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad length range {length_range}")
    rng = np.random.default_rng(seed)
    seen: set[tuple[int, ...]] = set()

    def fresh() -> list[int]:
        while True:
            n = int(rng.integers(lo, hi + 1))
            seq = tuple(int(t) for t in rng.integers(1, vocab, size=n))
            if seq not in seen:
                seen.add(seq)
                return list(seq)

    labels = np.array([MATCH] * (n_pairs // 2) + [NOT_MATCH] * (n_pairs - n_pairs // 2))
    rng.shuffle(labels)
    pairs = []
    for label in labels:
        x = fresh()
        y = _perturb(x, vocab, rng, p_sub) if label == MATCH else fresh()
        pairs.append(PairExample(tuple(x), tuple(y), int(label)))
    n_train = round(0.8 * n_pairs)
    n_val = round(0.1 * n_pairs)
    return {
        "train": pairs[:n_train],
        "val": pairs[n_train:n_train + n_val],
        "test": pairs[n_train + n_val:],
    }


def write_dataset(out_dir, splits: dict[str, list[PairExample]]) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in SPLITS:
        path = out / f"{name}.jsonl"
        lines = [json.dumps({"x": list(p.seq_x), "y": list(p.seq_y), "label": p.label},
                            separators=(",", ":")) for p in splits[name]]
        path.write_text("".join(line + "\n" for line in lines))
        paths.append(path)
    return paths


def read_split(path) -> list[PairExample]:
    examples = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            examples.append(PairExample(tuple(row["x"]), tuple(row["y"]), int(row["label"])))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}:{lineno}: bad example ({exc})") from None
    return examples


def read_manifest(path) -> list[tuple[Path, Path, int]]:
    """Rows of ``path_x,path_y,label``; relative paths resolve against the manifest."""
    base = Path(path).parent
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0] == "path_x":
                continue
            if len(row) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            rows.append((base / row[0], base / row[1], int(row[2])))
    return rows


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path_x", "path_y", "label"])
        for px, py, label in rows:
            w.writerow([str(px), str(py), int(label)])


def encoder_for(cfg: dict) -> SynthEncoder:
    enc = cfg["encoder"]
    return SynthEncoder(enc["vocab"], enc["H"], enc["D"], seed=enc["seed"])


def encode_pairs(examples, encoder: SynthEncoder, L: int):
    xs = encoder.encode_many([p.seq_x for p in examples], L)
    ys = encoder.encode_many([p.seq_y for p in examples], L)
    return xs, ys, np.array([p.label for p in examples], dtype=np.int64)


def load_split(data_dir, split: str, cfg: dict, encoder: SynthEncoder | None = None):
    """Block stacks ``(xs, ys, labels)`` for one split under ``cfg``'s encoder."""
    enc = cfg["encoder"]
    data_dir = Path(data_dir)
    if enc["mode"] == "synth":
        path = data_dir / f"{split}.jsonl"
        if not path.exists():
            raise FileNotFoundError(path)
        return encode_pairs(read_split(path), encoder or encoder_for(cfg), enc["L"])
    rows = read_manifest(data_dir / f"{split}.csv")
    want = (enc["H"], enc["L"], enc["D"])
    xs, ys = [], []
    for px, py, _ in rows:
        for p, dest in ((px, xs), (py, ys)):
            stack = load_block_stack(p)
            if stack.shape != want:
                raise FormatError(f"{p}: dims {stack.shape} != configured {want}")
            dest.append(stack)
    labels = np.array([r[2] for r in rows], dtype=np.int64)
    if not rows:
        return (np.zeros((0, *want), np.float32),) * 2 + (labels,)
    return np.stack(xs), np.stack(ys), labels


def cosine_threshold_baseline(splits: dict[str, list[PairExample]], encoder: SynthEncoder,
                              L: int, fixed_threshold: float = 0.5) -> dict[str, float]:
    """Mean-embedding cosine with a threshold fitted on train.

    Independent of the trainable head; used to calibrate task difficulty.
    Also reports test accuracy at ``fixed_threshold``.
    """
    def cosines(examples):
        out = []
        for p in examples:
            vecs = []
            for seq in (p.seq_x, p.seq_y):
                s = pad_to(seq, L)
                ids = np.array(s.tokens)[np.array(s.mask)]
                vecs.append(encoder.embedding[ids].mean(axis=0))
            a, b = vecs
            out.append(float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12)))
        return np.array(out), np.array([p.label for p in examples])

    c_train, y_train = cosines(splits["train"])
    candidates = np.unique(c_train)
    best_t, best_acc = 0.5, -1.0
    for t in candidates:
        acc = float(np.mean((c_train >= t) == (y_train == MATCH)))
        if acc > best_acc:
            best_t, best_acc = float(t), acc
    c_test, y_test = cosines(splits["test"])
    return {
        "threshold": best_t,
        "train_accuracy": best_acc,
        "test_accuracy": float(np.mean((c_test >= best_t) == (y_test == MATCH))),
        "fixed_threshold_accuracy": float(np.mean((c_test >= fixed_threshold) == (y_test == MATCH))),
    }
