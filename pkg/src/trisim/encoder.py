"""Per-block sentence representations.

A deterministic synthetic encoder stands in for a stack of Transformer blocks
at desk scale; real encoders can be plugged in by writing their block outputs
to EmbeddingFiles (``TSB1``) and loading them back.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

PAD_ID = 0
BLOCK_MAGIC = b"TSB1"
_HEADER = struct.Struct("<4sIII")
# refuse headers that would need more than 2**31 floats
_MAX_ELEMENTS = 2**31


class FormatError(ValueError):
    """Malformed or inconsistent file content."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]
    length: int = -1
    mask: tuple[bool, ...] = field(default=())

    def __post_init__(self):
        tokens = tuple(int(t) for t in self.tokens)
        object.__setattr__(self, "tokens", tokens)
        if self.length < 0:
            object.__setattr__(self, "length", len(tokens))
        if not self.mask:
            object.__setattr__(self, "mask", tuple(i < self.length for i in range(len(tokens))))
        if any(t < 0 for t in tokens):
            raise ValueError("token ids must be non-negative")

    def __len__(self):
        return len(self.tokens)


def pad_to(seq: TokenSequence | Sequence[int], L: int) -> TokenSequence:
    """Right-pad with ``PAD_ID`` or right-truncate to exactly ``L`` positions."""
    if L < 1:
        raise ValueError("L must be >= 1")
    if not isinstance(seq, TokenSequence):
        seq = TokenSequence(tuple(seq))
    valid = min(seq.length, len(seq.tokens), L)
    tokens = list(seq.tokens[:L]) + [PAD_ID] * max(0, L - len(seq.tokens))
    return TokenSequence(tuple(tokens), length=valid, mask=tuple(i < valid for i in range(L)))


# ---------------------------------------------------------------------------
# synthetic encoder


def synonym_group(token: int) -> int:
    """Synonym partition of the vocabulary: ids 2g+1 and 2g+2 form group g."""
    return (token - 1) // 2


def synonyms(token: int, vocab: int) -> list[int]:
    g = synonym_group(token)
    return [t for t in (2 * g + 1, 2 * g + 2) if 1 <= t < vocab]


class SynthEncoder:
    """Seeded stand-in for ``H`` stacked encoder blocks.

    Block 0 is an embedding lookup.  Block ``h`` applies ``relu(W_h a + b_h)``
    to the window-3 average of block ``h-1`` over valid positions, so deeper
    blocks mix wider context.  Synonyms share an embedding centre.

    ``scale`` sets the activation magnitude.  Gate normalisation divides
    block vectors by roughly ``L`` and attention scores have no learned
    temperature, so small activations give near-uniform attention maps.
    """

    def __init__(self, vocab: int, H: int, D: int, seed: int = 0, synonym_noise: float = 0.35,
                 scale: float = 5.0):
        if vocab < 2 or H < 1 or D < 1:
            raise ValueError("need vocab >= 2, H >= 1, D >= 1")
        self.vocab, self.H, self.D, self.seed = vocab, H, D, seed
        rng = np.random.default_rng(seed)
        n_groups = synonym_group(vocab - 1) + 1
        centres = scale * rng.standard_normal((n_groups, D))
        table = np.zeros((vocab, D))
        for t in range(1, vocab):
            table[t] = centres[synonym_group(t)] + scale * synonym_noise * rng.standard_normal(D)
        self.embedding = table
        self.mix_w = []
        self.mix_b = []
        for _ in range(1, H):
            q, _r = np.linalg.qr(rng.standard_normal((D, D)))
            self.mix_w.append(math.sqrt(2.0) * q)
            self.mix_b.append(0.1 * scale * rng.standard_normal(D))

    def encode(self, seq: TokenSequence | Sequence[int], L: int | None = None) -> np.ndarray:
        """Return an ``(H, L, D)`` float32 block stack for one sequence."""
        if not isinstance(seq, TokenSequence):
            seq = TokenSequence(tuple(seq))
        if L is not None:
            seq = pad_to(seq, L)
        ids = np.asarray(seq.tokens, dtype=np.int64)
        if ids.size and ids.max() >= self.vocab:
            raise ValueError(f"token id {int(ids.max())} >= vocab size {self.vocab}")
        mask = np.asarray(seq.mask, dtype=np.float64)[:, None]
        block = self.embedding[ids] * mask
        blocks = [block]
        # window-3 average over valid neighbours
        counts = mask + np.pad(mask, ((1, 0), (0, 0)))[:-1] + np.pad(mask, ((0, 1), (0, 0)))[1:]
        counts = np.maximum(counts, 1.0)
        for w, b in zip(self.mix_w, self.mix_b):
            prev = blocks[-1]
            summed = prev + np.pad(prev, ((1, 0), (0, 0)))[:-1] + np.pad(prev, ((0, 1), (0, 0)))[1:]
            local = summed / counts
            blocks.append(np.maximum(local @ w.T + b, 0.0) * mask)
        return np.stack(blocks).astype(np.float32)

    def encode_many(self, seqs: Sequence, L: int) -> np.ndarray:
        return np.stack([self.encode(s, L) for s in seqs]) if len(seqs) else \
            np.zeros((0, self.H, L, self.D), dtype=np.float32)


def synth_encode(seq, encoder: SynthEncoder, L: int | None = None) -> list[np.ndarray]:
    """Block stack as a list of ``H`` matrices of shape ``L x D``."""
    return list(encoder.encode(seq, L))


# ---------------------------------------------------------------------------
# block selection

HALF_STRATEGIES = ("top_half", "bottom_half", "spaced_half")


@dataclass(frozen=True)
class BlockSelection:
    strategy: Union[str, tuple[int, ...]] = "all"

    def indices(self, H: int) -> list[int]:
        s = self.strategy
        half = math.ceil(H / 2)
        if s == "all":
            return list(range(H))
        if s == "top_half":
            return list(range(H - half, H))
        if s == "bottom_half":
            return list(range(half))
        if s == "spaced_half":
            return list(range(0, H, 2))
        if isinstance(s, str):
            raise ValueError(f"unknown block strategy {s!r}")
        idx = [int(i) for i in s]
        if not idx:
            raise ValueError("explicit block list is empty")
        if any(i < 0 or i >= H for i in idx):
            raise ValueError(f"block indices {idx} out of range for H={H}")
        if any(a >= b for a, b in zip(idx, idx[1:])):
            raise ValueError(f"block indices {idx} must be strictly increasing")
        return idx


def select_blocks(stack, sel: BlockSelection | str | Sequence[int]) -> np.ndarray:
    """Keep the selected blocks (axis -3 of an ``(..., H, L, D)`` array), in order."""
    if not isinstance(sel, BlockSelection):
        sel = BlockSelection(sel if isinstance(sel, str) else tuple(sel))
    stack = np.asarray(stack)
    idx = sel.indices(stack.shape[-3])
    if idx == list(range(stack.shape[-3])):
        return stack
    return stack[..., idx, :, :]


# ---------------------------------------------------------------------------
# EmbeddingFile


def write_block_stack(path, stack) -> None:
    stack = np.asarray(stack)
    if stack.ndim != 3:
        raise ValueError(f"block stack must be (H, L, D), got {stack.shape}")
    H, L, D = stack.shape
    payload = np.ascontiguousarray(stack, dtype="<f4").tobytes()
    Path(path).write_bytes(_HEADER.pack(BLOCK_MAGIC, H, L, D) + payload)


def load_block_stack(path) -> np.ndarray:
    """Read an ``(H, L, D)`` float32 block stack written by :func:`write_block_stack`."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header, {len(raw)} bytes", offset=len(raw))
    magic, H, L, D = _HEADER.unpack_from(raw)
    if magic != BLOCK_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if min(H, L, D) < 1:
        raise FormatError(f"{path}: zero dimension in header H={H} L={L} D={D}", offset=4)
    n = H * L * D
    if n > _MAX_ELEMENTS:
        raise FormatError(f"{path}: header dims overflow ({H}x{L}x{D})", offset=4)
    expected = _HEADER.size + 4 * n
    if len(raw) != expected:
        kind = "truncated payload" if len(raw) < expected else "trailing bytes after payload"
        raise FormatError(f"{path}: {kind}, expected {expected} bytes, got {len(raw)}",
                          offset=min(len(raw), expected))
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=_HEADER.size)
    return data.astype(np.float32).reshape(H, L, D)
