"""``trisim`` command line: data generation, training, evaluation and experiments.

Exit codes: 0 success, 1 usage/config error, 2 data/format error,
3 numeric failure (divergence or gradient check).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .checkpoint import load_model, save_model
from .config import ConfigError, DEFAULT_CONFIG, load_config, validate
from .data import SPLITS, gen_synth_dataset, load_split, write_dataset
from .encoder import FormatError, load_block_stack
from .training import DivergenceError, bench_latency, evaluate, metrics_dict, train

log = logging.getLogger("trisim")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _write_table(rows: list[dict], csv_path: Path | None, out=sys.stdout):
    """CSV to ``csv_path`` (if given) plus an aligned text table on ``out``."""
    if not rows:
        return
    cols = list(dict.fromkeys(k for r in rows for k in r))
    if csv_path is not None:
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        csv_path.write_text(buf.getvalue())

    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    cells = [[fmt(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    print("  ".join(c.ljust(wd) for c, wd in zip(cols, widths)), file=out)
    for row in cells:
        print("  ".join(v.ljust(wd) for v, wd in zip(row, widths)), file=out)


def _run_config(args) -> dict:
    """Load and validate ``--config``; ``--seed`` (if given) overrides the training seed."""
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
        cfg = validate(cfg)
    return cfg


def _load_data(data_dir, cfg: dict, splits=SPLITS) -> dict:
    return {s: load_split(data_dir, s, cfg) for s in splits}


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.pairs < 10:
        raise UsageError("--pairs must be >= 10")
    if args.vocab < 4:
        raise UsageError("--vocab must be >= 4")
    seed = 0 if args.seed is None else args.seed
    splits = gen_synth_dataset(args.pairs, args.vocab, (args.min_len, args.max_len), seed)
    paths = write_dataset(args.out, splits)
    for p, name in zip(paths, SPLITS):
        log.info("wrote %s (%d pairs)", p, len(splits[name]))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    data = _load_data(args.data, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg, data, log_path=out / "metrics.jsonl", quiet=args.quiet,
                   timing_path=out / "timing.jsonl")
    save_model(out / "checkpoint.tsc", result.model)
    test = evaluate(result.model, *data["test"])
    summary = {"best_epoch": result.best_epoch, "best_val_accuracy": result.best_val_accuracy,
               "epochs_run": len(result.history), "test_accuracy": test.accuracy, "test_loss": test.loss}
    print(json.dumps(summary))
    return EXIT_OK


def cmd_eval(args) -> int:
    expected = load_config(args.config) if args.config else None
    model = load_model(args.checkpoint, expected)
    xs, ys, labels = load_split(args.data, args.split, model.cfg)
    print(json.dumps(metrics_dict(evaluate(model, xs, ys, labels))))
    return EXIT_OK


def _cells(grid: str) -> list[str]:
    if grid in ex.GRIDS:
        return ex.GRIDS[grid]
    cells = [c.strip() for c in grid.split(",") if c.strip()]
    for c in cells:
        try:
            ex.cell_config(DEFAULT_CONFIG, c)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return cells


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    cells = _cells(args.grid)
    data = _load_data(args.data, cfg)
    seeds = ex.seed_list(cfg["train"]["seed"], args.seeds)
    rows = ex.run_ablation(cfg, data, cells, seeds, bench_reps=args.bench_reps)
    summary = ex.summarize(rows)
    out = Path(args.out) if args.out else None
    _write_table(summary, out / "ablation.csv" if out else None)
    if out:
        _write_table(rows, out / "ablation_runs.csv", out=io.StringIO())
    checks = ex.directional_checks(summary)
    for c in checks:
        state = "holds" if c.holds else ("within tolerance" if c.passed else "VIOLATED")
        print(f"{c.name}: {c.median_better:.4f} vs {c.median_worse:.4f} ({state})")
    return EXIT_OK


def cmd_robust(args) -> int:
    cfg = _run_config(args)
    data = _load_data(args.data, cfg)
    seeds = ex.seed_list(cfg["train"]["seed"], args.seeds)
    rows = ex.run_robustness(cfg, data, seeds)
    summary = ex.summarize(rows)
    out = Path(args.out) if args.out else None
    _write_table(summary, out / "robust.csv" if out else None)
    if out:
        _write_table(rows, out / "robust_runs.csv", out=io.StringIO())
    for arm, spread in ex.arm_spread(summary).items():
        print(f"{arm} across-strategy spread: {spread:.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.checkpoint:
        model = load_model(args.checkpoint)
        xs, ys, _ = load_split(args.data, args.split, model.cfg)
        rows = [{"cell": "checkpoint", "params": model.params.count(),
                 "ms_per_pair": bench_latency(model, xs, ys, args.repetitions), "pairs": len(xs)}]
    else:
        if not args.config:
            raise UsageError("bench needs --checkpoint or --config")
        cfg = _run_config(args)
        split = load_split(args.data, args.split, cfg)
        rows = ex.bench_cells(cfg, split, _cells(args.grid), args.repetitions)
    _write_table(rows, Path(args.out) / "bench.csv" if args.out else None)
    return EXIT_OK


def _labels(H: int, L: int) -> list[str]:
    return [f"h{h}_l{l}" for h in range(H) for l in range(L)]


def _write_matrix(path: Path, m: np.ndarray, row_labels, col_labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + col_labels)
        for label, row in zip(row_labels, m):
            w.writerow([label] + [f"{v:.9g}" for v in row])


def cmd_dump_sim(args) -> int:
    model = load_model(args.checkpoint)
    want = model.expected_input()
    if args.pair:
        x, y = (load_block_stack(p) for p in args.pair)
    elif args.data is not None and args.index is not None:
        xs, ys, _ = load_split(args.data, args.split, model.cfg)
        if not 0 <= args.index < len(xs):
            raise UsageError(f"--index {args.index} out of range (split has {len(xs)} pairs)")
        x, y = xs[args.index], ys[args.index]
    else:
        raise UsageError("dump-sim needs --pair X Y or --data DIR --index N")
    for stack in (x, y):
        if stack.shape != want:
            raise FormatError(f"pair dims {stack.shape} incompatible with checkpoint input {want}")
    maps = model.similarity_maps(x, y)
    H = len(model.selection.indices(want[0]))
    labels = _labels(H, want[1])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # scores and m_x are indexed [x position, y position]; m_y is [y position, x position]
    x_labels = [f"x:{s}" for s in labels]
    y_labels = [f"y:{s}" for s in labels]
    _write_matrix(out / "scores.csv", maps.scores, x_labels, y_labels)
    _write_matrix(out / "map_x.csv", maps.m_x, x_labels, y_labels)
    _write_matrix(out / "map_y.csv", maps.m_y, y_labels, x_labels)
    log.info("wrote similarity matrices (N=%d) to %s", len(labels), out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config) if args.config else None
    rows = ex.gradcheck_suite(args.seed or 0, cfg)
    table = [{"check": r.name, "kind": r.kind, "max_rel_error": f"{r.error:.3e}",
              "status": "pass" if r.passed else "FAIL"} for r in rows]
    _write_table(table, Path(args.out) / "gradcheck.csv" if args.out else None)
    failed = [r.name for r in rows if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trisim", description="3D Siamese text-similarity head")
    p.add_argument("--quiet", action="store_true", help="only print results")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True, required=True):
        if config:
            sp.add_argument("--config", required=required, help="RunConfig JSON file")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)

    s = sub.add_parser("gen-data", help="write synthetic train/val/test splits")
    common(s, config=False)
    s.add_argument("--out", required=True)
    s.add_argument("--pairs", type=int, default=2000)
    s.add_argument("--vocab", type=int, default=50)
    s.add_argument("--min-len", type=int, default=6)
    s.add_argument("--max-len", type=int, default=12)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train one configuration")
    common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(s, required=False)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=SPLITS, default="test")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="attention/fusion ablation grid")
    common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--grid", default="main", help="main, fa, rfm, all, or comma-separated cells")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--bench-reps", type=int, default=3)
    s.add_argument("--out")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("robust", help="block-selection x adaptive-weight sweep")
    common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--out")
    s.set_defaults(func=cmd_robust)

    s = sub.add_parser("bench", help="latency in ms per pair")
    common(s, required=False)
    s.add_argument("--checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=SPLITS, default="test")
    s.add_argument("--grid", default="main")
    s.add_argument("--repetitions", type=int, default=5)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("dump-sim", help="export attention similarity matrices as CSV")
    common(s, config=False)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--pair", nargs=2, metavar=("X_TSB", "Y_TSB"))
    s.add_argument("--data")
    s.add_argument("--split", choices=SPLITS, default="test")
    s.add_argument("--index", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dump_sim)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(s, required=False)
    s.add_argument("--out")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"trisim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"trisim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError) as exc:
        print(f"trisim: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, FloatingPointError) as exc:
        print(f"trisim: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"trisim: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
