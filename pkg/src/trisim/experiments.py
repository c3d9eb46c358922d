"""Ablation grids, the block-robustness sweep, latency benches and the gradient suite."""
from __future__ import annotations

import copy
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import afe as afe_mod
from . import attention as att_mod
from . import fusion as fusion_mod
from . import tensor as T
from .config import validate
from .model import SiameseHead
from .training import bench_latency, evaluate, train

ATTENTION_ARMS = ("sa", "sa+fa1", "sa+fa2", "sa+fa3", "fa1", "fa2", "fa3")
FUSION_ARMS = ("pooling", "rfm", "inception", "dilated")

GRIDS = {
    "main": [f"{f}:{a}" for f in ("pooling", "rfm") for a in ("sa", "sa+fa1", "sa+fa2", "sa+fa3")],
    "fa": ["rfm:fa1", "rfm:fa2", "rfm:fa3"],
    "rfm": ["pooling:sa+fa3", "inception:sa+fa3", "dilated:sa+fa3", "rfm:sa+fa3"],
}
GRIDS["all"] = list(dict.fromkeys(GRIDS["main"] + GRIDS["fa"] + GRIDS["rfm"]))

ROBUST_STRATEGIES = ("spaced_half", "bottom_half", "top_half", "all")


def cell_config(base: dict, cell: str) -> dict:
    """Configuration for a grid cell named ``fusion:attention``.

    ``inception`` keeps the distinct psi kernel sizes with every dilation 1;
    ``dilated`` keeps the dilation rates with every psi kernel 1x1.
    """
    try:
        fusion, attention = cell.split(":")
    except ValueError:
        raise ValueError(f"bad cell name {cell!r}; expected fusion:attention") from None
    if fusion not in FUSION_ARMS or attention not in ATTENTION_ARMS:
        raise ValueError(f"unknown cell {cell!r}")
    cfg = copy.deepcopy(base)
    att = cfg["attention"]
    att["sa"] = attention.startswith("sa")
    att["fa"] = attention.split("+")[-1] if "fa" in attention else "none"
    fus = cfg["fusion"]
    if fusion == "pooling":
        fus["mode"] = "pooling"
    else:
        fus["mode"] = "rfm"
        if fusion == "inception":
            fus["dilations"] = [1] * fus["k"]
        elif fusion == "dilated":
            fus["psi_sizes"] = [1] * fus["k"]
    return validate(cfg)


def robust_config(base: dict, strategy: str, adaptive: bool) -> dict:
    cfg = copy.deepcopy(base)
    cfg["blocks"]["strategy"] = strategy
    cfg["blocks"]["adaptive"] = adaptive
    return validate(cfg)


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("TRISIM_THREADS", "1")))
    except ValueError:
        return 1


def _run_one(job):
    name, cfg, data, bench_reps = job
    result = train(cfg, data)
    test = evaluate(result.model, *data["test"])
    row = {
        "cell": name,
        "seed": cfg["train"]["seed"],
        "accuracy": test.accuracy,
        "val_accuracy": result.best_val_accuracy,
        "params": result.model.params.count(),
    }
    if bench_reps:
        xs, ys, _ = data["test"]
        row["ms_per_pair"] = bench_latency(result.model, xs, ys, bench_reps)
    return row


def run_jobs(jobs: list) -> list[dict]:
    workers = min(max_workers(), len(jobs))
    if workers <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs))


def seed_list(base_seed: int, n: int) -> list[int]:
    return [base_seed + i for i in range(n)]


def _with_seed(cfg: dict, seed: int) -> dict:
    cfg = copy.deepcopy(cfg)
    cfg["train"]["seed"] = seed
    return cfg


def run_ablation(base: dict, data: dict, cells: list[str], seeds: list[int],
                 bench_reps: int = 3) -> list[dict]:
    """Train every cell once per seed on shared data; one row per (cell, seed)."""
    configs = {c: cell_config(base, c) for c in cells}
    jobs = [(c, _with_seed(configs[c], s), data, bench_reps) for c in cells for s in seeds]
    return run_jobs(jobs)


def summarize(rows: list[dict], key: str = "cell") -> list[dict]:
    groups: dict[str, list[dict]] = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r)
    out = []
    for name, rs in groups.items():
        accs = [r["accuracy"] for r in rs]
        summary = {
            key: name,
            "seeds": len(rs),
            "accuracy_median": statistics.median(accs),
            "accuracy_mean": statistics.fmean(accs),
            "accuracy_std": statistics.pstdev(accs),
            "accuracy_min": min(accs),
            "accuracy_max": max(accs),
            "params": rs[0]["params"],
        }
        if "ms_per_pair" in rs[0]:
            summary["ms_per_pair"] = statistics.median(r["ms_per_pair"] for r in rs)
        for extra in ("strategy", "adaptive"):
            if extra in rs[0]:
                summary[extra] = rs[0][extra]
        out.append(summary)
    return out


@dataclass
class Comparison:
    name: str
    better: str
    worse: str
    median_better: float
    median_worse: float
    tolerance: float

    @property
    def delta(self) -> float:
        return self.median_better - self.median_worse

    @property
    def holds(self) -> bool:
        return self.delta >= 0

    @property
    def passed(self) -> bool:
        # accuracies are ratios of counts; absorb rounding at exactly the tolerance
        return self.delta >= -self.tolerance - 1e-9


def directional_checks(summary: list[dict], tolerance: float = 0.02) -> list[Comparison]:
    """RFM vs matching pooling cells, and SA+FA-3 vs SA alone, by median accuracy."""
    med = {s["cell"]: s["accuracy_median"] for s in summary}
    checks = []
    for cell in med:
        fusion, att = cell.split(":")
        if fusion == "rfm" and f"pooling:{att}" in med:
            checks.append(Comparison(f"rfm>=pooling [{att}]", cell, f"pooling:{att}",
                                     med[cell], med[f"pooling:{att}"], tolerance))
    for fusion in ("pooling", "rfm"):
        a, b = f"{fusion}:sa+fa3", f"{fusion}:sa"
        if a in med and b in med:
            checks.append(Comparison(f"sa+fa3>=sa [{fusion}]", a, b, med[a], med[b], tolerance))
    return checks


def run_robustness(base: dict, data: dict, seeds: list[int]) -> list[dict]:
    """Four block strategies x {FE, AFE}; one row per (cell, seed)."""
    jobs = []
    for adaptive in (False, True):
        for strategy in ROBUST_STRATEGIES:
            name = f"{'AFE' if adaptive else 'FE'}:{strategy}"
            cfg = robust_config(base, strategy, adaptive)
            jobs += [(name, _with_seed(cfg, s), data, 0) for s in seeds]
    rows = run_jobs(jobs)
    for r in rows:
        arm, strategy = r["cell"].split(":")
        r["strategy"], r["adaptive"] = strategy, arm == "AFE"
    return rows


def arm_spread(summary: list[dict]) -> dict[str, float]:
    """Max minus min of mean accuracy across strategies, per FE/AFE arm."""
    out = {}
    for arm in ("FE", "AFE"):
        means = [s["accuracy_mean"] for s in summary if s["cell"].startswith(arm + ":")]
        if means:
            out[arm] = max(means) - min(means)
    return out


def bench_cells(base: dict, data_split, cells: list[str], repetitions: int = 5) -> list[dict]:
    """ms/pair of an initialised model per cell (latency does not depend on training)."""
    xs, ys, _ = data_split
    rows = []
    for cell in cells:
        model = SiameseHead(cell_config(base, cell))
        rows.append({"cell": cell, "params": model.params.count(),
                     "ms_per_pair": bench_latency(model, xs, ys, repetitions),
                     "pairs": len(xs)})
    return rows


# ---------------------------------------------------------------------------
# gradient suite

GRADCHECK_DIMS = {"H": 2, "L": 3, "D": 4, "d_prime": 2, "d_dprime": 2, "k": 2, "hidden": 4}
GRADCHECK_TOL = 1e-6


@dataclass
class GradRow:
    name: str
    kind: str
    error: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < GRADCHECK_TOL)


def gradcheck_config(base: dict | None = None, fa: str = "fa3", fusion: str = "rfm") -> dict:
    from .config import DEFAULT_CONFIG
    d = GRADCHECK_DIMS
    cfg = copy.deepcopy(base or DEFAULT_CONFIG)
    cfg["encoder"].update(H=d["H"], L=d["L"], D=d["D"])
    if base is None:
        cfg["blocks"]["strategy"] = "all"
        cfg["attention"].update(sa=True, fa=fa)
        cfg["fusion"]["mode"] = fusion
    elif not isinstance(cfg["blocks"]["strategy"], str):
        cfg["blocks"]["strategy"] = "all"
    cfg["blocks"].pop("reduction", None)
    cfg["attention"].pop("reduction", None)
    cfg["attention"]["d_prime"] = d["d_prime"]
    cfg["fusion"].update(k=d["k"], psi_sizes=[1, 3], dilations=[1, 2], d_dprime=d["d_dprime"])
    cfg["head"]["hidden"] = d["hidden"]
    return validate(cfg)


def _primitive_checks(rng: np.random.Generator) -> list[tuple[str, Callable[[], float]]]:
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    w43, b3 = r(3, 4), r(3)
    k33, kb = r(3, 3, 2, 3), r(3)
    g, bt = r(3) + 1.0, r(3)
    return [
        ("affine", lambda: T.grad_check(lambda x, w, b: T.affine(x, w, b), r(5, 4), w43, b3)),
        ("add", lambda: T.grad_check(lambda a, b: T.add(a, b), r(3, 4), r(4))),
        ("sub", lambda: T.grad_check(lambda a, b: T.sub(a, b), r(3, 4), r(3, 1))),
        ("mul", lambda: T.grad_check(lambda a, b: T.mul(a, b), r(3, 4), r(4))),
        ("div", lambda: T.grad_check(lambda a, b: T.div(a, b), r(3, 4), rng.uniform(1, 2, (3, 1)))),
        ("absolute", lambda: T.grad_check(T.absolute, r(4, 5))),
        ("matmul", lambda: T.grad_check(lambda a, b: T.matmul(a, b), r(2, 3, 4), r(2, 4, 5))),
        ("softmax_axis[rows]", lambda: T.grad_check(lambda m: T.softmax_axis(m, "rows"), r(5, 7))),
        ("softmax_axis[cols]", lambda: T.grad_check(lambda m: T.softmax_axis(m, "cols"), r(5, 7))),
        ("relu", lambda: T.grad_check(T.relu, r(4, 5))),
        ("sigmoid", lambda: T.grad_check(T.sigmoid, r(4, 5))),
        ("pool_axis[avg,h]", lambda: T.grad_check(lambda t: T.pool_axis(t, {"h"}, "avg"), r(3, 4, 5))),
        ("pool_axis[avg,hl]", lambda: T.grad_check(lambda t: T.pool_axis(t, {"h", "l"}, "avg"), r(3, 4, 5))),
        ("pool_axis[max,l]", lambda: T.grad_check(lambda t: T.pool_axis(t, {"l"}, "max"), r(3, 4, 5))),
        ("pool_axis[max,hl]", lambda: T.grad_check(lambda t: T.pool_axis(t, {"h", "l"}, "max"), r(3, 4, 5))),
        ("concat", lambda: T.grad_check(lambda a, b: T.concat([a, b], -2), r(2, 3), r(4, 3))),
        ("stack", lambda: T.grad_check(lambda a, b: T.stack([a, b], -3), r(2, 3), r(2, 3))),
        ("broadcast_to", lambda: T.grad_check(lambda a: T.broadcast_to(a, (3, 2, 4)), r(1, 1, 4))),
        ("getitem", lambda: T.grad_check(lambda a: a[..., 1:, :], r(2, 3, 4))),
        ("conv2d_dilated[r=1]", lambda: T.grad_check(lambda t, w, b: T.conv2d_dilated(t, w, b, 1), r(5, 6, 2), k33, kb)),
        ("conv2d_dilated[r=2]", lambda: T.grad_check(lambda t, w, b: T.conv2d_dilated(t, w, b, 2), r(5, 6, 2), k33, kb)),
        ("conv2d_dilated[r=3]", lambda: T.grad_check(lambda t, w, b: T.conv2d_dilated(t, w, b, 3), r(5, 6, 2), k33, kb)),
        ("conv1x1", lambda: T.grad_check(lambda t, w, b: T.conv1x1(t, w, b), r(2, 3, 4), w43, b3)),
        ("instance_norm", lambda: T.grad_check(lambda x, g_, b_: T.instance_norm(x, g_, b_), r(5, 3), g, bt)),
        ("softmax_cross_entropy", lambda: T.grad_check(lambda z: T.softmax_cross_entropy(z, [0, 2, 1]), r(3, 3))),
    ]


def _composite_checks(rng: np.random.Generator) -> list[tuple[str, Callable[[], float]]]:
    d = GRADCHECK_DIMS
    H, L, D, Dp, Dpp = d["H"], d["L"], d["D"], d["d_prime"], d["d_dprime"]
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    Dr = afe_mod.default_reduction(D)
    X, Y = r(H, L, D), r(H, L, D)
    rfm_params = [(r(s, s, Dp, Dpp), r(Dpp), r(3, 3, Dpp, Dpp), r(Dpp)) for s in (1, 3)]

    def rfm_fn(x, *flat):
        branches = [(*flat[4 * i:4 * i + 4], rr) for i, rr in enumerate((1, 2))]
        return fusion_mod.rfm_forward(x, branches, flat[8:10])

    return [
        ("afe", lambda: T.grad_check(
            lambda x, w1, b1, w2, b2: afe_mod.afe_stack(x, afe_mod.afe_normalize(afe_mod.afe_gates(x, w1, b1, w2, b2))),
            X, r(Dr, D), r(Dr), r(D, Dr), r(D))),
        ("sa", lambda: T.grad_check(
            lambda x, y, w, b: T.concat(list(att_mod.sa_forward(x, y, w, b)[:2]), -1), X, Y, r(Dp, D), r(Dp))),
        ("fa1", lambda: T.grad_check(att_mod.fa1_forward, X, r(Dr, D), r(Dr), r(Dp, Dr), r(Dp))),
        ("fa2", lambda: T.grad_check(att_mod.fa2_forward, X, r(Dr, 2 * D), r(Dr), r(Dp, Dr), r(Dp))),
        ("fa3", lambda: T.grad_check(att_mod.fa3_forward, X, r(D) + 1, r(D), r(Dp, D), r(Dp), r(Dp, D), r(Dp))),
        ("combine", lambda: T.grad_check(
            lambda a, b, c, e: T.concat(list(att_mod.combine(a, b, c, e)), -1),
            r(H, L, Dp), r(H, L, Dp), r(H, L, Dp), r(H, L, Dp))),
        ("rfm", lambda: T.grad_check(rfm_fn, r(H, L, Dp), *[a for p in rfm_params for a in p], r(Dpp, Dp), r(Dpp))),
        ("pooling_fusion", lambda: T.grad_check(fusion_mod.pooling_fusion, r(H, L, Dp), r(H, L, Dp))),
        ("classify_head", lambda: T.grad_check(
            fusion_mod.classify_head, rng.uniform(0, 1, (H, L, 3 * Dpp)), rng.uniform(0, 1, (H, L, 3 * Dpp)),
            r(4, 9 * Dpp), r(4), r(2, 4), r(2))),
    ]


def model_gradcheck(cfg: dict, seed: int = 0, batch: int = 2) -> float:
    """Relative gradient error of the full model + cross-entropy, float64."""
    rng = np.random.default_rng(seed)
    model = SiameseHead(cfg, dtype=np.float64, seed=seed)
    H, L, D = model.expected_input()
    xs, ys = rng.standard_normal((batch, H, L, D)), rng.standard_normal((batch, H, L, D))
    labels = rng.integers(0, len(model.labels), size=batch)

    def loss(x, y):
        return T.softmax_cross_entropy(model.logits(x, y), labels)

    return T.grad_check(loss, xs, ys, params=list(model.params))


def gradcheck_suite(seed: int = 0, cfg: dict | None = None) -> list[GradRow]:
    """One row per primitive, per composite module, and per full-model variant."""
    rng = np.random.default_rng(seed)
    rows = [GradRow(n, "primitive", fn()) for n, fn in _primitive_checks(rng)]
    rows += [GradRow(n, "module", fn()) for n, fn in _composite_checks(rng)]
    if cfg is not None:
        variants = [("model[config]", gradcheck_config(cfg))]
    else:
        variants = [(f"model[{fa}+{fus}]", gradcheck_config(fa=fa, fusion=fus))
                    for fus in ("rfm", "pooling") for fa in att_mod.FA_VARIANTS]
    rows += [GradRow(n, "model", model_gradcheck(c, seed)) for n, c in variants]
    return rows
