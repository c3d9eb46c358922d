"""Loss, Adam, plateau schedule, the training loop, evaluation and latency."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import SiameseHead
from .tensor import ParamSet, no_grad, softmax, softmax_cross_entropy

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


def cross_entropy(probs, label: int) -> tuple[float, np.ndarray]:
    """``-ln p[label]`` (probability clamped at 1e-12) and its gradient on the logits."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise ValueError(f"label {label} out of range for {probs.shape[-1]} classes")
    loss = -np.log(max(probs[label], 1e-12))
    grad = probs.copy()
    grad[label] -= 1.0
    return float(loss), grad


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    decay: float = 0.1
    seed: int = 0
    clip_norm: float | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class Adam:
    """Bias-corrected Adam over a :class:`ParamSet`."""

    def __init__(self, params: ParamSet, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def adam_step(params: ParamSet, state: Adam, lr: float):
    state.step(lr)


class PlateauSchedule:
    """Patience on validation accuracy: the first exhaustion decays the
    learning rate once, the second one stops training."""

    def __init__(self, patience: int, decay: float):
        self.patience, self.decay = patience, decay
        self.best = -np.inf
        self.waited = 0
        self.decayed = False

    def update(self, metric: float) -> str:
        if metric > self.best:
            self.best, self.waited = metric, 0
            return "improved"
        self.waited += 1
        if self.waited < self.patience:
            return "wait"
        if not self.decayed:
            self.decayed, self.waited = True, 0
            return "decay"
        return "stop"


@dataclass
class Metrics:
    accuracy: float
    loss: float
    latency_ms_per_pair: float | None = None


@dataclass
class TrainResult:
    model: SiameseHead
    best_val_accuracy: float
    best_epoch: int
    history: list[dict] = field(default_factory=list)


def _first_nonfinite(params: ParamSet) -> str:
    """Name of the first parameter with a non-finite value or gradient, else ''."""
    for p in params:
        if not np.isfinite(p.data).all():
            return f"{p.name} (value)"
        if p.grad is not None and not np.isfinite(p.grad).all():
            return f"{p.name} (gradient)"
    return ""


def _largest(params: ParamSet) -> str:
    p = max(params, key=lambda q: float(np.abs(q.data).max()))
    return f"<none>; largest parameter {p.name} (max |value| {float(np.abs(p.data).max()):.3g})"


def _clip(params: ParamSet, max_norm: float):
    total = np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.dtype)


def evaluate(model: SiameseHead, xs, ys, labels, batch_size: int = 256) -> Metrics:
    """Argmax accuracy and mean cross-entropy over a split."""
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise ValueError("cannot evaluate an empty split")
    H, L, D = model.expected_input()
    if tuple(np.shape(xs)[1:]) != (H, L, D) or tuple(np.shape(ys)[1:]) != (H, L, D):
        raise ValueError(f"split dims {np.shape(xs)[1:]} do not match model input {(H, L, D)}")
    correct, loss_sum = 0, 0.0
    with no_grad():
        for s in range(0, n, batch_size):
            sl = slice(s, s + batch_size)
            probs = softmax(model.logits(xs[sl], ys[sl]), axis=-1).data.astype(np.float64)
            correct += int((probs.argmax(axis=1) == labels[sl]).sum())
            picked = probs[np.arange(len(probs)), labels[sl]]
            loss_sum += float(-np.log(np.maximum(picked, 1e-12)).sum())
    return Metrics(accuracy=correct / n, loss=loss_sum / n)


def train(cfg: dict, data: dict, log_path=None, quiet: bool = True, timing_path=None) -> TrainResult:
    """Train a fresh model on ``data[split] = (xs, ys, labels)``.

    Returns the model restored to its best-validation-accuracy parameters.
    One JSON line per epoch (epoch, lr, train_loss, val_acc) is written to
    ``log_path`` when given; these lines are reproducible bit for bit.  The
    wall-clock ``elapsed_s`` goes to ``timing_path`` instead and is kept in
    the in-memory history.
    """
    tc = TrainConfig.from_dict(cfg["train"])
    xs, ys, labels = data["train"]
    vx, vy, vl = data["val"]
    if len(labels) == 0 or len(vl) == 0:
        raise ValueError("train and val splits must be non-empty")
    model = SiameseHead(cfg)
    opt = Adam(model.params, tc.beta1, tc.beta2, tc.eps)
    sched = PlateauSchedule(tc.patience, tc.decay)
    rng = np.random.default_rng(tc.seed + 1)
    lr = tc.lr
    best_state, best_epoch = model.params.state_dict(), 0
    history = []
    log_fh = open(log_path, "w") if log_path else None
    timing_fh = open(timing_path, "w") if timing_path else None
    start = time.perf_counter()
    try:
        for epoch in range(1, tc.epochs + 1):
            order = rng.permutation(len(labels))
            losses = []
            for s in range(0, len(order), tc.batch_size):
                idx = np.sort(order[s:s + tc.batch_size])
                model.params.zero_grad()
                loss = softmax_cross_entropy(model.logits(xs[idx], ys[idx]), labels[idx])
                if not np.isfinite(loss.data):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}; "
                                          f"first non-finite parameter: {_first_nonfinite(model.params) or _largest(model.params)}")
                loss.backward()
                if tc.clip_norm:
                    _clip(model.params, tc.clip_norm)
                opt.step(lr)
                bad = _first_nonfinite(model.params)
                if bad:
                    raise DivergenceError(f"non-finite parameter after step at epoch {epoch}: {bad}")
                losses.append(float(loss.data) * len(idx))
            val = evaluate(model, vx, vy, vl)
            row = {"epoch": epoch, "lr": lr, "train_loss": sum(losses) / len(labels),
                   "val_acc": val.accuracy}
            elapsed = round(time.perf_counter() - start, 3)
            history.append({**row, "elapsed_s": elapsed})
            if log_fh:
                log_fh.write(json.dumps(row) + "\n")
                log_fh.flush()
            if timing_fh:
                timing_fh.write(json.dumps({"epoch": epoch, "elapsed_s": elapsed}) + "\n")
            if not quiet:
                log.info("epoch %d lr=%g loss=%.4f val_acc=%.4f", epoch, lr, row["train_loss"], val.accuracy)
            action = sched.update(val.accuracy)
            if action == "improved":
                best_state, best_epoch = model.params.state_dict(), epoch
            elif action == "decay":
                lr *= tc.decay
            elif action == "stop":
                break
    finally:
        for fh in (log_fh, timing_fh):
            if fh:
                fh.close()
    model.params.load_state_dict(best_state)
    return TrainResult(model, float(sched.best), best_epoch, history)


def bench_latency(model: SiameseHead, xs, ys, repetitions: int = 5, batch_size: int = 32) -> float:
    """Median over repetitions of forward wall time per pair, in milliseconds.

    One untimed warm-up pass precedes the timed repetitions.
    """
    n = len(xs)
    if n == 0:
        raise ValueError("cannot benchmark an empty split")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")

    def run():
        with no_grad():
            for s in range(0, n, batch_size):
                model.logits(xs[s:s + batch_size], ys[s:s + batch_size])

    run()
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        run()
        times.append((time.perf_counter() - t0) * 1000.0 / n)
    return float(np.median(times))


def metrics_dict(m: Metrics) -> dict:
    return {k: v for k, v in asdict(m).items() if v is not None}
