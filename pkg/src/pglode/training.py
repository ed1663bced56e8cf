"""Losses, the Adam update rule, and the deterministic training loop.

The regression loss works on log1p-transformed rainfall but decides its
per-pixel weights in raw mm against the P95 threshold (weight ``lambda`` at
or above the threshold, 1 below). The exceedance head gets a mean binary
cross-entropy with labels from the same raw-space rule. Training is
deterministic for a fixed seed: one seeded permutation fixes the minibatch
order for every epoch, and Adam carries no randomness of its own.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .grid import RainField, ThresholdMap
from .synth import SampleSet

BCE_EPS = 1e-7


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class LossConfig:
    lambda_extreme: float = 5.0
    bce_weight: float = 1.0
    learning_rate: float = 3e-3
    epochs: int = 8
    batch_size: int = 8

    def __post_init__(self) -> None:
        if self.lambda_extreme < 1:
            raise ValueError(f"lambda_extreme must be >= 1, got {self.lambda_extreme}")
        if self.bce_weight < 0:
            raise ValueError(f"bce_weight must be >= 0, got {self.bce_weight}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


@dataclass
class TrainReport:
    """Per-epoch (total, regression, classification) losses plus timing."""

    epoch_losses: list[tuple[float, float, float]] = field(default_factory=list)
    seconds: float = 0.0
    checkpoint_path: str | None = None

    def __post_init__(self) -> None:
        for row in self.epoch_losses:
            if not all(np.isfinite(v) for v in row):
                raise ValueError("non-finite loss in train report")


# ---------------------------------------------------------------------------
# loss graph builders


def _as_raw_target(target) -> np.ndarray:
    if isinstance(target, RainField):
        return target.values.astype(float)
    return np.asarray(target, dtype=float)


def _with_channel_axis(raw: np.ndarray, like_shape: tuple[int, ...]) -> np.ndarray:
    # (B, H, W) targets align with (B, 1, H, W) head output
    if raw.ndim == len(like_shape) - 1:
        return raw[:, None] if raw.ndim == 3 else raw[None]
    return raw


def _as_thresholds(thr) -> np.ndarray:
    if isinstance(thr, ThresholdMap):
        return thr.p95
    return np.asarray(thr, dtype=float)


def extreme_weighted_mse(
    tape: ad.Tape, pred_log: ad.Node, target, thr, lambda_extreme: float
) -> ad.Node:
    """Mean of w * (log1p(y) - pred)^2 with w = lambda where raw y >= P95.

    ``target`` is raw rainfall (RainField or array) broadcastable to the
    prediction's shape; ``thr`` likewise. The boundary case y == P95 takes
    the extreme weight.
    """
    dtype = pred_log.value.dtype
    raw = _with_channel_axis(_as_raw_target(target), pred_log.shape).astype(dtype)
    p95 = _as_thresholds(thr)
    raw_b = np.broadcast_to(raw, pred_log.shape)
    p95_b = np.broadcast_to(p95, pred_log.shape)
    if not np.all(np.isfinite(pred_log.value)):
        raise FloatingPointError("extreme_weighted_mse: non-finite prediction")
    weights = np.where(raw_b >= p95_b, lambda_extreme, 1.0).astype(dtype)
    diff = ad.sub(pred_log, tape.constant(np.log1p(raw_b)))
    weighted_sq = ad.mul(ad.mul(diff, diff), tape.constant(weights))
    return ad.scale(ad.reduce_sum(weighted_sq), 1.0 / pred_log.value.size)


def exceedance_bce(tape: ad.Tape, prob: ad.Node, labels: np.ndarray) -> ad.Node:
    """Mean binary cross-entropy, probabilities clamped away from {0, 1}."""
    y = np.broadcast_to(np.asarray(labels, dtype=prob.value.dtype), prob.shape)
    if y.shape != prob.shape:
        raise ad.ShapeError("exceedance_bce", y.shape, prob.shape)
    p = ad.clip(prob, BCE_EPS, 1.0 - BCE_EPS)
    one_minus = ad.sub(tape.constant(np.ones_like(prob.value)), p)
    pos = ad.mul(tape.constant(y), ad.log(p))
    neg = ad.mul(tape.constant(1.0 - y), ad.log(one_minus))
    return ad.scale(ad.reduce_mean(ad.add(pos, neg)), -1.0)


def exceedance_labels(target, thr) -> np.ndarray:
    """Binary labels: raw rainfall at or above its pixel's P95."""
    return (_as_raw_target(target) >= _as_thresholds(thr)).astype(float)


def total_loss(
    tape: ad.Tape,
    pred_log: ad.Node,
    prob: ad.Node,
    target,
    thr,
    cfg: LossConfig,
) -> tuple[ad.Node, ad.Node, ad.Node]:
    """Composite loss; returns (total, regression, classification) nodes.

    With ``bce_weight`` 0 the total is bitwise equal to the weighted MSE
    alone (adding a scaled-to-zero term is exact).
    """
    raw = _as_raw_target(target)
    p95 = _as_thresholds(thr)
    wmse = extreme_weighted_mse(tape, pred_log, raw, p95, cfg.lambda_extreme)
    labels = _with_channel_axis(exceedance_labels(raw, p95), prob.shape)
    bce = exceedance_bce(tape, prob, np.broadcast_to(labels, prob.shape))
    return ad.add(wmse, ad.scale(bce, cfg.bce_weight)), wmse, bce


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with the standard constants (b1=0.9, b2=0.999, eps=1e-8)."""

    def __init__(self, params: dict[str, np.ndarray], learning_rate: float) -> None:
        self.params = params
        self.lr = learning_rate
        self.b1, self.b2, self.eps = 0.9, 0.999, 1e-8
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray | None]) -> None:
        self.t += 1
        for key, g in grads.items():
            if g is None:
                continue  # parameter not touched by this graph (e.g. unused gate)
            m = self.m[key]
            v = self.v[key]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            m_hat = m / (1 - self.b1 ** self.t)
            v_hat = v / (1 - self.b2 ** self.t)
            self.params[key] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# training loop


def sample_windows(n_days: int, history: int, lead: int) -> tuple[np.ndarray, np.ndarray]:
    """All (window, target) index pairs fully contained in [0, n_days).

    Returns (windows (N, history) oldest-first, targets (N,)).
    """
    first = history + lead - 1
    targets = np.arange(first, n_days)
    if targets.size == 0:
        raise ValueError(
            f"no trainable samples: {n_days} days with history {history} lead {lead}"
        )
    offsets = np.arange(-lead - history + 1, -lead + 1)
    return targets[:, None] + offsets[None, :], targets


def fit(
    model,
    train: SampleSet,
    thresholds: ThresholdMap,
    cfg: LossConfig,
    seed: int = 0,
    log_fn=None,
) -> TrainReport:
    """Train ``model`` in place; deterministic for fixed seed and inputs.

    The minibatch order is one seeded permutation of the samples, reused
    every epoch. Raises :class:`DivergenceError` (naming epoch and batch)
    the moment a loss goes non-finite.

    The loop runs in single precision (inputs, activations, gradients, Adam
    state); trained parameters are restored to float64 at the end. This is
    purely a throughput choice on the pure-numpy backend.
    """
    t_start = time.perf_counter()
    mcfg = model.config
    channels = np.stack([s.channels for s in train.predictors]).astype(float)
    normalized = ((channels - model.norm.mean[None, :, None, None]) /
                  model.norm.std[None, :, None, None]).astype(np.float32)
    rain = np.stack(
        [t.values for t in train.targets]
    ).astype(np.float32)[:, None]  # (n, 1, H, W)
    p95 = thresholds.p95.astype(np.float32)[None, None]

    windows, targets = sample_windows(train.n_days, mcfg.history_days, mcfg.lead_days)
    order = np.random.default_rng(seed).permutation(targets.size)

    for key in model.params:
        model.params[key] = model.params[key].astype(np.float32)
    optimizer = Adam(model.params, cfg.learning_rate)
    report = TrainReport()
    try:
        for epoch in range(cfg.epochs):
            sums = np.zeros(3)
            for bi, lo in enumerate(range(0, order.size, cfg.batch_size)):
                sel = order[lo:lo + cfg.batch_size]
                tape = ad.Tape()
                pnodes = model.param_nodes(tape)
                inputs = model.inputs_from_array(normalized, windows[sel])
                intensity, prob = model.forward(tape, inputs, pnodes)
                total, wmse, bce = total_loss(
                    tape, intensity, prob, rain[targets[sel]], p95, cfg
                )
                if not np.isfinite(total.value):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch + 1}, batch {bi + 1}"
                    )
                tape.backward(total)
                optimizer.step({k: n.grad for k, n in pnodes.items()})
                sums += sel.size * np.array(
                    [float(total.value), float(wmse.value), float(bce.value)]
                )
                tape.release()
            mean = tuple(float(x) for x in sums / targets.size)
            report.epoch_losses.append(mean)
            if log_fn is not None:
                log_fn(epoch + 1, *mean)
    finally:
        for key in model.params:
            model.params[key] = model.params[key].astype(np.float64)
    report.seconds = time.perf_counter() - t_start
    return report


def write_loss_csv(report: TrainReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,total,mse,bce\n")
        for i, (total, mse, bce) in enumerate(report.epoch_losses, start=1):
            fh.write(f"{i},{total!r},{mse!r},{bce!r}\n")
