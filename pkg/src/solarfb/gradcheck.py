"""Finite-difference verification of the analytic gradients.

The checker upcasts a float32 model to float64, replays the exact same
forward (fixed dropout mask, fresh running-stat copies per evaluation)
and compares analytic cotangents against central differences on a seeded
sample of coordinates. Coordinates whose perturbation flips a ReLU gate
are skipped: the loss is not differentiable there.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import models
from .models import ModelParams
from .ops import softmax_cross_entropy_batch

FD_REL_STEP = 1e-3
FD_MIN_STEP = 1e-4


@dataclass
class CoordReport:
    tensor: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: dict[str, CoordReport] = field(default_factory=dict)
    skipped: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures and self.max_rel_error < 1e-3


def _relu_signature(cache) -> np.ndarray:
    masks = [cache[k][1] for k in sorted(cache) if k.startswith("s")]
    return np.concatenate([m.ravel() for m in masks])


def _rel_error(a: float, n: float) -> float:
    denom = max(abs(a), abs(n), 1e-8)
    return abs(a - n) / denom


def model_gradcheck(params: ModelParams, patches: np.ndarray | None = None,
                    labels: np.ndarray | None = None, seed: int = 0,
                    samples_per_tensor: int = 6, dropout_rate: float = 0.0,
                    mode: str = "train",
                    flip_sign: bool = False) -> GradCheckReport:
    """Check analytic vs numeric gradients of the mean cross-entropy loss.

    ``flip_sign`` is a test hook that corrupts one analytic gradient so
    harnesses can verify the checker actually fails.
    """
    rng = np.random.default_rng(seed)
    if patches is None:
        patches = rng.standard_normal((1, 7, 16, 16)).astype(np.float32)
    if labels is None:
        labels = rng.integers(0, 2, size=patches.shape[0])
    p64 = params.astype(np.float64)
    x64 = np.asarray(patches, dtype=np.float64)
    drop_seed = int(rng.integers(0, 2**31))

    def evaluate(p: ModelParams, x: np.ndarray):
        # fresh copy: train-mode BN mutates running stats
        res = models.forward(p.copy(), x, mode=mode,
                             rng=np.random.default_rng(drop_seed),
                             dropout_rate=dropout_rate)
        loss, _ = softmax_cross_entropy_batch(res.logits, labels)
        return loss, _relu_signature(res.cache)

    base = p64.copy()
    res = models.forward(base, x64, mode=mode,
                         rng=np.random.default_rng(drop_seed),
                         dropout_rate=dropout_rate)
    _, dlogits = softmax_cross_entropy_batch(res.logits, labels)
    grads, _, dx = models.backward(p64, res, dlogits, need_input_grad=True)
    if flip_sign:
        # fc.bias receives the raw logit cotangent, which never vanishes
        grads["fc.bias"] = -grads["fc.bias"]

    targets = dict(p64.trainable())
    targets["input"] = x64
    analytic = dict(grads)
    analytic["input"] = dx

    report = GradCheckReport(max_rel_error=0.0)
    for name, arr in targets.items():
        a_grad = analytic[name]
        flat = arr.reshape(-1)
        k = min(samples_per_tensor, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False)
        for ci in coords:
            orig = flat[ci]
            h = max(FD_MIN_STEP, FD_REL_STEP * abs(orig))
            flat[ci] = orig + h
            lp, sig_p = evaluate(p64, x64)
            flat[ci] = orig - h
            lm, sig_m = evaluate(p64, x64)
            flat[ci] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                report.failures.append(f"{name}[{ci}]: non-finite finite-difference loss")
                continue
            if not np.array_equal(sig_p, sig_m):
                report.skipped += 1  # perturbation crosses a ReLU kink
                continue
            numeric = (lp - lm) / (2 * h)
            a = float(a_grad.reshape(-1)[ci])
            if not np.isfinite(a):
                report.failures.append(f"{name}[{ci}]: non-finite analytic gradient")
                continue
            rel = _rel_error(a, numeric)
            idx = np.unravel_index(ci, arr.shape)
            if name not in report.worst or rel > report.worst[name].rel_error:
                report.worst[name] = CoordReport(name, tuple(int(i) for i in idx),
                                                 a, numeric, rel)
            report.max_rel_error = max(report.max_rel_error, rel)
    return report


def gradcheck(loss_and_grad, x: np.ndarray, seed: int = 0,
              samples: int = 32) -> float:
    """Generic checker for a scalar function of one tensor.

    ``loss_and_grad(x) -> (loss, grad)`` must be deterministic. Returns the
    worst relative error over a seeded sample of coordinates.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    _, grad = loss_and_grad(x)
    flat = x.reshape(-1)
    worst = 0.0
    for ci in rng.choice(flat.size, size=min(samples, flat.size), replace=False):
        orig = flat[ci]
        h = max(FD_MIN_STEP, FD_REL_STEP * abs(orig))
        flat[ci] = orig + h
        lp, _ = loss_and_grad(x)
        flat[ci] = orig - h
        lm, _ = loss_and_grad(x)
        flat[ci] = orig
        numeric = (lp - lm) / (2 * h)
        worst = max(worst, _rel_error(float(grad.reshape(-1)[ci]), numeric))
    return worst
