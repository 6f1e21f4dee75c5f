"""Weakly-supervised localization maps shared by all detection heads.

A map is a single-channel nonnegative array; ``normalize_map`` brings it
to [0, 1], which is the common currency of the ROC harness and the
m-PCNN stimulus. Multi-branch models (FB-Net) produce per-branch maps at
their native resolutions; those are resized (nearest neighbor) to the
working resolution before summation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import models
from .models import ModelParams
from .ops import softmax


@dataclass
class ActivationMap:
    values: np.ndarray  # (H, W) float32
    constant: bool = False
    degenerate: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.values.shape


def _values(m) -> np.ndarray:
    return m.values if isinstance(m, ActivationMap) else np.asarray(m)


def resize_nearest(m, target_h: int, target_w: int):
    """Nearest-neighbor resample; source index floor(i*H/target)."""
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target size must be >= 1, got {target_h}x{target_w}")
    v = _values(m)
    h, w = v.shape
    rows = (np.arange(target_h) * h) // target_h
    cols = (np.arange(target_w) * w) // target_w
    out = v[np.ix_(rows, cols)]
    if isinstance(m, ActivationMap):
        return ActivationMap(out, constant=m.constant, degenerate=m.degenerate,
                             meta=dict(m.meta))
    return out


def normalize_map(m) -> ActivationMap:
    """Min-max rescale to [0, 1]; a constant map becomes zeros with a flag."""
    v = _values(m).astype(np.float64)
    lo, hi = v.min(), v.max()
    degenerate = m.degenerate if isinstance(m, ActivationMap) else False
    if hi == lo:
        return ActivationMap(np.zeros(v.shape, dtype=np.float32), constant=True,
                             degenerate=degenerate)
    out = ((v - lo) / (hi - lo)).astype(np.float32)
    return ActivationMap(out, degenerate=degenerate)


def cam(features, weights, bias: float = 0.0, target_size=None) -> ActivationMap:
    """Weighted channel combination: map(i,j) = sum_k w_k * F_k(i,j).

    ``features`` is a (C,H,W) stack or a list of per-branch stacks whose
    channel counts partition ``weights`` in concatenation order. Branch
    maps are resized to ``target_size`` before summation; negative values
    are kept (clipping happens only at final normalization). ``bias`` is
    carried in the map metadata, never added to the pixels.
    """
    branches = list(features) if isinstance(features, (list, tuple)) else [features]
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    total_c = sum(b.shape[0] for b in branches)
    if w.size != total_c:
        raise ValueError(
            f"got {w.size} channel weights for {total_c} feature channels"
        )
    maps = []
    off = 0
    for b in branches:
        c = b.shape[0]
        maps.append(np.tensordot(w[off:off + c], np.asarray(b, dtype=np.float64),
                                 axes=(0, 0)))
        off += c
    if target_size is None:
        shapes = {m.shape for m in maps}
        if len(shapes) > 1:
            raise ValueError(
                f"branches have different spatial sizes {sorted(shapes)}; "
                "a target_size is required"
            )
        target_size = maps[0].shape
    th, tw = target_size
    out = np.zeros((th, tw), dtype=np.float64)
    for m in maps:
        out += resize_nearest(m, th, tw)
    return ActivationMap(out.astype(np.float32), meta={"bias": float(bias)})


def feature_average(features) -> ActivationMap:
    """Channelwise mean of a feature stack; equals cam with uniform 1/C weights."""
    branches = list(features) if isinstance(features, (list, tuple)) else [features]
    total_c = sum(b.shape[0] for b in branches)
    if total_c < 1:
        raise ValueError("feature_average needs at least one channel")
    m = cam(features, np.full(total_c, 1.0 / total_c),
            target_size=None if len(branches) == 1 else _common_size(branches))
    m.meta.pop("bias", None)
    return m


def _common_size(branches):
    # largest branch resolution hosts the combination
    return max(((b.shape[1], b.shape[2]) for b in branches))


def _branch_features(params: ModelParams, result) -> list[np.ndarray]:
    f = result.features
    if params.variant in ("fbnet", "fbnet_nogap"):
        return [f.f3[0], f.f23[0], f.f33[0]]
    return [f.f3[0]]


def model_cam(params: ModelParams, patch: np.ndarray, class_index: int = models.POSITIVE,
              target_size=None) -> ActivationMap:
    """CAM from a GAP-headed model's FC weights over the last conv features."""
    if params.variant not in ("inet_gap", "fbnet"):
        raise ValueError(
            f"CAM needs a GAP decision head; variant {params.variant!r} has none"
        )
    result = models.forward(params, patch[None], mode="eval")
    branches = _branch_features(params, result)
    return cam(branches, params.fc.weights[class_index],
               bias=float(params.fc.bias[class_index]), target_size=target_size)


def grad_cam(params: ModelParams, patch: np.ndarray, class_index: int = models.POSITIVE,
             target: str = "logit", target_size=None) -> ActivationMap:
    """Grad-CAM: channel weights are the GAP of the class-score gradient.

    ``target="logit"`` differentiates the raw class logit; ``target=
    "probability"`` differentiates the float32 softmax output, which
    reproduces the 32-bit underflow failure on saturated predictions. An
    all-zero gradient yields a degenerate-flagged zero map, never a silent
    zero.
    """
    if class_index not in (0, 1):
        raise ValueError(f"class_index must be 0 or 1, got {class_index}")
    result = models.forward(params, patch[None], mode="eval")
    if target == "logit":
        dlogits = np.zeros((1, 2), dtype=result.logits.dtype)
        dlogits[0, class_index] = 1.0
    elif target == "probability":
        p = softmax(result.logits.astype(np.float32))[0]
        # float32 softmax jacobian row: underflows to zero when saturated
        dlogits = (-p[class_index] * p).astype(np.float32)[None, :]
        dlogits[0, class_index] += np.float32(p[class_index])
    else:
        raise ValueError(f"unknown grad-cam target {target!r}")
    _, feature_grads, _ = models.backward(params, result, dlogits)
    if params.variant in ("fbnet", "fbnet_nogap"):
        grad_stacks = [feature_grads["f3"][0], feature_grads["f23"][0],
                       feature_grads["f33"][0]]
    else:
        grad_stacks = [feature_grads["f3"][0]]
    weights = np.concatenate(
        [g.mean(axis=(1, 2), dtype=np.float64) for g in grad_stacks]
    )
    branches = _branch_features(params, result)
    m = cam(branches, weights, target_size=target_size)
    m.meta.pop("bias", None)
    m.meta["channel_weights"] = weights
    if not np.any(weights != 0.0):
        m.degenerate = True
        m.values = np.zeros_like(m.values)
    return m
