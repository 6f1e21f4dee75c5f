"""The four architecture variants and their checkpoints.

I-Net: conv1 -> conv2 -> conv3 (each conv -> ReLU -> BN), then either a
dropout+FC head over the flattened last features (``inet``) or GAP+FC
(``inet_gap``).

FB-Net reroutes F2 and F3 back through conv2 and conv3 (shared weights,
shared batch-norm) to produce the feedback branches F22->F23 and
F32->F33; the decision input is the concatenation of the three branch
features, pooled (``fbnet``, 96-d) or flattened (``fbnet_nogap``).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .ops import (
    BatchNormParams,
    ConvParams,
    LinearParams,
    batchnorm,
    batchnorm_backward,
    conv2d,
    conv2d_backward,
    dropout,
    dropout_backward,
    global_average_pool,
    global_average_pool_backward,
    linear,
    linear_backward,
    relu,
    relu_backward,
    softmax,
)

VARIANTS = ("inet", "inet_gap", "fbnet", "fbnet_nogap")

# decision-head input width per variant (for 7x16x16 input)
FC_WIDTH = {
    "inet": 32 * 10 * 10,
    "inet_gap": 32,
    "fbnet": 96,
    "fbnet_nogap": 32 * 10 * 10 + 32 * 8 * 8 + 32 * 6 * 6,
}

CHECKPOINT_MAGIC = b"FBNET1\n"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or mismatching checkpoint file."""


@dataclass
class ModelParams:
    variant: str
    conv1: ConvParams
    conv2: ConvParams
    conv3: ConvParams
    bn1: BatchNormParams
    bn2: BatchNormParams
    bn3: BatchNormParams
    fc: LinearParams

    def trainable(self) -> dict[str, np.ndarray]:
        """Live views of the trainable arrays, in canonical order."""
        return {
            "conv1.kernels": self.conv1.kernels,
            "conv1.bias": self.conv1.bias,
            "bn1.gamma": self.bn1.gamma,
            "bn1.beta": self.bn1.beta_affine,
            "conv2.kernels": self.conv2.kernels,
            "conv2.bias": self.conv2.bias,
            "bn2.gamma": self.bn2.gamma,
            "bn2.beta": self.bn2.beta_affine,
            "conv3.kernels": self.conv3.kernels,
            "conv3.bias": self.conv3.bias,
            "bn3.gamma": self.bn3.gamma,
            "bn3.beta": self.bn3.beta_affine,
            "fc.weights": self.fc.weights,
            "fc.bias": self.fc.bias,
        }

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Trainable arrays plus batch-norm running statistics."""
        out = {}
        for i, bn in (("1", self.bn1), ("2", self.bn2), ("3", self.bn3)):
            conv = getattr(self, f"conv{i}")
            out[f"conv{i}.kernels"] = conv.kernels
            out[f"conv{i}.bias"] = conv.bias
            out[f"bn{i}.gamma"] = bn.gamma
            out[f"bn{i}.beta"] = bn.beta_affine
            out[f"bn{i}.running_mean"] = bn.running_mean
            out[f"bn{i}.running_var"] = bn.running_var
        out["fc.weights"] = self.fc.weights
        out["fc.bias"] = self.fc.bias
        return out

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "ModelParams":
        other = self.copy()
        for name, arr in other.state_tensors().items():
            obj, attr = _resolve(other, name)
            setattr(obj, attr, arr.astype(dtype))
        return other


_ATTR = {"kernels": "kernels", "bias": "bias", "gamma": "gamma", "beta": "beta_affine",
         "running_mean": "running_mean", "running_var": "running_var",
         "weights": "weights"}


def _resolve(params: ModelParams, name: str):
    head, leaf = name.split(".")
    return getattr(params, head), _ATTR[leaf]


def set_tensor(params: ModelParams, name: str, value: np.ndarray) -> None:
    obj, attr = _resolve(params, name)
    setattr(obj, attr, value)


def init_model(variant: str, seed: int = 0) -> ModelParams:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    rng = np.random.default_rng(seed)
    return ModelParams(
        variant=variant,
        conv1=ops.init_conv(rng, 7, 32),
        conv2=ops.init_conv(rng, 32, 32),
        conv3=ops.init_conv(rng, 32, 32),
        bn1=ops.init_batchnorm(32),
        bn2=ops.init_batchnorm(32),
        bn3=ops.init_batchnorm(32),
        fc=ops.init_linear(rng, FC_WIDTH[variant], 2),
    )


@dataclass
class FeatureBundle:
    f1: np.ndarray
    f2: np.ndarray
    f3: np.ndarray
    f22: np.ndarray | None = None
    f23: np.ndarray | None = None
    f32: np.ndarray | None = None
    f33: np.ndarray | None = None


@dataclass
class ForwardResult:
    logits: np.ndarray  # (B, 2)
    features: FeatureBundle
    cache: dict = field(repr=False, default_factory=dict)


def _stage(x, conv, bn, mode):
    y, ccache = conv2d(x, conv)
    y, rmask = relu(y)
    y, bcache = batchnorm(y, bn, mode)
    return y, (ccache, rmask, bcache)


def _check_input(x):
    xb, _ = ops._as_batch(x)
    if xb.shape[1:] != (7, 16, 16):
        raise ValueError(f"expected 7x16x16 patches, got shape {tuple(x.shape)}")
    return xb


def forward(params: ModelParams, x: np.ndarray, mode: str = "eval",
            rng: np.random.Generator | None = None,
            dropout_rate: float = 0.5) -> ForwardResult:
    """Run the variant's forward pass on a batch of patches.

    Raw logits are returned (softmax only at prediction time). The cache
    holds everything ``backward`` needs.
    """
    xb = _check_input(x)
    v = params.variant
    cache: dict = {"mode": mode, "dropout_rate": dropout_rate}
    f1, cache["s1"] = _stage(xb, params.conv1, params.bn1, mode)
    f2, cache["s2"] = _stage(f1, params.conv2, params.bn2, mode)
    f3, cache["s3"] = _stage(f2, params.conv3, params.bn3, mode)
    bundle = FeatureBundle(f1=f1, f2=f2, f3=f3)

    if v in ("fbnet", "fbnet_nogap"):
        f22, cache["s22"] = _stage(f2, params.conv2, params.bn2, mode)
        f23, cache["s23"] = _stage(f22, params.conv3, params.bn3, mode)
        f32, cache["s32"] = _stage(f3, params.conv2, params.bn2, mode)
        f33, cache["s33"] = _stage(f32, params.conv3, params.bn3, mode)
        bundle.f22, bundle.f23 = f22, f23
        bundle.f32, bundle.f33 = f32, f33
        branches = [f3, f23, f33]
    else:
        branches = [f3]

    dropped, masks = [], []
    for b in branches:
        d, m = dropout(b, dropout_rate, rng, mode)
        dropped.append(d)
        masks.append(m)
    cache["dropout_masks"] = masks
    cache["branch_shapes"] = [b.shape for b in branches]

    if v in ("inet_gap", "fbnet"):
        pooled, gcaches = [], []
        for d in dropped:
            g, gc = global_average_pool(d)
            pooled.append(g)
            gcaches.append(gc)
        cache["gap"] = gcaches
        head_in = np.concatenate(pooled, axis=1)
    else:
        head_in = np.concatenate([d.reshape(d.shape[0], -1) for d in dropped], axis=1)
    logits, cache["fc"] = linear(head_in, params.fc)
    return ForwardResult(logits=logits, features=bundle, cache=cache)


def _stage_backward(scache, dy, need_dx=True):
    ccache, rmask, bcache = scache
    d, dgamma, dbeta = batchnorm_backward(bcache, dy)
    d = relu_backward(rmask, d)
    dx, dk, db = conv2d_backward(ccache, d, need_dx=need_dx)
    return dx, (dk, db, dgamma, dbeta)


def backward(params: ModelParams, result: ForwardResult, dlogits: np.ndarray,
             need_input_grad: bool = False):
    """Backpropagate a logit cotangent.

    Returns ``(grads, feature_grads, input_grad)``. ``grads`` is keyed
    like ``ModelParams.trainable()`` with shared conv2/conv3 (and bn2/bn3)
    cotangents accumulated over all application sites. ``feature_grads``
    maps branch names (f3/f23/f33) to the full cotangents of the post-BN
    features. In eval mode the batch-norm affine cotangents are zero.
    """
    v = params.variant
    cache = result.cache
    rate = cache["dropout_rate"]
    mode = cache["mode"]

    grads = {k: np.zeros_like(a) for k, a in params.trainable().items()}

    def add(name_prefix, contrib):
        dk, db, dgamma, dbeta = contrib
        conv_name, bn_name = name_prefix
        grads[f"{conv_name}.kernels"] += dk
        grads[f"{conv_name}.bias"] += db
        if dgamma is not None:
            grads[f"{bn_name}.gamma"] += dgamma
            grads[f"{bn_name}.beta"] += dbeta

    dhead, dw, dbias = linear_backward(cache["fc"], dlogits)
    grads["fc.weights"] += dw
    grads["fc.bias"] += dbias

    shapes = cache["branch_shapes"]
    masks = cache["dropout_masks"]
    dbranches = []
    if v in ("inet_gap", "fbnet"):
        off = 0
        for shape, gc in zip(shapes, cache["gap"]):
            c = shape[1]
            d = global_average_pool_backward(gc, dhead[:, off:off + c])
            dbranches.append(d)
            off += c
    else:
        off = 0
        for shape in shapes:
            n = shape[1] * shape[2] * shape[3]
            dbranches.append(dhead[:, off:off + n].reshape(shape))
            off += n
    if mode == "train":
        dbranches = [dropout_backward(m, rate, d) for m, d in zip(masks, dbranches)]

    feature_grads = {"f3": dbranches[0].copy()}
    if v in ("fbnet", "fbnet_nogap"):
        d_f33 = dbranches[2]
        feature_grads["f33"] = d_f33
        d_f32, c33 = _stage_backward(cache["s33"], d_f33)
        add(("conv3", "bn3"), c33)
        d_f3_fb, c32 = _stage_backward(cache["s32"], d_f32)
        add(("conv2", "bn2"), c32)

        d_f23 = dbranches[1]
        feature_grads["f23"] = d_f23
        d_f22, c23 = _stage_backward(cache["s23"], d_f23)
        add(("conv3", "bn3"), c23)
        d_f2_fb, c22 = _stage_backward(cache["s22"], d_f22)
        add(("conv2", "bn2"), c22)

        d_f3 = dbranches[0] + d_f3_fb
        feature_grads["f3"] = d_f3
    else:
        d_f3 = dbranches[0]
        d_f2_fb = 0.0
    d_f2, c3 = _stage_backward(cache["s3"], d_f3)
    add(("conv3", "bn3"), c3)
    d_f1, c2 = _stage_backward(cache["s2"], d_f2 + d_f2_fb)
    add(("conv2", "bn2"), c2)
    dx, c1 = _stage_backward(cache["s1"], d_f1, need_dx=need_input_grad)
    add(("conv1", "bn1"), c1)
    return grads, feature_grads, dx


NEGATIVE, POSITIVE = 0, 1


def predict(logits: np.ndarray, threshold: float = 0.5):
    """Class decision from raw logits: positive iff P(positive) >= threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    p = softmax(np.asarray(logits, dtype=np.float64))
    prob = p[..., POSITIVE]
    label = (prob >= threshold).astype(np.int64)
    if np.ndim(logits) == 1:
        return int(label), float(prob)
    return label, prob


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path, meta: dict | None = None) -> None:
    """Write magic + human-readable JSON directory + raw little-endian f32 blobs."""
    tensors = params.state_tensors()
    directory = []
    offset = 0
    for name, arr in tensors.items():
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    header = {
        "format_version": CHECKPOINT_VERSION,
        "variant": params.variant,
        "epsilon": params.bn1.epsilon,
        "momentum_stats": params.bn1.momentum_stats,
        "meta": meta or {},
        "tensors": directory,
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, expect_variant: str | None = None,
                    with_meta: bool = False):
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a FBNET1 checkpoint")
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
        blob = fh.read()
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('format_version')} "
            f"unsupported (expected {CHECKPOINT_VERSION})"
        )
    variant = header.get("variant")
    if variant not in VARIANTS:
        raise CheckpointError(f"{path}: unknown variant {variant!r}")
    if expect_variant is not None and variant != expect_variant:
        raise CheckpointError(
            f"{path}: checkpoint is for variant {variant!r}, expected {expect_variant!r}"
        )
    params = init_model(variant, seed=0)
    params.bn1.epsilon = params.bn2.epsilon = params.bn3.epsilon = header["epsilon"]
    params.bn1.momentum_stats = params.bn2.momentum_stats = \
        params.bn3.momentum_stats = header["momentum_stats"]
    expected_names = list(params.state_tensors().keys())
    got_names = [t["name"] for t in header["tensors"]]
    if got_names != expected_names:
        raise CheckpointError(
            f"{path}: tensor directory mismatch: got {got_names}, "
            f"expected {expected_names}"
        )
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 4
        chunk = blob[entry["offset"]:entry["offset"] + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(
                f"{path}: truncated blob for {entry['name']}: "
                f"need {nbytes} bytes at offset {entry['offset']}, have {len(chunk)}"
            )
        arr = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        set_tensor(params, entry["name"], arr)
    if with_meta:
        return params, header["meta"]
    return params
