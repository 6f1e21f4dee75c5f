"""Numerical layer kernels: forward passes plus explicit gradient functions.

All feature tensors are numpy arrays in channel-major (C, H, W) layout,
optionally with a leading batch axis (B, C, H, W). Parameters are stored
as float32; reductions accumulate in float64. Every forward function
returns ``(output, cache)`` where the cache feeds the matching
``*_backward`` function.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NumericError(ArithmeticError):
    """Non-finite value produced where the contract forbids it."""


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class ConvParams:
    kernels: np.ndarray  # (c_out, c_in, 3, 3)
    bias: np.ndarray  # (c_out,)

    def __post_init__(self):
        if self.kernels.ndim != 4 or self.kernels.shape[2:] != (3, 3):
            raise ValueError(
                f"conv kernels must have shape (out, in, 3, 3), got {self.kernels.shape}"
            )
        if self.bias.shape != (self.kernels.shape[0],):
            raise ValueError(
                f"conv bias shape {self.bias.shape} does not match "
                f"{self.kernels.shape[0]} output channels"
            )


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta_affine: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum_stats: float = 0.1

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("batchnorm epsilon must be positive")
        if np.any(self.running_var < 0):
            raise ValueError("batchnorm running variance must be nonnegative")


@dataclass
class LinearParams:
    weights: np.ndarray  # (classes, features)
    bias: np.ndarray  # (classes,)

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise ValueError(f"linear weights must be 2-d, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"linear bias shape {self.bias.shape} does not match "
                f"{self.weights.shape[0]} classes"
            )


def init_conv(rng: np.random.Generator, c_in: int, c_out: int) -> ConvParams:
    return ConvParams(
        kernels=he_uniform(rng, (c_out, c_in, 3, 3), fan_in=c_in * 9),
        bias=np.zeros(c_out, dtype=np.float32),
    )


def init_batchnorm(channels: int) -> BatchNormParams:
    return BatchNormParams(
        gamma=np.ones(channels, dtype=np.float32),
        beta_affine=np.zeros(channels, dtype=np.float32),
        running_mean=np.zeros(channels, dtype=np.float32),
        running_var=np.ones(channels, dtype=np.float32),
    )


def init_linear(rng: np.random.Generator, features: int, classes: int = 2) -> LinearParams:
    return LinearParams(
        weights=he_uniform(rng, (classes, features), fan_in=features),
        bias=np.zeros(classes, dtype=np.float32),
    )


# ---------------------------------------------------------------------------
# convolution


def _as_batch(x: np.ndarray):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected a (C,H,W) or (B,C,H,W) tensor, got shape {x.shape}")


def _im2col(x: np.ndarray):
    """Unfold 3x3 windows of (B,C,H,W) into a (C*9, B*H'*W') matrix."""
    b, c, h, w = x.shape
    hp, wp = h - 2, w - 2
    cols = np.empty((c, 9, b, hp, wp), dtype=x.dtype)
    for k in range(9):
        u, v = divmod(k, 3)
        cols[:, k] = x[:, :, u:u + hp, v:v + wp].transpose(1, 0, 2, 3)
    return cols.reshape(c * 9, b * hp * wp), hp, wp


def _conv_apply(x: np.ndarray, kmat: np.ndarray, bias):
    b = x.shape[0]
    cols, hp, wp = _im2col(x)
    y = kmat @ cols
    if bias is not None:
        y += bias[:, None]
    y = np.ascontiguousarray(y.reshape(-1, b, hp, wp).transpose(1, 0, 2, 3))
    return y, cols


def conv2d(x: np.ndarray, params: ConvParams):
    """Valid 3x3 cross-correlation with stride 1, no padding."""
    xb, squeeze = _as_batch(x)
    b, c, h, w = xb.shape
    c_out, c_in = params.kernels.shape[:2]
    if c != c_in:
        raise ValueError(
            f"conv2d channel mismatch: input shape {tuple(x.shape)} has {c} channels, "
            f"kernels shape {tuple(params.kernels.shape)} expect {c_in}"
        )
    if h < 3 or w < 3:
        raise ValueError(f"conv2d needs spatial size >= 3x3, got {h}x{w}")
    y, cols = _conv_apply(xb, params.kernels.reshape(c_out, -1), params.bias)
    cache = (cols, xb.shape, params)
    return (y[0] if squeeze else y), cache


def conv2d_backward(cache, dy: np.ndarray, need_dx: bool = True):
    """Map an output cotangent to (input cotangent, kernel cotangent, bias cotangent)."""
    cols, xshape, params = cache
    dyb, _ = _as_batch(dy)
    b, c_out, hp, wp = dyb.shape
    dymat = np.ascontiguousarray(dyb.transpose(1, 0, 2, 3)).reshape(c_out, b * hp * wp)
    dk = (dymat @ cols.T).reshape(params.kernels.shape)
    db = dymat.sum(axis=1, dtype=np.float64).astype(params.bias.dtype)
    dx = None
    if need_dx:
        # scatter the window cotangents back to input positions (col2im)
        c_in = params.kernels.shape[1]
        dcols = (params.kernels.reshape(c_out, -1).T @ dymat).reshape(
            c_in, 9, b, hp, wp
        )
        dx = np.zeros(xshape, dtype=dyb.dtype)
        for k in range(9):
            u, v = divmod(k, 3)
            dx[:, :, u:u + hp, v:v + wp] += dcols[:, k].transpose(1, 0, 2, 3)
    return dx, dk, db


# ---------------------------------------------------------------------------
# pointwise layers


def relu(x: np.ndarray):
    return np.maximum(x, 0), x > 0


def relu_backward(mask: np.ndarray, dy: np.ndarray):
    return dy * mask


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None, mode: str = "train"):
    """Inverted dropout: survivors are scaled at train time so eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x, np.ones(x.shape, dtype=bool)
    if rng is None:
        raise ValueError("train-mode dropout needs a seeded generator")
    mask = rng.random(x.shape, dtype=np.float32) >= rate
    scale = x.dtype.type(1.0 / (1.0 - rate))
    return x * mask * scale, mask


def dropout_backward(mask: np.ndarray, rate: float, dy: np.ndarray):
    scale = dy.dtype.type(1.0 / (1.0 - rate))
    return dy * mask * scale


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm(batch, params: BatchNormParams, mode: str = "train"):
    """Per-channel normalization over (batch x spatial).

    Train mode uses batch statistics and updates the running statistics in
    place (exponential moving average). Eval mode is a fixed per-channel
    affine map from the running statistics.
    """
    x = np.stack(batch) if isinstance(batch, (list, tuple)) else batch
    if x.ndim != 4:
        raise ValueError(f"batchnorm expects a (B,C,H,W) batch, got shape {x.shape}")
    c = x.shape[1]
    if c != params.gamma.shape[0]:
        raise ValueError(
            f"batchnorm channel mismatch: batch has {c}, params have {params.gamma.shape[0]}"
        )
    bc = lambda v: v.reshape(1, c, 1, 1)
    if mode == "eval":
        scale = (params.gamma / np.sqrt(params.running_var + params.epsilon)).astype(x.dtype)
        shift = (params.beta_affine - params.running_mean * scale).astype(x.dtype)
        return x * bc(scale) + bc(shift), ("eval", scale)
    mu = x.mean(axis=(0, 2, 3), dtype=np.float64)
    var = np.square(x).mean(axis=(0, 2, 3), dtype=np.float64) - mu * mu
    np.maximum(var, 0.0, out=var)
    inv = (1.0 / np.sqrt(var + params.epsilon)).astype(x.dtype)
    xhat = (x - bc(mu.astype(x.dtype))) * bc(inv)
    y = xhat * bc(params.gamma) + bc(params.beta_affine)
    m = params.momentum_stats
    params.running_mean = ((1 - m) * params.running_mean + m * mu).astype(
        params.running_mean.dtype
    )
    params.running_var = ((1 - m) * params.running_var + m * var).astype(
        params.running_var.dtype
    )
    return y, ("train", xhat, inv, params.gamma)


def batchnorm_backward(cache, dy: np.ndarray):
    """Returns (dx, dgamma, dbeta); affine cotangents are None in eval mode."""
    if cache[0] == "eval":
        scale = cache[1]
        return dy * scale.reshape(1, -1, 1, 1), None, None
    _, xhat, inv, gamma = cache
    c = xhat.shape[1]
    n = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    bc = lambda v: v.reshape(1, c, 1, 1)
    dgamma = (dy * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(gamma.dtype)
    dbeta = dy.sum(axis=(0, 2, 3), dtype=np.float64).astype(gamma.dtype)
    dxhat = dy * bc(gamma)
    s1 = dxhat.sum(axis=(0, 2, 3), dtype=np.float64).astype(xhat.dtype)
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(xhat.dtype)
    dx = bc(inv) / n * (n * dxhat - bc(s1) - xhat * bc(s2))
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# pooling / decision head


def global_average_pool(x: np.ndarray):
    xb, squeeze = _as_batch(x)
    y = xb.mean(axis=(2, 3), dtype=np.float64).astype(xb.dtype)
    return (y[0] if squeeze else y), xb.shape


def global_average_pool_backward(cache, dy: np.ndarray):
    b, c, h, w = cache
    dyb = dy.reshape(b, c)
    return np.ascontiguousarray(
        np.broadcast_to((dyb / (h * w))[:, :, None, None], cache)
    )


def linear(x: np.ndarray, params: LinearParams):
    features = params.weights.shape[1]
    if x.shape[-1] != features:
        raise ValueError(
            f"linear expects {features} input features, got {x.shape[-1]}"
        )
    return x @ params.weights.T + params.bias, (x, params)


def linear_backward(cache, dy: np.ndarray):
    x, params = cache
    if x.ndim == 1:
        dw = np.outer(dy, x)
        db = dy.copy()
    else:
        dw = dy.T @ x
        db = dy.sum(axis=0, dtype=np.float64).astype(params.bias.dtype)
    dx = dy @ params.weights
    return dx, dw.astype(params.weights.dtype), db


def softmax(logits: np.ndarray):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, label: int):
    """Loss -log softmax(logits)[label] and its logit cotangent."""
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} logits")
    z = (logits - logits.max()).astype(np.float64)
    logp = z - np.log(np.exp(z).sum())
    cot = np.exp(logp)
    cot[label] -= 1.0
    return float(-logp[label]), cot.astype(logits.dtype)


def softmax_cross_entropy_batch(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over a batch; cotangent already divided by batch size."""
    b = logits.shape[0]
    # non-finite logits propagate to the loss, which callers must check
    with np.errstate(invalid="ignore"):
        z = (logits - logits.max(axis=1, keepdims=True)).astype(np.float64)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    loss = float(-logp[rows, labels].mean())
    cot = np.exp(logp)
    cot[rows, labels] -= 1.0
    return loss, (cot / b).astype(logits.dtype)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptState:
    velocity: dict[str, np.ndarray]
    learning_rate: float = 0.01
    momentum: float = 0.9


def init_opt_state(params: dict[str, np.ndarray], learning_rate: float = 0.01,
                   momentum: float = 0.9) -> OptState:
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    return OptState(velocity=velocity, learning_rate=learning_rate, momentum=momentum)


def sgd_momentum_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                      state: OptState) -> None:
    """Classical momentum, in place: v <- mu*v + g; p <- p - lr*v."""
    for name, p in params.items():
        g = grads[name]
        v = state.velocity[name]
        if g.shape != p.shape or v.shape != p.shape:
            raise ValueError(
                f"sgd shape mismatch for {name}: param {p.shape}, grad {g.shape}, "
                f"velocity {v.shape}"
            )
        v *= state.momentum
        v += g
        p -= state.learning_rate * v
