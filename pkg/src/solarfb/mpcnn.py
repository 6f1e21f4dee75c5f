"""Multi-channel pulse-coupled neural network feature fusion.

Per iteration, each channel's feed H decays and receives the spatially
coupled firing of the previous step plus the stimulus; the internal
state U is the product over channels of (1 + beta_k * H_k); pixels fire
where U exceeds their dynamic threshold, which then jumps and decays.
The U field at the iteration where every pixel has fired (or at the
iteration cap) is the fused activation map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate

from .activation_maps import ActivationMap, normalize_map
from .ops import NumericError


def linking_kernel(size: int) -> np.ndarray:
    """Inverse-Euclidean-distance coupling weights with a zero center."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"linking kernel size must be odd and >= 1, got {size}")
    c = size // 2
    di = np.arange(size)[:, None] - c
    dj = np.arange(size)[None, :] - c
    dist = np.sqrt(di * di + dj * dj)
    with np.errstate(divide="ignore"):
        w = np.where(dist > 0, 1.0 / dist, 0.0)
    return w


def beta_from_fc_weights(fc_weights, scale: float) -> np.ndarray:
    """Min-max rescale the class weights into [0, scale] channel importances."""
    w = np.asarray(fc_weights, dtype=np.float64).reshape(-1)
    if w.size < 1:
        raise ValueError("need at least one channel weight")
    if scale <= 0:
        raise ValueError(f"beta scale must be positive, got {scale}")
    if not np.all(np.isfinite(w)):
        raise ValueError("channel weights must be finite")
    lo, hi = w.min(), w.max()
    if hi == lo:
        return np.full(w.size, scale / 2.0)
    return scale * (w - lo) / (hi - lo)


@dataclass
class MPcnnConfig:
    """Fusion constants. The iteration dynamics are fixed; these are knobs."""
    alpha_h: float = 0.3
    alpha_t: float = 0.4
    v_h: float = 0.2
    v_t: float = 20.0
    t_init: float = 1.0
    beta_scale: float = 0.2
    linking_size: int = 15
    max_iters: int = 50


@dataclass
class MPcnnParams:
    alpha_h: float
    alpha_t: float
    v_h: float
    v_t: float
    beta: np.ndarray  # (K,)
    linking: np.ndarray  # (s, s), odd s, zero center
    t_init: float = 1.0
    max_iters: int = 50

    def __post_init__(self):
        if self.v_t <= 0:
            raise ValueError(f"V_T must be positive, got {self.v_t}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if not np.all(np.isfinite(self.beta)):
            raise ValueError("beta must be finite")


def params_from_config(config: MPcnnConfig, fc_weights) -> MPcnnParams:
    return MPcnnParams(
        alpha_h=config.alpha_h,
        alpha_t=config.alpha_t,
        v_h=config.v_h,
        v_t=config.v_t,
        beta=beta_from_fc_weights(fc_weights, config.beta_scale),
        linking=linking_kernel(config.linking_size),
        t_init=config.t_init,
        max_iters=config.max_iters,
    )


@dataclass
class MPcnnState:
    h: np.ndarray      # (K, H, W) feed values
    u: np.ndarray      # (H, W) internal state
    y: np.ndarray      # (H, W) binary firing map
    t: np.ndarray      # (H, W) dynamic thresholds
    fired: np.ndarray  # (H, W) cumulative firing mask
    n: int = 0


def init_state(stimulus: np.ndarray, params: MPcnnParams) -> MPcnnState:
    k, h, w = stimulus.shape
    if k != params.beta.size:
        raise ValueError(
            f"stimulus has {k} channels but beta has {params.beta.size}"
        )
    return MPcnnState(
        h=stimulus.astype(np.float64).copy(),
        u=np.ones((h, w)),
        y=np.zeros((h, w)),
        t=np.full((h, w), params.t_init, dtype=np.float64),
        fired=np.zeros((h, w), dtype=bool),
        n=0,
    )


def mpcnn_step(state: MPcnnState, stimulus: np.ndarray,
               params: MPcnnParams) -> MPcnnState:
    """One synchronous iteration of the firing dynamics."""
    if state.h.shape != stimulus.shape:
        raise ValueError(
            f"state feed shape {state.h.shape} != stimulus shape {stimulus.shape}"
        )
    # linking term: previous firing convolved with W, zero padded at borders
    link = correlate(state.y, params.linking, mode="constant", cval=0.0)
    h = np.exp(-params.alpha_h) * state.h + params.v_h * link + stimulus
    # overflow is detected below and raised as NumericError
    with np.errstate(over="ignore"):
        u = np.prod(1.0 + params.beta[:, None, None] * h, axis=0)
    if not np.all(np.isfinite(u)):
        i, j = np.argwhere(~np.isfinite(u))[0]
        raise NumericError(
            f"non-finite internal state at iteration {state.n + 1}, pixel ({i},{j})"
        )
    y = (u > state.t).astype(np.float64)
    t = np.exp(-params.alpha_t) * state.t + params.v_t * y
    return MPcnnState(h=h, u=u, y=y, t=t, fired=state.fired | (y > 0), n=state.n + 1)


def mpcnn_fuse(channels: np.ndarray, fc_weights,
               config: MPcnnConfig | None = None) -> ActivationMap:
    """Fuse a (K, H, W) feature stack into one activation map.

    The stimulus is the jointly min-max normalized stack (one scale for
    all channels, so relative channel magnitudes survive for beta to
    weight). Iterates until every pixel has fired or ``max_iters`` is
    reached; the result is the min-max normalized final U. The map's
    metadata records the iteration count and whether firing completed.
    """
    channels = np.asarray(channels)
    if channels.ndim != 3 or channels.shape[0] < 1:
        raise ValueError(f"expected a (K,H,W) stack, got shape {channels.shape}")
    if not np.all(np.isfinite(channels)):
        raise ValueError("feature channels must be finite")
    if config is None:
        config = MPcnnConfig()
    params = params_from_config(config, fc_weights)
    lo, hi = channels.min(), channels.max()
    if hi == lo:
        stimulus = np.zeros(channels.shape, dtype=np.float64)
    else:
        stimulus = (channels.astype(np.float64) - lo) / (hi - lo)
    state = init_state(stimulus, params)
    while state.n < params.max_iters and not state.fired.all():
        state = mpcnn_step(state, stimulus, params)
    out = normalize_map(state.u)
    out.meta["iterations"] = state.n
    out.meta["fully_fired"] = bool(state.fired.all())
    return out
