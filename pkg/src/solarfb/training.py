"""Balanced mini-batch training loop with seeded reproducibility.

Every mini-batch holds exactly 8 positives and 120 negatives (drawn with
replacement only when a class pool is smaller than its draw), optionally
dihedral-augmented positives, and one SGD-with-momentum step on the mean
cross-entropy. Given (seed, config, dataset) the final parameters are
bit-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import models
from .evaluation import threshold_sweep
from .models import ModelParams
from .ops import NumericError, init_opt_state, sgd_momentum_step, softmax, \
    softmax_cross_entropy_batch


@dataclass
class TrainConfig:
    iterations: int
    batch_size: int = 128
    positives_per_batch: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.9
    dropout_rate: float = 0.5
    seed: int = 0
    augment: bool = False
    eval_every: int = 0  # 0 disables periodic validation

    def __post_init__(self):
        if not 0 < self.positives_per_batch < self.batch_size:
            raise ValueError("positives_per_batch must be in (0, batch_size)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")


@dataclass
class TrainLog:
    config: dict
    seed: int
    losses: list[float] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0

    def loss_digest(self) -> str:
        blob = np.asarray(self.losses, dtype="<f4").tobytes()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_jsonl(self, path) -> None:
        """Line-delimited records: one config header, then per-step losses."""
        with open(path, "w") as fh:
            fh.write(json.dumps({"config": self.config, "seed": self.seed,
                                 "wall_clock": self.wall_clock}) + "\n")
            evals = {e["step"]: e for e in self.evals}
            for i, loss in enumerate(self.losses, start=1):
                rec = {"step": i, "loss": loss}
                if i in evals:
                    rec.update({k: v for k, v in evals[i].items() if k != "step"})
                fh.write(json.dumps(rec) + "\n")


def balanced_minibatch(positives, negatives, rng: np.random.Generator,
                       n_pos: int = 8, n_neg: int = 120):
    """Shuffled indices+labels with exactly n_pos positives and n_neg negatives."""
    positives = np.asarray(positives)
    negatives = np.asarray(negatives)
    if positives.size == 0 or negatives.size == 0:
        raise ValueError("both class pools must be nonempty")
    pos = rng.choice(positives, size=n_pos, replace=positives.size < n_pos)
    neg = rng.choice(negatives, size=n_neg, replace=negatives.size < n_neg)
    idx = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(n_pos, dtype=np.int64),
                             np.zeros(n_neg, dtype=np.int64)])
    order = rng.permutation(idx.size)
    return idx[order], labels[order]


def augment_positive(patch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One of the 8 dihedral transforms, identical across channels."""
    k = int(rng.integers(0, 8))
    out = np.rot90(patch, k % 4, axes=(1, 2))
    if k >= 4:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def positive_probs(params: ModelParams, patches, batch_size: int = 512) -> np.ndarray:
    """Eval-mode P(positive) over a patch array, in fixed order."""
    out = []
    for start in range(0, len(patches), batch_size):
        chunk = np.asarray(patches[start:start + batch_size], dtype=np.float32)
        res = models.forward(params, chunk, mode="eval")
        out.append(softmax(res.logits.astype(np.float64))[:, models.POSITIVE])
    return np.concatenate(out) if out else np.zeros(0)


def validate_iou(params: ModelParams, dataset):
    """Best threshold-swept IoU on a labeled dataset."""
    probs = positive_probs(params, dataset.patches)
    sweep = threshold_sweep(probs, dataset.labels)
    return sweep.best_iou, sweep.best_threshold


def train(params: ModelParams, dataset, config: TrainConfig, val_dataset=None):
    """Train in place; returns (selected params, log).

    With periodic validation enabled the returned parameters are the
    checkpoint with the best validation IoU, otherwise the final state.
    """
    start = time.time()
    rng = np.random.default_rng(config.seed)
    trainable = params.trainable()
    state = init_opt_state(trainable, config.learning_rate, config.momentum)
    labels_all = np.asarray(dataset.labels)
    pos_pool = np.flatnonzero(labels_all == 1)
    neg_pool = np.flatnonzero(labels_all == 0)
    n_neg = config.batch_size - config.positives_per_batch
    log = TrainLog(config=asdict(config), seed=config.seed)
    best = None  # (iou, step, params copy, threshold)

    for step in range(1, config.iterations + 1):
        idx, labels = balanced_minibatch(pos_pool, neg_pool, rng,
                                         config.positives_per_batch, n_neg)
        batch = np.asarray(dataset.patches[idx], dtype=np.float32)
        if config.augment:
            for i in np.flatnonzero(labels == 1):
                batch[i] = augment_positive(batch[i], rng)
        res = models.forward(params, batch, mode="train", rng=rng,
                             dropout_rate=config.dropout_rate)
        loss, dlogits = softmax_cross_entropy_batch(res.logits, labels)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite training loss at step {step}")
        grads, _, _ = models.backward(params, res, dlogits)
        sgd_momentum_step(trainable, grads, state)
        log.losses.append(loss)
        if (config.eval_every and val_dataset is not None
                and step % config.eval_every == 0):
            iou, thr = validate_iou(params, val_dataset)
            log.evals.append({"step": step, "val_iou": iou, "val_threshold": thr})
            if best is None or iou > best[0]:
                best = (iou, step, params.copy(), thr)
    log.wall_clock = time.time() - start
    if best is not None:
        return best[2], log
    return params, log
