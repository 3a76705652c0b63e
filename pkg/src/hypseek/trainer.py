"""Assay-level batching, Adam, seeded determinism and run telemetry."""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ._binio import atomic_write
from .data import Assay, DataError, FeatureStore, validate_references
from .losses import TERM_NAMES, BucketConfig, LossWeights, quartile_thresholds
from .model import (Batch, GradientBundle, ModelParams, ProjectionHead, grad_total_loss,
                    init_params)
from .seeding import derive_rng

__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainResult",
    "NonFiniteGradientError",
    "adam_step",
    "initial_state",
    "train",
    "training_thresholds",
    "save_train_state",
    "load_train_state",
    "LOG_COLUMNS",
]

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "batch", "total") + TERM_NAMES


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 50
    batch_assays: int = 8
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    buckets: BucketConfig = field(default_factory=BucketConfig)
    grad_clip: float = 10.0
    schedule: str = "constant"
    embed_dim: int = 32
    hidden_dim: Optional[int] = None
    init_scale: float = 1.0
    kappa: float = 1.0
    tau: float = 0.07
    learn_tau: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if not self.adam_eps > 0:
            raise ValueError("adam_eps must be positive")
        if self.epochs < 1 or self.batch_assays < 1 or self.embed_dim < 1:
            raise ValueError("epochs, batch_assays and embed_dim must be >= 1")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError("schedule must be 'constant' or 'cosine'")
        if not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive")


@dataclass
class TrainState:
    params: ModelParams
    m: dict
    v: dict
    step: int = 0
    epoch: int = 0
    rng_state: Optional[dict] = None


@dataclass
class TrainResult:
    params: ModelParams
    epoch_log: list
    state: TrainState
    thresholds: tuple
    clip_events: int = 0


def adam_step(state: TrainState, grads: GradientBundle, config: TrainConfig,
              lr: Optional[float] = None) -> TrainState:
    """One bias-corrected Adam update; returns a new state."""
    if not grads.all_finite():
        bad = [k for k, g in grads.arrays.items() if not np.all(np.isfinite(g))]
        raise NonFiniteGradientError(f"non-finite gradient for {', '.join(bad)}")
    lr = config.learning_rate if lr is None else lr
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    t = state.step + 1
    arrays = state.params.named_arrays()
    new_p, new_m, new_v = {}, {}, {}
    for name, p in arrays.items():
        g = grads.arrays[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return TrainState(state.params.with_arrays(new_p), new_m, new_v, t, state.epoch,
                      state.rng_state)


def initial_state(params: ModelParams, seed: int) -> TrainState:
    zeros = {k: np.zeros_like(a) for k, a in params.named_arrays().items()}
    rng = derive_rng(seed, "trainer")
    return TrainState(params, zeros, {k: z.copy() for k, z in zeros.items()}, 0, 0,
                      rng.bit_generator.state)


def training_thresholds(assays: Sequence[Assay], config: TrainConfig) -> tuple:
    """Configured thresholds, or quartiles of ``-affinity`` over the training set."""
    if config.buckets.thresholds is not None:
        return config.buckets.thresholds
    values = [-lig.affinity for a in assays for lig in a.ligands if lig.affinity is not None]
    if not values:
        return (0.0,)
    return quartile_thresholds(values)


def _count_affinity_ties(assays) -> int:
    ties = 0
    for a in assays:
        aff = [lig.affinity for lig in a.ligands if lig.affinity is not None]
        ties += len(aff) - len(set(aff))
    return ties


def _lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    if config.schedule == "cosine":
        return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps)
                                                            / max(total_steps, 1)))
    return config.learning_rate


def _fmt(x: float) -> str:
    return repr(float(x))


def train(assays: Sequence[Assay], store: FeatureStore, config: TrainConfig,
          log_path=None, state: Optional[TrainState] = None,
          stop_after_epoch: Optional[int] = None) -> TrainResult:
    """Train the three heads.

    Each epoch shuffles the assays with the seeded generator, samples one
    candidate pocket per assay, and walks the shuffled list in chunks of
    ``batch_assays``.  Every ligand listed by a co-batched assay is a
    candidate column for every query in the batch.

    ``state`` resumes a previous run; ``stop_after_epoch`` ends early (for
    checkpointing mid-run).  If ``log_path`` is given, one tab-separated
    row per batch plus one ``mean`` row per epoch is appended to it.
    """
    assays = list(assays)
    if not assays:
        raise DataError("no assays to train on")
    if all(len(a.ligands) == 0 for a in assays):
        raise DataError("no ligands in any assay")
    validate_references(assays, store)
    thresholds = training_thresholds(assays, config)
    buckets = replace(config.buckets, thresholds=thresholds)
    ties = _count_affinity_ties(assays)
    if ties:
        log.info("%d tied affinities; listwise order falls back to input order", ties)

    if state is None:
        params = init_params(store.dim, config.embed_dim, config.seed, config.hidden_dim,
                             config.kappa, config.tau, config.learn_tau, config.init_scale)
        state = initial_state(params, config.seed)
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state

    n_batches = math.ceil(len(assays) / config.batch_assays)
    total_steps = n_batches * config.epochs
    last_epoch = config.epochs if stop_after_epoch is None else min(stop_after_epoch, config.epochs)
    log_fh = None
    if log_path is not None:
        log_path = Path(log_path)
        fresh = not log_path.exists() or log_path.stat().st_size == 0
        log_fh = open(log_path, "a", encoding="utf-8")
        if fresh:
            log_fh.write("\t".join(LOG_COLUMNS) + "\n")

    epoch_log, clip_events = [], 0
    try:
        for epoch in range(state.epoch, last_epoch):
            order = rng.permutation(len(assays))
            picks = [int(rng.integers(len(a.pocket_feature_ids))) for a in assays]
            sums = dict.fromkeys(("total",) + TERM_NAMES, 0.0)
            for b in range(n_batches):
                chosen = order[b * config.batch_assays:(b + 1) * config.batch_assays]
                batch = Batch.from_assays([assays[i] for i in chosen], store, thresholds,
                                          [picks[i] for i in chosen])
                loss, grads, breakdown = grad_total_loss(batch, state.params, config.weights,
                                                         buckets)
                norm = grads.global_norm()
                if norm > config.grad_clip:
                    clip_events += 1
                    log.info("epoch %d batch %d: gradient norm %.4g clipped to %.4g",
                             epoch, b, norm, config.grad_clip)
                    grads = grads.scaled(config.grad_clip / norm)
                state = adam_step(state, grads, config, _lr_at(config, state.step, total_steps))
                sums["total"] += loss
                for k in TERM_NAMES:
                    sums[k] += breakdown[k]
                if log_fh is not None:
                    log_fh.write("\t".join([str(epoch), str(b), _fmt(loss)]
                                           + [_fmt(breakdown[k]) for k in TERM_NAMES]) + "\n")
            means = {k: v / n_batches for k, v in sums.items()}
            if not all(np.isfinite(v) for v in means.values()):
                bad = next(k for k, v in means.items() if not np.isfinite(v))
                raise FloatingPointError(f"epoch {epoch}: mean {bad} is not finite")
            epoch_log.append({"epoch": epoch, **means})
            if log_fh is not None:
                log_fh.write("\t".join([str(epoch), "mean", _fmt(means["total"])]
                                       + [_fmt(means[k]) for k in TERM_NAMES]) + "\n")
            state.epoch = epoch + 1
            state.rng_state = rng.bit_generator.state
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(state.params, epoch_log, state, thresholds, clip_events)


# --------------------------------------------------------------------------
# resumable state


def save_train_state(path, state: TrainState) -> None:
    """Parameters, Adam moments, counters and RNG state in one ``.npz`` file."""
    arrays = {}
    for name, a in state.params.named_arrays().items():
        arrays[f"param/{name}"] = a
        arrays[f"m/{name}"] = state.m[name]
        arrays[f"v/{name}"] = state.v[name]
    p = state.params
    meta = {
        "step": state.step, "epoch": state.epoch, "rng_state": state.rng_state,
        "kappa": p.kappa, "tau": p.tau, "learn_tau": p.learn_tau,
        "layers": {h: len(p.head(h).layers) for h in ("pocket", "ligand", "sequence")},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write(path, buf.getvalue())


def load_train_state(path) -> TrainState:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode("utf-8"))
        get = {k: z[k].copy() for k in z.files if k != "meta"}
    heads = []
    for h in ("pocket", "ligand", "sequence"):
        heads.append(ProjectionHead(tuple(
            (get[f"param/{h}.{i}.weight"], get[f"param/{h}.{i}.bias"])
            for i in range(meta["layers"][h]))))
    params = ModelParams(*heads, kappa=meta["kappa"], tau=meta["tau"],
                         learn_tau=meta["learn_tau"])
    names = params.named_arrays()
    if meta["learn_tau"]:
        params = params.with_arrays({**names, "log_tau": get["param/log_tau"]})
    m = {k: get[f"m/{k}"] for k in names}
    v = {k: get[f"v/{k}"] for k in names}
    return TrainState(params, m, v, meta["step"], meta["epoch"], meta["rng_state"])
