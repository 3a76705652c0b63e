"""Projection heads, the embedding pipeline, and exact gradients of the objective.

Features are mapped by an affine head (optionally with one tanh hidden
layer) to a tangent vector at the origin and lifted with the exponential
map.  ``batch_loss`` evaluates the objective with the numpy reference
functions in :mod:`hypseek.losses`; ``grad_total_loss`` rebuilds the same
objective on a :class:`~hypseek.autodiff.Tape` and returns reverse-mode
gradients.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ._binio import CorruptFileError, Reader, atomic_write, split_crc, with_crc
from .autodiff import Tape, Var
from .data import Assay, FeatureStore
from .geometry import (DEGENERATE_NORM, NEAR_ACOSH, GeometryError, LorentzPoint, exp_map_origin)
from .losses import (BucketConfig, LogitMatrix, LossWeights, NonFiniteLossError, TERM_NAMES,
                     angular_margin_reg, assign_buckets, cone_terms, contrastive_loss,
                     heterogeneity_reg, heterogeneity_weights, listwise_rank_loss, rank_decay,
                     total_loss)
from .seeding import derive_rng

__all__ = [
    "ProjectionHead",
    "ModelParams",
    "GradientBundle",
    "Batch",
    "EmbeddingRangeError",
    "CheckpointError",
    "init_params",
    "embed",
    "loss_terms",
    "batch_loss",
    "grad_total_loss",
    "finite_diff_check",
    "max_relative_error",
    "checkpoint_bytes",
    "save_checkpoint",
    "load_checkpoint",
    "MAX_TANGENT_NORM",
]

HEADS = ("pocket", "ligand", "sequence")
MAX_TANGENT_NORM = 20.0
CHECKPOINT_MAGIC = b"HYPSK1"
CHECKPOINT_VERSION = 1


class EmbeddingRangeError(ValueError):
    """A tangent vector exceeded ``MAX_TANGENT_NORM``; exp would lose all precision."""


class CheckpointError(CorruptFileError):
    pass


@dataclass(frozen=True)
class ProjectionHead:
    """Affine map ``W x + b``, or ``W2 tanh(W1 x + b1) + b2`` with a hidden layer."""

    layers: tuple

    def __post_init__(self):
        layers = tuple((np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64))
                       for w, b in self.layers)
        if not layers:
            raise ValueError("a head needs at least one layer")
        for i, (w, b) in enumerate(layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight must be (out, in) and bias (out,)")
            if i and w.shape[1] != layers[i - 1][0].shape[0]:
                raise ValueError(f"layer {i}: input size does not match previous layer")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")
        object.__setattr__(self, "layers", layers)

    @property
    def weight(self):
        return self.layers[-1][0]

    @property
    def bias(self):
        return self.layers[-1][1]

    @property
    def n_in(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def n_out(self) -> int:
        return self.layers[-1][0].shape[0]

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"feature length {x.shape[-1]} != head input size {self.n_in}")
        for i, (w, b) in enumerate(self.layers):
            if i:
                x = np.tanh(x)
            x = x @ w.T + b
        return x


@dataclass(frozen=True)
class ModelParams:
    pocket: ProjectionHead
    ligand: ProjectionHead
    sequence: ProjectionHead
    kappa: float = 1.0
    tau: float = 0.07
    learn_tau: bool = False

    def __post_init__(self):
        outs = {h.n_out for h in (self.pocket, self.ligand, self.sequence)}
        if len(outs) != 1:
            raise ValueError("all heads must share the embedding dimension")
        if not self.kappa > 0 or not self.tau > 0:
            raise ValueError("kappa and tau must be positive")

    @property
    def embed_dim(self) -> int:
        return self.ligand.n_out

    def head(self, name: str) -> ProjectionHead:
        return getattr(self, name)

    def named_arrays(self) -> dict:
        """Trainable arrays in a fixed order (the checkpoint order)."""
        out = {}
        for name in HEADS:
            for i, (w, b) in enumerate(self.head(name).layers):
                out[f"{name}.{i}.weight"] = w
                out[f"{name}.{i}.bias"] = b
        if self.learn_tau:
            out["log_tau"] = np.array(np.log(self.tau))
        return out

    def with_arrays(self, arrays: dict) -> "ModelParams":
        heads = {}
        for name in HEADS:
            n = len(self.head(name).layers)
            heads[name] = ProjectionHead(tuple(
                (arrays[f"{name}.{i}.weight"], arrays[f"{name}.{i}.bias"]) for i in range(n)))
        tau = float(np.exp(arrays["log_tau"])) if self.learn_tau else self.tau
        return ModelParams(heads["pocket"], heads["ligand"], heads["sequence"],
                           self.kappa, tau, self.learn_tau)


@dataclass
class GradientBundle:
    """Gradients keyed like :meth:`ModelParams.named_arrays`."""

    arrays: dict

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.arrays.values())))

    def scaled(self, factor: float) -> "GradientBundle":
        return GradientBundle({k: g * factor for k, g in self.arrays.items()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.arrays.values())


def init_params(n_in: int, embed_dim: int = 32, seed: int = 0, hidden_dim: Optional[int] = None,
                kappa: float = 1.0, tau: float = 0.07, learn_tau: bool = False,
                scale: float = 1.0) -> ModelParams:
    """Random heads with weights ~ N(0, scale^2 / fan_in) and zero biases."""
    rng = derive_rng(seed, "init")

    def layer(n_out, fan_in):
        return rng.normal(0.0, scale / np.sqrt(fan_in), size=(n_out, fan_in)), np.zeros(n_out)

    heads = []
    for _ in HEADS:
        if hidden_dim:
            heads.append(ProjectionHead((layer(hidden_dim, n_in), layer(embed_dim, hidden_dim))))
        else:
            heads.append(ProjectionHead((layer(embed_dim, n_in),)))
    return ModelParams(*heads, kappa=kappa, tau=tau, learn_tau=learn_tau)


def _check_range(v: np.ndarray) -> None:
    norms = np.linalg.norm(v, axis=-1)
    if np.any(norms > MAX_TANGENT_NORM):
        raise EmbeddingRangeError(
            f"tangent norm {float(np.max(norms)):.3g} exceeds {MAX_TANGENT_NORM}")


def embed(features, head: ProjectionHead, kappa: float = 1.0) -> LorentzPoint:
    """Head output read as a tangent vector at the origin, lifted by the exp map."""
    v = head.apply(features)
    _check_range(v)
    return exp_map_origin(v, kappa)


# --------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    """Flattened view of a group of assays.

    Ligand rows are concatenated across assays; ``lig_assay[j]`` is the row
    of ``pocket_x`` that ligand ``j`` belongs to.  Missing affinities are NaN
    and get bucket -1.
    """

    pocket_x: np.ndarray
    lig_x: np.ndarray
    lig_assay: np.ndarray
    active: np.ndarray
    affinity: np.ndarray
    bucket: np.ndarray
    seq_x: Optional[np.ndarray] = None
    assay_ids: tuple = ()

    def __post_init__(self):
        self.lig_assay = np.asarray(self.lig_assay, dtype=np.int64)
        self.active = np.asarray(self.active, dtype=bool)
        self.affinity = np.asarray(self.affinity, dtype=np.float64)
        self.bucket = np.asarray(self.bucket, dtype=np.int64)
        if len(self.pocket_x) == 0 or len(self.lig_x) == 0:
            raise ValueError("a batch needs at least one assay and one ligand")
        if not (np.all(np.isfinite(self.pocket_x)) and np.all(np.isfinite(self.lig_x))):
            raise ValueError("batch features must be finite")
        n_assays = len(self.pocket_x)
        self.positives = [np.flatnonzero((self.lig_assay == i) & self.active)
                          for i in range(n_assays)]
        self.rank_orders = []
        self.het_sets = []
        for i in range(n_assays):
            idx = np.flatnonzero((self.lig_assay == i) & np.isfinite(self.affinity))
            self.rank_orders.append(idx[np.argsort(-self.affinity[idx], kind="stable")])
            self.het_sets.append(idx[self.active[idx]])
        self.cone_pairs = np.flatnonzero(self.bucket >= 0)

    @property
    def n_assays(self) -> int:
        return len(self.pocket_x)

    def permuted(self, order: Sequence[int]) -> "Batch":
        """Same batch with assays reordered (ligand blocks follow their assay)."""
        order = np.asarray(order)
        inverse = np.argsort(order)
        lig_order = np.concatenate([np.flatnonzero(self.lig_assay == i) for i in order])
        return Batch(self.pocket_x[order], self.lig_x[lig_order],
                     inverse[self.lig_assay[lig_order]], self.active[lig_order],
                     self.affinity[lig_order], self.bucket[lig_order],
                     None if self.seq_x is None else self.seq_x[order],
                     tuple(self.assay_ids[i] for i in order) if self.assay_ids else ())

    @classmethod
    def from_assays(cls, assays: Sequence[Assay], store: FeatureStore, thresholds,
                    pocket_choice: Optional[Sequence[int]] = None) -> "Batch":
        """Gather features for ``assays``.

        ``thresholds`` bucket the oriented value ``-affinity`` (so bucket 0
        holds the strongest binders).  ``pocket_choice[i]`` picks which of
        assay ``i``'s candidate pockets to use; default is the first.
        """
        pocket_ids, seq_ids, lig_ids, lig_assay, active, aff = [], [], [], [], [], []
        for i, a in enumerate(assays):
            pick = 0 if pocket_choice is None else int(pocket_choice[i])
            pocket_ids.append(a.pocket_feature_ids[pick])
            seq_ids.append(a.sequence_feature_id)
            for lig in a.ligands:
                lig_ids.append(lig.feature_id)
                lig_assay.append(i)
                active.append(bool(lig.active))
                aff.append(np.nan if lig.affinity is None else lig.affinity)
        aff = np.asarray(aff, dtype=np.float64)
        bucket = np.full(aff.shape, -1, dtype=np.int64)
        known = np.isfinite(aff)
        if thresholds is not None and np.any(known):
            bucket[known] = assign_buckets(-aff[known], thresholds)
        seq_x = None if any(s is None for s in seq_ids) else store.rows(seq_ids)
        return cls(store.rows(pocket_ids), store.rows(lig_ids), np.asarray(lig_assay),
                   np.asarray(active), aff, bucket, seq_x,
                   tuple(a.assay_id for a in assays))


# --------------------------------------------------------------------------
# numpy reference objective


def loss_terms(batch: Batch, params: ModelParams, weights: LossWeights,
               buckets: BucketConfig) -> dict:
    """Raw value of every term, computed with the numpy reference functions."""
    k = params.kappa
    pockets = embed(batch.pocket_x, params.pocket, k)
    ligands = embed(batch.lig_x, params.ligand, k)

    def tower(query: LorentzPoint):
        logits = LogitMatrix.from_spatial(query.spatial, ligands.spatial, params.tau)
        cont = contrastive_loss(logits, batch.positives)
        rank = sum(listwise_rank_loss(logits.values[i, order])
                   for i, order in enumerate(batch.rank_orders) if order.size)
        return logits, cont, float(rank)

    logits, cont_poc, rank_poc = tower(pockets)
    terms = {"cont_poc": cont_poc, "rank_poc": rank_poc, "cont_seq": None, "rank_seq": None}
    if batch.seq_x is not None:
        _, terms["cont_seq"], terms["rank_seq"] = tower(embed(batch.seq_x, params.sequence, k))

    pairs = batch.cone_pairs
    pair_args = (pockets, ligands[pairs], batch.lig_assay[pairs], batch.bucket[pairs], buckets)
    cone = cone_terms(*pair_args, weights, k)
    terms["cone_rad"], terms["cone_ang"] = cone.radial, cone.angular
    terms["r_ang"] = angular_margin_reg(*pair_args, weights.margin, k)
    terms["r_het"] = heterogeneity_reg(
        [logits.values[i, idx] for i, idx in enumerate(batch.het_sets)],
        [batch.affinity[idx] for idx in batch.het_sets],
        weights.affinity_threshold)
    return terms


def batch_loss(batch: Batch, params: ModelParams, weights: LossWeights,
               buckets: BucketConfig):
    """``(total, breakdown)`` from the numpy reference path."""
    return total_loss(loss_terms(batch, params, weights, buckets), weights)


# --------------------------------------------------------------------------
# differentiable objective


def _tape_head(tape: Tape, x: np.ndarray, layer_vars) -> Var:
    h = x
    for i, (w, b) in enumerate(layer_vars):
        if i:
            h = tape.tanh(h)
        h = tape.matmul(h, w.T) + b
    return h


def _tape_embed(tape: Tape, v: Var, kappa: float):
    _check_range(v.value)
    s = tape.sum(tape.square(v), axis=1) * kappa
    factor = tape.sinhc_of_sqrt(s)
    spatial = v * tape.reshape(factor, (-1, 1))
    time = tape.sqrt(tape.sum(tape.square(spatial), axis=1) + 1.0 / kappa)
    return time, spatial


def _tape_log_softmax(tape: Tape, s: Var, axis: int) -> Var:
    lse = tape.logsumexp(s, axis=axis)
    shape = (-1, 1) if axis == 1 else (1, -1)
    return s - tape.reshape(lse, shape)


def _tape_tower(tape: Tape, q_spatial: Var, m_spatial: Var, inv_tau, batch: Batch):
    logits = tape.matmul(q_spatial, m_spatial.T) * inv_tau
    mask = np.zeros(logits.shape)
    for i, pos in enumerate(batch.positives):
        if pos.size:
            mask[i, pos] = 1.0 / pos.size
    row = tape.sum(tape.mul(_tape_log_softmax(tape, logits, 1), mask))
    col = tape.sum(tape.mul(_tape_log_softmax(tape, logits, 0), mask))
    cont = (row + col) * -0.5
    rank = None
    for i, order in enumerate(batch.rank_orders):
        if order.size == 0:
            continue
        s = logits[i, order]
        b = order.size
        suffix_mask = np.where(np.arange(b)[None, :] >= np.arange(b)[:, None], 0.0, -np.inf)
        lse = tape.logsumexp(tape.reshape(s, (1, b)) + suffix_mask, axis=1)
        term = tape.sum(tape.mul(s - lse, rank_decay(b))) * -1.0
        rank = term if rank is None else rank + term
    return logits, cont, rank


def _tape_objective(tape: Tape, batch: Batch, params: ModelParams, weights: LossWeights,
                    buckets: BucketConfig, leaves: dict):
    k = params.kappa
    sk = np.sqrt(k)

    def head_vars(name):
        n = len(params.head(name).layers)
        return [(leaves[f"{name}.{i}.weight"], leaves[f"{name}.{i}.bias"]) for i in range(n)]

    inv_tau = tape.exp(leaves["log_tau"] * -1.0) if params.learn_tau else 1.0 / params.tau
    p_time, p_sp = _tape_embed(tape, _tape_head(tape, batch.pocket_x, head_vars("pocket")), k)
    m_time, m_sp = _tape_embed(tape, _tape_head(tape, batch.lig_x, head_vars("ligand")), k)

    terms = {}
    logits, terms["cont_poc"], terms["rank_poc"] = _tape_tower(tape, p_sp, m_sp, inv_tau, batch)
    if batch.seq_x is not None:
        _, s_sp = _tape_embed(tape, _tape_head(tape, batch.seq_x, head_vars("sequence")), k)
        _, terms["cont_seq"], terms["rank_seq"] = _tape_tower(tape, s_sp, m_sp, inv_tau, batch)

    pairs = batch.cone_pairs
    if pairs.size:
        owner = batch.lig_assay[pairs]
        pt, pp = p_time[owner], p_sp[owner]
        mt, mp = m_time[pairs], m_sp[pairs]
        p_norm = tape.sqrt(tape.sum(tape.square(pp), axis=1))
        if np.any(p_norm.value <= DEGENERATE_NORM):
            raise GeometryError("exterior angle is undefined for a pocket at the origin")
        inner = tape.sum(pp * mp, axis=1) - pt * mt
        z = inner * -k
        chord2 = (tape.sum(tape.square(pp - mp), axis=1) - tape.square(pt - mt)) * k
        near = tape.asinh(tape.sqrt(tape.clip_min(chord2, 1e-300)) * 0.5) * 2.0
        dist = tape.where(z.value < NEAR_ACOSH, near, tape.acosh(z)) * (1.0 / sk)
        if np.any(dist.value <= DEGENERATE_NORM):
            raise GeometryError("exterior angle is undefined for coincident points")
        c = inner * k
        num = mt + c * pt
        den = p_norm * tape.sqrt(tape.clip_min(tape.square(c) - 1.0, 0.0))
        phi = tape.arccos(num / den)
        omega = tape.arcsin_capped((2.0 * buckets.aperture_r0 / sk) / p_norm)
        root_n = np.sqrt(pairs.size)
        b = batch.bucket[pairs]
        slack = phi - omega * buckets.angle_scales(b)
        terms["cone_rad"] = tape.sum(tape.relu(dist - buckets.radius_caps(b))) * (1.0 / root_n)
        terms["cone_ang"] = tape.sum(tape.relu(slack)) * (1.0 / root_n)
        terms["r_ang"] = tape.sum(tape.relu(slack + weights.margin)) * (1.0 / root_n)

    het, n_het = None, 0
    for i, idx in enumerate(batch.het_sets):
        if idx.size == 0:
            continue
        n_het += 1
        aff = batch.affinity[idx]
        chosen = aff < weights.affinity_threshold
        if not np.any(chosen):
            continue
        lsm = _tape_log_softmax(tape, tape.reshape(logits[i, idx], (1, -1)), 1)
        coef = np.where(chosen, heterogeneity_weights(aff), 0.0)[None, :]
        term = tape.sum(tape.mul(lsm, coef)) * -1.0
        het = term if het is None else het + term
    if het is not None:
        terms["r_het"] = het * (1.0 / max(n_het, 1))
    return terms


def grad_total_loss(batch: Batch, params: ModelParams, weights: LossWeights,
                    buckets: BucketConfig):
    """Objective value, reverse-mode gradients and raw-term breakdown.

    Returns ``(loss, GradientBundle, breakdown)``.  Raises
    ``NonFiniteLossError`` naming the first non-finite term.
    """
    tape = Tape()
    names = list(params.named_arrays())
    leaves = {n: tape.variable(a) for n, a in params.named_arrays().items()}
    terms = _tape_objective(tape, batch, params, weights, buckets, leaves)
    coef = weights.term_coefficients()
    breakdown, total = {}, None
    for name in TERM_NAMES:
        var = terms.get(name)
        value = 0.0 if var is None else float(var.value)
        if not np.isfinite(value):
            raise NonFiniteLossError(name, value)
        breakdown[name] = value
        if var is not None and coef[name] != 0.0:
            scaled = var * coef[name]
            total = scaled if total is None else total + scaled
    if total is None:
        zeros = {n: np.zeros_like(a) for n, a in params.named_arrays().items()}
        return 0.0, GradientBundle(zeros), breakdown
    grads = tape.gradient(total, [leaves[n] for n in names])
    bundle = GradientBundle(dict(zip(names, grads)))
    for name, g in bundle.arrays.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteLossError(f"gradient of {name}")
    return float(total.value), bundle, breakdown


# --------------------------------------------------------------------------
# finite differences


def max_relative_error(f: Callable[[dict], float], arrays: dict, grads: dict,
                       h: float = 1e-5) -> float:
    """Worst central-difference disagreement over every entry of ``arrays``.

    Per entry the error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError("step h must lie in [1e-6, 1e-3]")
    worst = 0.0
    work = {k: np.array(v, dtype=np.float64, order="C", copy=True) for k, v in arrays.items()}
    for name, arr in work.items():
        flat = arr.reshape(-1)
        g = np.asarray(grads[name], dtype=np.float64).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = f(work)
            flat[j] = orig - h
            down = f(work)
            flat[j] = orig
            numeric = (up - down) / (2.0 * h)
            denom = max(abs(g[j]), abs(numeric), 1e-8)
            worst = max(worst, abs(g[j] - numeric) / denom)
    return worst


def finite_diff_check(batch: Batch, params: ModelParams, weights: LossWeights,
                      h: float = 1e-5, buckets: BucketConfig = None,
                      grads: Optional[GradientBundle] = None) -> float:
    """Compare tape gradients with central differences of the numpy objective.

    ``grads`` overrides the analytic gradients (used for negative controls).
    """
    if buckets is None:
        buckets = BucketConfig()
    if grads is None:
        _, grads, _ = grad_total_loss(batch, params, weights, buckets)

    def f(arrays):
        return batch_loss(batch, params.with_arrays(arrays), weights, buckets)[0]

    return max_relative_error(f, params.named_arrays(), grads.arrays, h)


# --------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(params: ModelParams) -> bytes:
    header = [CHECKPOINT_MAGIC,
              struct.pack("<IddI", CHECKPOINT_VERSION, params.kappa, params.tau,
                          int(params.learn_tau))]
    payload = []
    for name in HEADS:
        layers = params.head(name).layers
        header.append(struct.pack("<I", len(layers)))
        for w, b in layers:
            header.append(struct.pack("<II", *w.shape))
            payload.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
            payload.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return with_crc(b"".join(header + payload))


def save_checkpoint(path, params: ModelParams) -> None:
    atomic_write(path, checkpoint_bytes(params))


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:6] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        body = split_crc(blob, path)
    except CorruptFileError as exc:
        raise CheckpointError(str(exc)) from None
    rd = Reader(body, path)
    rd.take(6)
    version, kappa, tau, flags = rd.unpack("<IddI")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    shapes = []
    for _ in HEADS:
        (n_layers,) = rd.unpack("<I")
        shapes.append([rd.unpack("<II") for _ in range(n_layers)])
    heads = []
    for layer_shapes in shapes:
        layers = []
        for n_out, n_in in layer_shapes:
            w = np.frombuffer(rd.take(8 * n_out * n_in), dtype="<f8").reshape(n_out, n_in)
            b = np.frombuffer(rd.take(8 * n_out), dtype="<f8")
            layers.append((w.astype(np.float64), b.astype(np.float64)))
        heads.append(ProjectionHead(tuple(layers)))
    rd.done()
    return ModelParams(*heads, kappa=kappa, tau=tau, learn_tau=bool(flags & 1))
