"""Assay and feature ingestion, splitting and synthetic generators.

Internally affinities are always oriented so that larger means stronger
binding.  Files declare their own orientation in the header line and are
flipped on load when needed.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ._binio import CorruptFileError, Reader, atomic_write, split_crc, with_crc
from .seeding import derive_rng

__all__ = [
    "Ligand",
    "Assay",
    "FeatureStore",
    "CliffPairSpec",
    "DataError",
    "MissingFeatureError",
    "DataOrientationError",
    "load_assays",
    "write_assays",
    "load_features",
    "write_features",
    "validate_references",
    "generate_synthetic",
    "generate_cliff_pairs",
    "split_assays",
    "dataset_checksum",
]

ASSAY_FORMAT = "hypseek-assays"
ASSAY_VERSION = 1
ORIENTATIONS = ("higher_stronger", "lower_stronger")
FEATURE_MAGIC = b"HYPSF1"
FEATURE_VERSION = 1


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class MissingFeatureError(DataError, KeyError):
    def __init__(self, feature_id):
        super().__init__(f"feature id {feature_id!r} not found in feature store")
        self.feature_id = feature_id

    def __str__(self):
        return self.args[0]


class DataOrientationError(DataError):
    pass


@dataclass(frozen=True)
class Ligand:
    ligand_id: str
    feature_id: str
    active: Optional[bool] = None
    affinity: Optional[float] = None


@dataclass(frozen=True)
class Assay:
    assay_id: str
    target_id: str
    pocket_feature_ids: tuple
    ligands: tuple
    sequence_feature_id: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "pocket_feature_ids", tuple(self.pocket_feature_ids))
        object.__setattr__(self, "ligands", tuple(self.ligands))
        if not self.pocket_feature_ids:
            raise DataError(f"assay {self.assay_id!r} lists no pocket features")
        seen = set()
        for lig in self.ligands:
            if lig.ligand_id in seen:
                raise DataError(
                    f"assay {self.assay_id!r}: duplicate ligand_id {lig.ligand_id!r}")
            seen.add(lig.ligand_id)

    @property
    def labelled(self) -> bool:
        return any(lig.active is not None for lig in self.ligands)

    def to_json(self) -> dict:
        return {
            "assay_id": self.assay_id,
            "target_id": self.target_id,
            "pocket_feature_ids": list(self.pocket_feature_ids),
            "sequence_feature_id": self.sequence_feature_id,
            "ligands": [asdict(lig) for lig in self.ligands],
        }


# --------------------------------------------------------------------------
# assay files


def _check_orientation(assay: Assay) -> None:
    act = [l.affinity for l in assay.ligands if l.active and l.affinity is not None]
    ina = [l.affinity for l in assay.ligands if l.active is False and l.affinity is not None]
    if act and ina and np.median(act) < np.median(ina):
        raise DataOrientationError(
            f"assay {assay.assay_id!r}: median active affinity is below the inactive "
            "median; check the file's affinity_orientation")


def _parse_assay(obj, lineno: int, path, flip: bool) -> Assay:
    def fail(msg):
        raise DataError(f"{path}:{lineno}: {msg}")

    if not isinstance(obj, dict):
        fail("assay line must be a JSON object")
    required = {"assay_id": str, "target_id": str, "pocket_feature_ids": list, "ligands": list}
    for key, typ in required.items():
        if not isinstance(obj.get(key), typ):
            fail(f"field {key!r} missing or not a {typ.__name__}")
    extra = set(obj) - set(required) - {"sequence_feature_id"}
    if extra:
        fail(f"unknown fields {sorted(extra)}")
    seq = obj.get("sequence_feature_id")
    if seq is not None and not isinstance(seq, str):
        fail("sequence_feature_id must be a string or null")
    pockets = obj["pocket_feature_ids"]
    if not pockets or not all(isinstance(p, str) for p in pockets):
        fail("pocket_feature_ids must be a non-empty list of strings")
    ligands = []
    for i, raw in enumerate(obj["ligands"]):
        if not isinstance(raw, dict):
            fail(f"ligand {i} is not an object")
        if not isinstance(raw.get("ligand_id"), str) or not isinstance(raw.get("feature_id"), str):
            fail(f"ligand {i}: ligand_id and feature_id must be strings")
        if set(raw) - {"ligand_id", "feature_id", "active", "affinity"}:
            fail(f"ligand {i}: unknown fields")
        active = raw.get("active")
        if active is not None and not isinstance(active, bool):
            fail(f"ligand {i}: active must be a boolean or null")
        aff = raw.get("affinity")
        if aff is not None:
            if isinstance(aff, bool) or not isinstance(aff, (int, float)) or not math.isfinite(aff):
                fail(f"ligand {i}: affinity must be a finite number or null")
            aff = -float(aff) if flip else float(aff)
        ligands.append(Ligand(raw["ligand_id"], raw["feature_id"], active, aff))
    try:
        assay = Assay(obj["assay_id"], obj["target_id"], tuple(obj["pocket_feature_ids"]),
                      tuple(ligands), seq)
    except DataError as exc:
        fail(str(exc))
    return assay


def load_assays(path) -> list:
    """Read a JSON-lines assay file; affinities come back oriented larger = stronger."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    numbered = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip()]
    if not numbered:
        return []
    lineno, first = numbered[0]
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    if (not isinstance(header, dict) or header.get("format") != ASSAY_FORMAT
            or header.get("version") != ASSAY_VERSION
            or header.get("affinity_orientation") not in ORIENTATIONS):
        raise DataError(f"{path}:{lineno}: bad header line {first!r}")
    flip = header["affinity_orientation"] == "lower_stronger"
    assays, seen = [], set()
    for lineno, line in numbered[1:]:
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        assay = _parse_assay(obj, lineno, path, flip)
        if assay.assay_id in seen:
            raise DataError(f"{path}:{lineno}: duplicate assay_id {assay.assay_id!r}")
        seen.add(assay.assay_id)
        _check_orientation(assay)
        assays.append(assay)
    return assays


def write_assays(path, assays: Sequence[Assay],
                 orientation: str = "higher_stronger") -> None:
    """Write assays (held internally as larger = stronger) in the given orientation."""
    if orientation not in ORIENTATIONS:
        raise ValueError(f"orientation must be one of {ORIENTATIONS}")
    flip = orientation == "lower_stronger"
    out = [json.dumps({"format": ASSAY_FORMAT, "version": ASSAY_VERSION,
                       "affinity_orientation": orientation}, separators=(",", ":"))]
    for a in assays:
        obj = a.to_json()
        if flip:
            for lig in obj["ligands"]:
                if lig["affinity"] is not None:
                    lig["affinity"] = -lig["affinity"]
        out.append(json.dumps(obj, separators=(",", ":")))
    atomic_write(path, ("\n".join(out) + "\n").encode("utf-8"))


# --------------------------------------------------------------------------
# feature store


class FeatureStore:
    """Dense float64 feature rows keyed by entity id."""

    def __init__(self, ids: Sequence[str], values):
        values = np.array(values, dtype=np.float64)
        if values.ndim != 2:
            raise DataError("feature values must be a 2-D array")
        if len(ids) != values.shape[0]:
            raise DataError("one id per feature row is required")
        if values.shape[1] == 0:
            raise DataError("feature dimension must be positive")
        if not np.all(np.isfinite(values)):
            raise DataError("feature values must be finite")
        self.ids = tuple(ids)
        self.index = {}
        for i, fid in enumerate(self.ids):
            if fid in self.index:
                raise DataError(f"duplicate feature id {fid!r}")
            self.index[fid] = i
        values.setflags(write=False)
        self.values = values

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return len(self.ids)

    def __contains__(self, fid):
        return fid in self.index

    def row(self, fid) -> np.ndarray:
        try:
            return self.values[self.index[fid]]
        except KeyError:
            raise MissingFeatureError(fid) from None

    def rows(self, fids: Sequence[str]) -> np.ndarray:
        try:
            idx = [self.index[f] for f in fids]
        except KeyError as exc:
            raise MissingFeatureError(exc.args[0]) from None
        return self.values[np.asarray(idx, dtype=np.int64).reshape(-1)].reshape(len(idx), self.dim)

    def to_bytes(self) -> bytes:
        parts = [FEATURE_MAGIC, struct.pack("<III", FEATURE_VERSION, len(self.ids), self.dim)]
        for fid in self.ids:
            raw = fid.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(self.values.astype("<f4").tobytes(order="C"))
        return with_crc(b"".join(parts))


def write_features(path, store: FeatureStore) -> None:
    """Write ``store``; values are narrowed to float32 on disk."""
    atomic_write(path, store.to_bytes())


def load_features(path) -> FeatureStore:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:6] != FEATURE_MAGIC:
        raise CorruptFileError(f"{path}: not a feature file (bad magic)")
    body = split_crc(blob, path)
    rd = Reader(body, path)
    rd.take(6)
    version, rows, dim = rd.unpack("<III")
    if version != FEATURE_VERSION:
        raise CorruptFileError(f"{path}: unsupported feature file version {version}")
    if dim == 0:
        raise DataError(f"{path}: feature dimension is 0")
    ids = []
    for _ in range(rows):
        (n,) = rd.unpack("<I")
        ids.append(rd.take(n).decode("utf-8"))
    values = np.frombuffer(rd.take(4 * rows * dim), dtype="<f4").reshape(rows, dim)
    rd.done()
    return FeatureStore(ids, values.astype(np.float64))


def validate_references(assays: Sequence[Assay], store: FeatureStore) -> None:
    """Raise ``MissingFeatureError`` for the first unresolvable feature id."""
    for a in assays:
        for fid in a.pocket_feature_ids:
            store.row(fid)
        if a.sequence_feature_id is not None:
            store.row(a.sequence_feature_id)
        for lig in a.ligands:
            store.row(lig.feature_id)


def dataset_checksum(assays: Sequence[Assay], store: FeatureStore) -> str:
    h = hashlib.sha256()
    for a in assays:
        h.update(json.dumps(a.to_json(), sort_keys=True).encode("utf-8"))
    h.update(repr(store.ids).encode("utf-8"))
    h.update(np.ascontiguousarray(store.values, dtype="<f8").tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# synthetic data


def _random_orthogonal(rng, n):
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


def _top_half(strengths) -> np.ndarray:
    s = np.asarray(strengths)
    order = np.argsort(-s, kind="stable")
    active = np.zeros(s.size, dtype=bool)
    active[order[: (s.size + 1) // 2]] = True
    return active


def _synthetic_parts(targets, ligands_per_assay, dim, noise, rng, prototype_radius=1.0,
                     pockets_per_target=2):
    if targets < 1 or ligands_per_assay < 1 or dim < 1:
        raise ValueError("targets, ligands_per_assay and dim must all be >= 1")
    rotation = _random_orthogonal(rng, dim)
    ids, rows, plan = [], [], []
    for t in range(targets):
        tid = f"T{t:03d}"
        proto = rng.normal(size=dim)
        proto *= prototype_radius / np.linalg.norm(proto)
        pocket_ids = []
        for p in range(pockets_per_target):
            pocket_ids.append(f"{tid}_P{p}")
            ids.append(pocket_ids[-1])
            rows.append(proto + noise * rng.normal(size=dim))
        seq_id = f"{tid}_S"
        ids.append(seq_id)
        rows.append(rotation @ proto + noise * rng.normal(size=dim))
        strength = rng.uniform(0.0, 1.0, size=ligands_per_assay)
        lig_rows = proto[None, :] * (1.0 + strength[:, None]) \
            + noise * rng.normal(size=(ligands_per_assay, dim))
        lig_ids = [f"{tid}_L{j:03d}" for j in range(ligands_per_assay)]
        ids.extend(lig_ids)
        rows.extend(lig_rows)
        plan.append(dict(tid=tid, proto=proto, pockets=pocket_ids, seq=seq_id,
                         ligands=lig_ids, strength=list(strength)))
    return ids, rows, plan


def _assemble(plan) -> list:
    assays = []
    for t, item in enumerate(plan):
        active = _top_half(item["strength"])
        ligands = tuple(Ligand(lid, lid, bool(a), float(s))
                        for lid, a, s in zip(item["ligands"], active, item["strength"]))
        assays.append(Assay(f"A{t:03d}", item["tid"], tuple(item["pockets"]), ligands, item["seq"]))
    return assays


def generate_synthetic(targets: int = 20, ligands_per_assay: int = 50, dim: int = 64,
                       noise: float = 0.05, seed: int = 7, pockets_per_target: int = 2):
    """One assay per target around a random prototype direction.

    Each ligand is ``prototype * (1 + strength) + noise``; its affinity is
    the strength, drawn uniformly from [0, 1].  The top half by strength is
    labelled active.  Pockets are noisy copies of the prototype and the
    sequence feature is a fixed random rotation of it.

    Returns ``(assays, FeatureStore)``.
    """
    rng = derive_rng(seed, "synthetic")
    ids, rows, plan = _synthetic_parts(targets, ligands_per_assay, dim, noise, rng,
                                       pockets_per_target=pockets_per_target)
    return _assemble(plan), FeatureStore(ids, np.vstack(rows))


@dataclass(frozen=True)
class CliffPairSpec:
    """Activity-cliff pairs: ligands ``feature_epsilon`` apart with a large affinity gap."""

    feature_epsilon: float = 0.01
    affinity_gap: float = 3.0
    pair_count: int = 50
    prototype_radius: float = 1.0
    targets: int = 20
    ligands_per_assay: int = 50
    dim: int = 64
    noise: float = 0.05

    def __post_init__(self):
        if self.feature_epsilon < 0 or self.affinity_gap <= 0 or self.pair_count < 0:
            raise ValueError("invalid cliff-pair spec")
        if self.feature_epsilon > 0.1 * self.prototype_radius:
            raise ValueError("feature_epsilon must be small relative to the prototype scale")


def generate_cliff_pairs(spec: CliffPairSpec = CliffPairSpec(), seed: int = 11):
    """Synthetic assays with activity-cliff pairs mixed in.

    Pairs are dealt round-robin over the targets.  The weaker member is an
    ordinary ligand of the assay; the stronger one is offset by exactly
    ``feature_epsilon`` along one shared cliff direction and is
    ``affinity_gap`` more potent.

    Returns ``(assays, FeatureStore, manifest)``; the manifest has one dict
    per pair.
    """
    rng = derive_rng(seed, "cliffs")
    ids, rows, plan = _synthetic_parts(spec.targets, spec.ligands_per_assay, spec.dim,
                                       spec.noise, rng, spec.prototype_radius)
    direction = rng.normal(size=spec.dim)
    direction /= np.linalg.norm(direction)
    manifest = []
    for p in range(spec.pair_count):
        item = plan[p % spec.targets]
        s = float(rng.uniform(0.0, 1.0))
        base = item["proto"] * (1.0 + s) + spec.noise * rng.normal(size=spec.dim)
        partner = base + spec.feature_epsilon * direction
        a_id, b_id = f"{item['tid']}_C{p:03d}a", f"{item['tid']}_C{p:03d}b"
        ids += [a_id, b_id]
        rows += [base, partner]
        item["ligands"] += [a_id, b_id]
        item["strength"] += [s, s + spec.affinity_gap]
        manifest.append({
            "pair_id": f"C{p:03d}",
            "assay_id": f"A{p % spec.targets:03d}",
            "ligand_a": a_id,
            "ligand_b": b_id,
            "epsilon": float(np.linalg.norm(partner - base)),
            "affinity_gap": spec.affinity_gap,
            "degenerate": spec.feature_epsilon == 0.0,
        })
    return _assemble(plan), FeatureStore(ids, np.vstack(rows)), manifest


# --------------------------------------------------------------------------
# splitting


def _largest_remainder(fractions, total):
    raw = np.asarray(fractions, dtype=np.float64) * total
    counts = np.floor(raw + 1e-9).astype(int)
    remainder = raw - counts
    for i in np.argsort(-remainder, kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    return counts


def split_assays(assays: Sequence[Assay], fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Target-disjoint (train, validation, test) split.

    Targets, not assays, are shuffled and dealt out with largest-remainder
    rounding of ``fractions * n_targets``.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    targets = sorted({a.target_id for a in assays})
    needed = sum(f > 0 for f in fractions)
    if len(targets) < needed:
        raise ValueError(f"{len(targets)} targets cannot fill {needed} non-empty splits")
    order = derive_rng(seed, "split").permutation(len(targets))
    counts = _largest_remainder(fractions, len(targets))
    which = {}
    start = 0
    for split, c in enumerate(counts):
        for i in order[start:start + c]:
            which[targets[i]] = split
        start += c
    out = ([], [], [])
    for a in assays:
        out[which[a.target_id]].append(a)
    return out
