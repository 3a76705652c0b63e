"""Inference-time scoring: spatial inner products between a pocket and a ligand index."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Assay, DataError, FeatureStore
from .metrics import LabeledRanking, ranking_order
from .model import ModelParams, embed

__all__ = [
    "LigandIndex",
    "RankedResult",
    "OperationCounter",
    "build_index",
    "score_all",
    "screen_assay",
    "write_ranked",
]


class OperationCounter:
    """Debug probe: counts length-n dot products issued by ``score_all``."""

    def __init__(self):
        self.dot_products = 0
        self.vector_length = None


@dataclass(frozen=True)
class LigandIndex:
    ids: tuple
    spatial: np.ndarray

    def __post_init__(self):
        spatial = np.asarray(self.spatial, dtype=np.float64)
        if spatial.ndim != 2 or spatial.shape[0] != len(self.ids):
            raise ValueError("one spatial row per id is required")
        if not np.all(np.isfinite(spatial)):
            raise ValueError("index vectors must be finite")
        spatial.setflags(write=False)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "spatial", spatial)

    def __len__(self):
        return len(self.ids)

    def position(self) -> dict:
        return {lid: i for i, lid in enumerate(self.ids)}


@dataclass(frozen=True)
class RankedResult:
    """Ligands in descending score order, ties broken by ascending id."""

    ids: tuple
    scores: np.ndarray

    @property
    def ranks(self) -> np.ndarray:
        return np.arange(1, len(self.ids) + 1)

    def rows(self):
        return list(zip(self.ranks.tolist(), self.ids, self.scores.tolist()))


def build_index(ligand_ids: Sequence[str], store: FeatureStore, params: ModelParams,
                feature_ids: Optional[Sequence[str]] = None) -> LigandIndex:
    """Embed each ligand with the ligand head and keep the spatial parts.

    ``feature_ids`` defaults to the ligand ids themselves.
    """
    ligand_ids = list(ligand_ids)
    if len(set(ligand_ids)) != len(ligand_ids):
        seen, dup = set(), None
        for lid in ligand_ids:
            if lid in seen:
                dup = lid
                break
            seen.add(lid)
        raise DataError(f"duplicate ligand id {dup!r} in index")
    if not ligand_ids:
        return LigandIndex((), np.zeros((0, params.embed_dim)))
    rows = store.rows(ligand_ids if feature_ids is None else list(feature_ids))
    points = embed(rows, params.ligand, params.kappa)
    return LigandIndex(tuple(ligand_ids), points.spatial)


def score_all(pocket_features, index: LigandIndex, params: ModelParams,
              counter: Optional[OperationCounter] = None) -> RankedResult:
    """Rank every indexed ligand by ``<pocket~, ligand~>``."""
    if len(index) == 0:
        raise ValueError("cannot score against an empty index")
    pocket = embed(np.asarray(pocket_features, dtype=np.float64), params.pocket, params.kappa)
    if pocket.spatial.ndim != 1 or pocket.spatial.shape[0] != index.spatial.shape[1]:
        raise ValueError("pocket embedding does not match the index dimension")
    scores = index.spatial @ pocket.spatial
    if counter is not None:
        counter.dot_products += len(index)
        counter.vector_length = index.spatial.shape[1]
    order = ranking_order(scores, index.ids)
    return RankedResult(tuple(index.ids[i] for i in order), scores[order])


def screen_assay(assay: Assay, index: LigandIndex, params: ModelParams,
                 store: FeatureStore, pocket: int = 0) -> LabeledRanking:
    """Score ``assay``'s ligands against its pocket and return them in ranked order.

    Labels are the ligands' activity flags (unlabelled counts as inactive).
    """
    pos = index.position()
    wanted = []
    for lig in assay.ligands:
        if lig.ligand_id not in pos:
            raise DataError(f"assay {assay.assay_id!r}: ligand {lig.ligand_id!r} is not indexed")
        wanted.append(pos[lig.ligand_id])
    sub = LigandIndex(tuple(index.ids[i] for i in wanted), index.spatial[wanted])
    ranked = score_all(store.row(assay.pocket_feature_ids[pocket]), sub, params)
    by_id = {lig.ligand_id: lig for lig in assay.ligands}
    ligs = [by_id[i] for i in ranked.ids]
    return LabeledRanking(
        ranked.scores,
        np.array([bool(l.active) for l in ligs]),
        np.array([np.nan if l.affinity is None else l.affinity for l in ligs]),
        ranked.ids,
    )


def write_ranked(path, query_id: str, checkpoint_hash: str, result: RankedResult) -> None:
    lines = [f"# query={query_id}\tcheckpoint={checkpoint_hash}", "rank\tligand_id\tscore"]
    for rank, lid, score in result.rows():
        lines.append(f"{rank}\t{lid}\t{score:.9g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
