"""Retrieval protocols and metrics.

Five protocol families, all against an RGB gallery: r2r, i2r, s2r, t2r, and
the joint st2r. Query embeddings always encode only the protocol's real query
modalities with masked absences; the gallery is plain RGB, or RGB fused with
synthesized query-side cues when gallery synthesis is switched on.

Ranking is by cosine descending with ties broken by ascending sample id, so
a report is bit-reproducible from its input archives.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .datamodel import ModalityKind
from .fsio import atomic_write_text
from .errors import (
    DimMismatch,
    EmptyGallery,
    EmptyQuerySet,
    InvalidRecord,
    InvalidSpec,
    NoPositives,
    VersionMismatch,
)

ARCHIVE_FORMAT_VERSION = 1

R, S, I, T = ModalityKind.R, ModalityKind.S, ModalityKind.I, ModalityKind.T

PROTOCOL_QUERY_KINDS = {
    "r2r": frozenset({R}),
    "i2r": frozenset({I}),
    "s2r": frozenset({S}),
    "t2r": frozenset({T}),
    "st2r": frozenset({S, T}),
}

EXCLUSION_RULES = ("same_identity_same_view", "same_sample")


@dataclass(frozen=True)
class EmbeddingRecord:
    sample_id: str
    identity_id: int
    view_index: int
    modalities: frozenset
    vector: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "modalities",
                           frozenset(ModalityKind(m) for m in self.modalities))
        vec = np.asarray(self.vector, dtype=np.float32)
        if vec.ndim != 1:
            raise InvalidRecord(f"{self.sample_id}: vector must be 1-d")
        object.__setattr__(self, "vector", vec)


@dataclass(frozen=True)
class EvalProtocol:
    name: str
    query_modalities: frozenset
    gallery_modality: ModalityKind = R
    gallery_synthesis: bool = False
    self_exclusion: str = "same_identity_same_view"

    def validate(self):
        if not self.query_modalities:
            raise InvalidSpec("protocol needs at least one query modality")
        if self.self_exclusion not in EXCLUSION_RULES:
            raise InvalidSpec(f"unknown self-exclusion rule {self.self_exclusion!r}")
        if self.gallery_synthesis and not (set(self.query_modalities) - {self.gallery_modality}):
            raise InvalidSpec("gallery synthesis needs a non-gallery query modality")
        return self


def make_protocol(name: str, gallery_synthesis: bool = False,
                  self_exclusion: str = "same_identity_same_view") -> EvalProtocol:
    if name not in PROTOCOL_QUERY_KINDS:
        raise InvalidSpec(f"unknown protocol {name!r}; choose from {sorted(PROTOCOL_QUERY_KINDS)}")
    return EvalProtocol(
        name=name,
        query_modalities=PROTOCOL_QUERY_KINDS[name],
        gallery_synthesis=gallery_synthesis,
        self_exclusion=self_exclusion,
    ).validate()


@dataclass
class EvalReport:
    protocol: str
    gallery_synthesis: bool
    rank_k: dict[int, float]
    map_score: float
    cmc: list[float]
    ranked_lists: dict[str, list[str]]
    query_count: int
    excluded_count: int

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "gallery_synthesis": self.gallery_synthesis,
            "rank_k": {str(k): v for k, v in sorted(self.rank_k.items())},
            "map": self.map_score,
            "cmc": self.cmc,
            "ranked_lists": self.ranked_lists,
            "query_count": self.query_count,
            "excluded_count": self.excluded_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            protocol=d["protocol"],
            gallery_synthesis=d["gallery_synthesis"],
            rank_k={int(k): v for k, v in d["rank_k"].items()},
            map_score=d["map"],
            cmc=list(d["cmc"]),
            ranked_lists={k: list(v) for k, v in d["ranked_lists"].items()},
            query_count=d["query_count"],
            excluded_count=d["excluded_count"],
        )

    def save_json(self, path: str):
        atomic_write_text(path, json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")

    def save_cmc_csv(self, path: str):
        rows = ["k,cmc"]
        rows += [f"{k},{v!r}" for k, v in enumerate(self.cmc, start=1)]
        atomic_write_text(path, "\n".join(rows) + "\n")


# ---------------------------------------------------------------------------
# archives
# ---------------------------------------------------------------------------

def save_records(path: str, records: list[EmbeddingRecord]):
    """JSON Lines archive; line 1 is the header, one record per line after."""
    if not records:
        raise EmptyQuerySet("refusing to write an empty archive")
    dim = records[0].vector.shape[0]
    lines = [json.dumps({"version": ARCHIVE_FORMAT_VERSION, "dim": dim,
                         "count": len(records)}, sort_keys=True)]
    for rec in records:
        if rec.vector.shape[0] != dim:
            raise DimMismatch(f"{rec.sample_id}: dim {rec.vector.shape[0]} != {dim}")
        lines.append(json.dumps({
            "sample_id": rec.sample_id,
            "identity_id": rec.identity_id,
            "view_index": rec.view_index,
            "modalities": [k.value for k in sorted(rec.modalities)],
            "vec": [float(x) for x in rec.vector],
        }, sort_keys=True))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_records(path: str) -> list[EmbeddingRecord]:
    with open(path) as f:
        lines = [ln for ln in (raw.strip() for raw in f) if ln]
    if not lines:
        raise InvalidRecord(f"{path}: empty archive")
    header = json.loads(lines[0])
    if header.get("version") != ARCHIVE_FORMAT_VERSION:
        raise VersionMismatch(f"archive version {header.get('version')!r}, "
                              f"expected {ARCHIVE_FORMAT_VERSION}")
    if header.get("count") != len(lines) - 1:
        raise InvalidRecord(f"{path}: header count {header.get('count')} "
                            f"but {len(lines) - 1} records")
    records = []
    seen = set()
    for ln in lines[1:]:
        d = json.loads(ln)
        rec = EmbeddingRecord(
            sample_id=d["sample_id"],
            identity_id=int(d["identity_id"]),
            view_index=int(d["view_index"]),
            modalities=frozenset(d["modalities"]),
            vector=np.asarray(d["vec"], dtype=np.float32),
        )
        if rec.vector.shape[0] != header["dim"]:
            raise InvalidRecord(f"{rec.sample_id}: dim {rec.vector.shape[0]} "
                                f"!= header {header['dim']}")
        norm = float(np.linalg.norm(rec.vector))
        if abs(norm - 1.0) > 1e-5:
            raise InvalidRecord(f"{rec.sample_id}: vector norm {norm} is not unit")
        if rec.sample_id in seen:
            raise InvalidRecord(f"duplicate sample_id {rec.sample_id}")
        seen.add(rec.sample_id)
        records.append(rec)
    return records


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def similarity_matrix(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Cosine similarities of unit-norm rows, clamped to [-1, 1]."""
    queries = np.asarray(queries, dtype=np.float32)
    gallery = np.asarray(gallery, dtype=np.float32)
    if queries.ndim != 2 or gallery.ndim != 2:
        raise DimMismatch("similarity_matrix expects 2-d inputs")
    if queries.shape[1] != gallery.shape[1]:
        raise DimMismatch(f"query dim {queries.shape[1]} != gallery dim {gallery.shape[1]}")
    return np.clip(queries @ gallery.T, -1.0, 1.0)


def average_precision(relevance) -> float:
    """Mean over relevant positions p (1-based) of precision-at-p."""
    rel = np.asarray(relevance, dtype=bool)
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        raise NoPositives("ranked list carries no relevant item")
    precisions = (np.arange(1, hits.size + 1)) / (hits + 1)
    return float(precisions.mean())


def cmc_and_rank(first_hit_ranks, gallery_size: int) -> tuple[list[float], dict[int, float]]:
    """CMC[k] = fraction of queries whose first hit is at rank <= k+1 (0-based list)."""
    ranks = np.asarray(first_hit_ranks, dtype=np.int64)
    if ranks.size == 0:
        raise EmptyQuerySet("no included queries")
    if gallery_size < 1:
        raise EmptyGallery("gallery_size must be >= 1")
    cmc = [float(np.mean(ranks <= k)) for k in range(1, gallery_size + 1)]
    rank_k = {k: cmc[min(k, gallery_size) - 1] for k in (1, 5, 10)}
    return cmc, rank_k


# ---------------------------------------------------------------------------
# protocol evaluation
# ---------------------------------------------------------------------------

def _excluder(rule: str):
    if rule == "same_sample":
        return lambda q, g: g.sample_id == q.sample_id
    return lambda q, g: g.identity_id == q.identity_id and g.view_index == q.view_index


def evaluate_records(query_records: list[EmbeddingRecord],
                     gallery_records: list[EmbeddingRecord],
                     protocol: EvalProtocol) -> EvalReport:
    """Rank every query against the gallery and aggregate CMC/mAP.

    Queries whose embedding does not carry exactly the protocol's query
    modalities are ignored; queries left without any positive after
    self-exclusion are tallied as excluded rather than failing the run.
    """
    protocol.validate()
    queries = [q for q in query_records if q.modalities == protocol.query_modalities]
    gallery = [g for g in gallery_records if protocol.gallery_modality in g.modalities]
    if not gallery:
        raise EmptyGallery("no gallery record carries the gallery modality")
    if not queries:
        raise EmptyQuerySet("no query record matches the protocol's modalities")

    qmat = np.stack([q.vector for q in queries])
    gmat = np.stack([g.vector for g in gallery])
    sims = similarity_matrix(qmat, gmat)

    gallery_ids = np.array([g.sample_id for g in gallery])
    gallery_labels = np.array([g.identity_id for g in gallery])
    exclude = _excluder(protocol.self_exclusion)

    aps, first_hits, ranked_lists = [], [], {}
    excluded = 0
    for qi, q in enumerate(queries):
        keep = np.array([not exclude(q, g) for g in gallery])
        if not keep.any():
            excluded += 1
            continue
        idx = np.flatnonzero(keep)
        # primary key: similarity descending; secondary: sample_id ascending.
        # np.lexsort sorts ascending by the last key first.
        order = idx[np.lexsort((gallery_ids[idx], -sims[qi, idx]))]
        relevance = gallery_labels[order] == q.identity_id
        if not relevance.any():
            excluded += 1
            continue
        aps.append(average_precision(relevance))
        first_hits.append(int(np.flatnonzero(relevance)[0]) + 1)
        ranked_lists[q.sample_id] = [str(s) for s in gallery_ids[order][:10]]

    if not aps:
        raise EmptyQuerySet("every query was excluded")
    cmc, rank_k = cmc_and_rank(first_hits, len(gallery))
    return EvalReport(
        protocol=protocol.name,
        gallery_synthesis=protocol.gallery_synthesis,
        rank_k=rank_k,
        map_score=float(np.mean(aps)),
        cmc=cmc,
        ranked_lists=ranked_lists,
        query_count=len(queries),
        excluded_count=excluded,
    )


def embed_records(model, tuples, kinds, batch_size: int = 64) -> list[EmbeddingRecord]:
    """Solo-protocol embeddings of ``tuples`` restricted to ``kinds`` (mask fill)."""
    kinds = frozenset(kinds)
    eligible = [t for t in tuples if kinds <= t.presence]
    records = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(eligible), batch_size):
            batch = eligible[i : i + batch_size]
            out = model.embed_tuples(batch, use_kinds=kinds, fill="mask")
            vecs = out.final.detach().cpu().numpy().astype(np.float32)
            for t, vec in zip(batch, vecs):
                records.append(EmbeddingRecord(
                    sample_id=t.sample_id,
                    identity_id=t.identity_id,
                    view_index=t.view_index,
                    modalities=kinds,
                    vector=vec,
                ))
    return records


def embed_gallery_records(model, tuples, protocol: EvalProtocol,
                          batch_size: int = 64) -> list[EmbeddingRecord]:
    """RGB gallery embeddings, fused with synthesized query cues when enabled."""
    eligible = [t for t in tuples if protocol.gallery_modality in t.presence]
    if not eligible:
        raise EmptyGallery("no tuple carries the gallery modality")
    synth_kinds = sorted(set(protocol.query_modalities) - {protocol.gallery_modality})
    records = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(eligible), batch_size):
            batch = eligible[i : i + batch_size]
            if protocol.gallery_synthesis:
                vecs = model.embed_gallery_with_synthesis(batch, synth_kinds)
            else:
                vecs = model.embed_tuples(
                    batch, use_kinds={protocol.gallery_modality}, fill="mask"
                ).final
            vecs = vecs.detach().cpu().numpy().astype(np.float32)
            for t, vec in zip(batch, vecs):
                records.append(EmbeddingRecord(
                    sample_id=t.sample_id,
                    identity_id=t.identity_id,
                    view_index=t.view_index,
                    modalities=frozenset({protocol.gallery_modality}),
                    vector=vec,
                ))
    return records


def evaluate_protocol(model, query_tuples, gallery_tuples,
                      protocol: EvalProtocol) -> EvalReport:
    """Embed both sides from raw tuples and evaluate; see evaluate_records."""
    protocol.validate()
    queries = embed_records(model, query_tuples, protocol.query_modalities)
    if not queries:
        raise EmptyQuerySet("no query tuple carries all protocol modalities")
    gallery = embed_gallery_records(model, gallery_tuples, protocol)
    return evaluate_records(queries, gallery, protocol)
