"""Gallery ranking by cosine similarity and the retrieval metrics.

Recall@K counts queries whose target appears in the top K. mAP@K averages
truncated average precision with the multi-truth normalizer min(K, #truths).
Ties in similarity break deterministically by ascending gallery index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .blocks import TokenSequence
from .encoders import EmbeddingDump, surrogate_encode_text
from .errors import DataError, NumericError, ShapeError, UsageError
from .fusion import fuse
from .model import Model


@dataclass
class Gallery:
    """Retrieval corpus: one pooled embedding row per id, stable order."""

    ids: list[str]
    embeddings: np.ndarray  # (N, d) float32

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.ids):
            raise ShapeError(
                f"gallery of {len(self.ids)} ids has embedding shape "
                f"{self.embeddings.shape}")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("gallery ids are not unique")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @classmethod
    def from_dump(cls, dump: EmbeddingDump) -> "Gallery":
        """Pool each record to its class token (row 0)."""
        ids = dump.ids()
        rows = np.stack([dump.arrays(key)[0][0] for key in ids])
        return cls(ids, rows)


@dataclass
class RankedResult:
    query_id: str
    items: list[tuple[str, float]]  # (gallery id, score), descending score

    def top_ids(self, k: int) -> list[str]:
        return [gid for gid, _ in self.items[:k]]


def _unit_rows(m: np.ndarray, what: str, ids=None) -> np.ndarray:
    # 64-bit accumulation for the norms, 32-bit scores.
    norms = np.sqrt(np.einsum("ij,ij->i", m, m, dtype=np.float64))
    zero = np.nonzero(norms == 0)[0]
    if zero.size:
        name = ids[zero[0]] if ids is not None else str(zero[0])
        raise NumericError(f"zero-norm {what} row: {name!r}")
    return (m / norms[:, None].astype(np.float32))


def rank_gallery(query: np.ndarray, gallery: Gallery, k: int,
                 query_id: str = "") -> RankedResult:
    """Top-k gallery items by cosine similarity to one query vector."""
    q = np.asarray(query, dtype=np.float32).reshape(-1)
    if q.shape[0] != gallery.dim:
        raise ShapeError(
            f"query dim {q.shape[0]} does not match gallery dim {gallery.dim}")
    if k > len(gallery):
        raise UsageError(f"k={k} exceeds gallery size {len(gallery)}")
    qn = _unit_rows(q[None, :], "query", [query_id or "query"])
    gn = _unit_rows(gallery.embeddings, "gallery", gallery.ids)
    scores = gn @ qn[0]
    order = np.argsort(-scores, kind="stable")[:k]
    items = [(gallery.ids[i], float(scores[i])) for i in order]
    return RankedResult(query_id, items)


def _truth_set(truth, query_id: str) -> set[str]:
    try:
        entry = truth[query_id]
    except KeyError:
        raise DataError(f"no ground truth for query {query_id!r}") from None
    targets = {entry} if isinstance(entry, str) else set(entry)
    if not targets:
        raise DataError(f"empty truth set for query {query_id!r}")
    return targets


def recall_at_k(results: list[RankedResult], truth, k: int) -> float:
    """Fraction of queries with at least one true target in the top k."""
    if not results:
        raise UsageError("recall over an empty result list")
    hits = 0
    for res in results:
        targets = _truth_set(truth, res.query_id)
        if targets & set(res.top_ids(k)):
            hits += 1
    return hits / len(results)


def map_at_k(results: list[RankedResult], truth, k: int) -> float:
    """Mean truncated average precision with normalizer min(k, #truths)."""
    if not results:
        raise UsageError("mAP over an empty result list")
    total = 0.0
    for res in results:
        targets = _truth_set(truth, res.query_id)
        hits = 0
        precision_sum = 0.0
        for rank, gid in enumerate(res.top_ids(k), start=1):
            if gid in targets:
                hits += 1
                precision_sum += hits / rank
        total += precision_sum / min(k, len(targets))
    return total / len(results)


@dataclass
class EvalQuery:
    """One evaluation record; text fields are token ids or replayed sequences."""

    query_id: str
    q_v: TokenSequence
    q_t: list[int] | TokenSequence
    q_c: list[int] | TokenSequence | None
    targets: list[str]
    reference_id: str | None = None


@dataclass
class EvalReport:
    recall_at: dict[int, float]
    map_at: dict[int, float]
    per_query: list[dict] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        out = {f"recall@{k}": v for k, v in sorted(self.recall_at.items())}
        out.update({f"mAP@{k}": v for k, v in sorted(self.map_at.items())})
        out["per_query"] = self.per_query
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"


def _encode_text_field(value, encoder_params) -> TokenSequence:
    if isinstance(value, TokenSequence):
        return value
    return surrogate_encode_text(value, encoder_params)


def fuse_query(model: Model, query: EvalQuery, use_caption: bool = True) -> np.ndarray:
    """Joint multimodal embedding of one query under the current parameters."""
    emb_t = _encode_text_field(query.q_t, model.text_query)
    emb_c = None
    if use_caption:
        if query.q_c is None:
            raise DataError(f"query {query.query_id!r} lacks a caption")
        emb_c = _encode_text_field(query.q_c, model.caption)
    out = fuse(emb_t, query.q_v, emb_c, model.fusion, use_caption=use_caption)
    return out.emb_mm.value[0]


def average_baseline_query(model: Model, query: EvalQuery) -> np.ndarray:
    """Untrained-style baseline: mean of the pooled visual and text embeddings."""
    emb_t = _encode_text_field(query.q_t, model.text_query)
    pooled_v = query.q_v.tokens.value[0]
    pooled_t = emb_t.tokens.value[0]
    return (pooled_v + pooled_t) / 2.0


def evaluate(model: Model | None, queries: list[EvalQuery], gallery: Gallery,
             recall_ks: list[int], map_ks: list[int] | None = None,
             use_caption: bool = True, fusion_mode: str = "learned",
             exclude_reference: bool = False, topk_record: int = 10) -> EvalReport:
    """Fuse every query, rank the gallery, and aggregate both metric families.

    `fusion_mode` selects the learned adapter, the pooled-average baseline, or
    an identity-on-target shim used to verify evaluation plumbing.
    """
    map_ks = list(map_ks or [])
    if not queries:
        raise DataError("no evaluation queries")
    all_ks = sorted(set(recall_ks) | set(map_ks))
    if not all_ks:
        raise UsageError("no K values requested")
    depth = max(max(all_ks), topk_record)
    truth = {q.query_id: set(q.targets) for q in queries}

    results = []
    per_query = []
    for q in queries:
        if fusion_mode == "learned":
            vec = fuse_query(model, q, use_caption=use_caption)
        elif fusion_mode == "average":
            vec = average_baseline_query(model, q)
        elif fusion_mode == "identity":
            if q.targets[0] not in gallery.ids:
                raise DataError(f"target {q.targets[0]!r} not in gallery")
            vec = gallery.embeddings[gallery.ids.index(q.targets[0])]
        else:
            raise UsageError(f"unknown fusion mode {fusion_mode!r}")

        sub = gallery
        if exclude_reference and q.reference_id is not None:
            keep = [i for i, gid in enumerate(gallery.ids) if gid != q.reference_id]
            sub = Gallery([gallery.ids[i] for i in keep], gallery.embeddings[keep])
        res = rank_gallery(vec, sub, min(depth, len(sub)), query_id=q.query_id)
        results.append(res)

        ranks = [i + 1 for i, (gid, _) in enumerate(res.items) if gid in truth[q.query_id]]
        per_query.append({
            "query_id": q.query_id,
            "first_hit_rank": ranks[0] if ranks else None,
            "topk": [[gid, score] for gid, score in res.items[:topk_record]],
        })

    report = EvalReport(
        recall_at={k: recall_at_k(results, truth, k) for k in recall_ks},
        map_at={k: map_at_k(results, truth, k) for k in map_ks},
        per_query=per_query,
    )
    return report
