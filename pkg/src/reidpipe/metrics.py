"""Distance computation, normalization, retrieval evaluation and fusion.

Evaluation follows the standard cross-camera protocol: for each query,
gallery entries sharing both its identity and its camera are removed from
the ranking, AP is the mean of precision at each remaining relevant hit,
and CMC[k] is the fraction of scored queries whose first hit lands at rank
<= k. Queries left without any relevant gallery entry are excluded from the
denominators rather than scored zero.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .store import DistanceMatrix, EmbeddingSet

logger = logging.getLogger(__name__)

METRICS = ("euclidean", "cosine")
FUSION_NORMS = ("none", "minmax")


@dataclass
class EvalReport:
    """mAP, CMC curve and per-query AP breakdown of one evaluation."""

    map: float
    cmc: np.ndarray
    per_query_ap: list  # (query id, AP) for scored queries
    excluded_queries: list = field(default_factory=list)  # query ids with no valid match

    def rank(self, k: int) -> float:
        """CMC at rank k (1-based); saturates at the last entry."""
        if len(self.cmc) == 0:
            return 0.0
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def to_json(self) -> str:
        payload = {
            "map": self.map,
            "cmc": [float(x) for x in self.cmc],
            "excluded_queries": [int(q) for q in self.excluded_queries],
            "per_query_ap": [[int(q), float(a)] for q, a in self.per_query_ap],
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(
            map=float(d["map"]),
            cmc=np.asarray(d["cmc"], dtype=np.float64),
            per_query_ap=[(int(q), float(a)) for q, a in d["per_query_ap"]],
            excluded_queries=[int(q) for q in d["excluded_queries"]],
        )


@dataclass(frozen=True)
class FusionSpec:
    """Weights and per-input normalization for distance-matrix fusion."""

    weights: tuple
    normalize: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if any(w < 0 for w in self.weights):
            raise ValueError("fusion weights must be >= 0")
        if not any(w > 0 for w in self.weights):
            raise ValueError("at least one fusion weight must be > 0")
        if self.normalize not in FUSION_NORMS:
            raise ValueError("unknown normalization %r" % (self.normalize,))


def l2_normalize(es: EmbeddingSet) -> EmbeddingSet:
    """Scale every row to unit Euclidean norm; zero rows are left as zero.

    The number of zero rows (if any) is reported through a warning log.
    """
    feats = es.features.astype(np.float64)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    zero = norms[:, 0] == 0.0
    n_zero = int(zero.sum())
    if n_zero:
        logger.warning("l2_normalize: %d zero row(s) left unnormalized", n_zero)
    norms[zero] = 1.0
    return es.with_features((feats / norms).astype(np.float32))


def pairwise_distance(a: EmbeddingSet, b: EmbeddingSet, metric: str = "euclidean") -> DistanceMatrix:
    """All-pairs distances between the rows of `a` and `b`.

    euclidean: L2 norm of the difference. cosine: 1 - cos(angle), with any
    pair involving a zero vector defined as distance 1. When `a` and `b`
    carry the same sample ids the diagonal is forced to exact zero so the
    result satisfies the self-distance invariants.
    """
    if metric not in METRICS:
        raise ValueError("unknown metric %r" % (metric,))
    if a.dim != b.dim:
        raise ValueError("dimension mismatch: %d vs %d" % (a.dim, b.dim))
    fa = a.features.astype(np.float64)
    fb = b.features.astype(np.float64)
    if metric == "euclidean":
        sq = (fa * fa).sum(axis=1)[:, None] + (fb * fb).sum(axis=1)[None, :] - 2.0 * (fa @ fb.T)
        values = np.sqrt(np.maximum(sq, 0.0))
    else:
        na = np.linalg.norm(fa, axis=1)
        nb = np.linalg.norm(fb, axis=1)
        denom = na[:, None] * nb[None, :]
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = (fa @ fb.T) / denom
        cos = np.where(denom == 0.0, 0.0, cos)
        values = np.maximum(1.0 - cos, 0.0)
    same_rows = a is b or (
        DistanceMatrix._ids_equal(a.indices, b.indices)
        and a.features.shape == b.features.shape
        and np.array_equal(a.features, b.features)
    )
    if same_rows:
        np.fill_diagonal(values, 0.0)
    return DistanceMatrix(values.astype(np.float32), a.indices, b.indices)


def _validate_eval_ids(pids: np.ndarray, camids: np.ndarray, what: str) -> None:
    if np.any(pids < 0):
        raise ValueError("%s metadata contains pid=-1; evaluation needs labeled samples" % what)
    if np.any(camids < 0):
        raise ValueError("%s metadata contains a negative camera id" % what)


def evaluate(dist: DistanceMatrix, q_pids, q_camids, g_pids, g_camids) -> EvalReport:
    """mAP/CMC of a query x gallery distance matrix under the junk filter.

    Ranking ties are broken by ascending gallery position (stable sort).
    """
    q_pids = np.asarray(q_pids, dtype=np.int64)
    q_camids = np.asarray(q_camids, dtype=np.int64)
    g_pids = np.asarray(g_pids, dtype=np.int64)
    g_camids = np.asarray(g_camids, dtype=np.int64)
    nq, ng = dist.shape
    if q_pids.shape != (nq,) or q_camids.shape != (nq,):
        raise ValueError("query metadata length does not match the distance matrix")
    if g_pids.shape != (ng,) or g_camids.shape != (ng,):
        raise ValueError("gallery metadata length does not match the distance matrix")
    _validate_eval_ids(q_pids, q_camids, "query")
    _validate_eval_ids(g_pids, g_camids, "gallery")

    order = np.argsort(dist.values, axis=1, kind="stable")
    per_query_ap = []
    excluded = []
    first_hit_counts = np.zeros(ng, dtype=np.int64)
    for qi in range(nq):
        ranked = order[qi]
        junk = (g_pids[ranked] == q_pids[qi]) & (g_camids[ranked] == q_camids[qi])
        kept = ranked[~junk]
        rel = g_pids[kept] == q_pids[qi]
        n_rel = int(rel.sum())
        qid = int(dist.row_ids[qi])
        if n_rel == 0:
            excluded.append(qid)
            continue
        hits = np.nonzero(rel)[0]  # 0-based ranks of relevant items
        precision_at_hit = (np.arange(1, n_rel + 1, dtype=np.float64)) / (hits + 1)
        per_query_ap.append((qid, float(precision_at_hit.mean())))
        first_hit_counts[hits[0]] += 1

    n_scored = len(per_query_ap)
    if n_scored == 0:
        cmc = np.zeros(ng, dtype=np.float64)
        mean_ap = 0.0
    else:
        cmc = np.cumsum(first_hit_counts).astype(np.float64) / n_scored
        mean_ap = float(np.mean([ap for _, ap in per_query_ap]))
    return EvalReport(map=mean_ap, cmc=cmc, per_query_ap=per_query_ap, excluded_queries=excluded)


def evaluate_sets(dist: DistanceMatrix, query: EmbeddingSet, gallery: EmbeddingSet) -> EvalReport:
    """evaluate() pulling pids/camids from two embedding sets."""
    return evaluate(dist, query.pids, query.camids, gallery.pids, gallery.camids)


def fuse_distances(mats, spec: FusionSpec) -> DistanceMatrix:
    """Weighted sum of distance matrices, weights normalized by their total.

    minmax normalization maps each input to [0, 1] by its own global
    min/max before weighting; a constant input maps to all-zeros.
    """
    mats = list(mats)
    if not mats:
        raise ValueError("fuse_distances needs at least one input matrix")
    if len(spec.weights) != len(mats):
        raise ValueError("got %d weights for %d matrices" % (len(spec.weights), len(mats)))
    first = mats[0]
    for m in mats[1:]:
        if m.shape != first.shape:
            raise ValueError("shape mismatch: %r vs %r" % (m.shape, first.shape))
        if not np.all(m.row_ids == first.row_ids) or not np.all(m.col_ids == first.col_ids):
            raise ValueError("fused matrices must share row/col ids")

    total = sum(spec.weights)
    acc = np.zeros(first.shape, dtype=np.float64)
    for m, w in zip(mats, spec.weights):
        values = m.values.astype(np.float64)
        if spec.normalize == "minmax":
            lo, hi = values.min(), values.max()
            values = np.zeros_like(values) if hi == lo else (values - lo) / (hi - lo)
        acc += w * values
    return DistanceMatrix((acc / total).astype(np.float32), first.row_ids, first.col_ids)
