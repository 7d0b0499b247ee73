"""k-reciprocal re-ranking of a query-gallery distance matrix.

Given a self-distance matrix over query + gallery, each point gets an
expanded reciprocal neighborhood, a Gaussian-kernel membership vector over
it (row-normalized), and a locally query-expanded version of that vector.
The refined distance mixes the original distance with the Jaccard distance
between membership vectors:

    d*(q, g) = lambda * d_orig(q, g) + (1 - lambda) * d_J(q, g)
    d_J(p, g) = 1 - sum_j min(V[p][j], V[g][j]) / sum_j max(V[p][j], V[g][j])

Inside the pipeline, neighbor lists are sorted-row prefixes that include the
anchor point itself (rank 0 is the point's own zero distance). This is what
makes membership vectors of duplicate points identical, so an exact copy of
a query always ranks first. The standalone k_reciprocal_neighbors helper
follows the conventional set definition instead, which excludes self.
"""

from dataclasses import dataclass

import numpy as np

from .store import DistanceMatrix


@dataclass(frozen=True)
class RerankParams:
    k1: int = 20
    k2: int = 6
    lam: float = 0.3

    def __post_init__(self):
        if self.k1 < 1 or self.k2 < 1 or self.k2 > self.k1:
            raise ValueError("need 1 <= k2 <= k1, got k1=%d k2=%d" % (self.k1, self.k2))
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1], got %r" % (self.lam,))


def k_reciprocal_neighbors(dist: DistanceMatrix, i: int, k1: int) -> np.ndarray:
    """R(i, k1) = {j in N(i, k1) : i in N(j, k1)} with self excluded from N.

    N(., k1) is the k1-nearest-neighbor list by distance, ties broken by
    ascending index. Returns the member indices in ascending order.
    """
    d = dist.values
    n = d.shape[0]
    if not dist.is_self:
        raise ValueError("k-reciprocal neighbors need a self-distance matrix")
    if not 0 <= i < n:
        raise IndexError("index %d out of range for %d points" % (i, n))
    if k1 < 1 or k1 >= n:
        raise ValueError("need 1 <= k1 < n, got k1=%d n=%d" % (k1, n))

    def knn(p: int) -> np.ndarray:
        order = np.argsort(d[p], kind="stable")
        return order[order != p][:k1]

    members = [int(j) for j in knn(i) if i in knn(int(j))]
    return np.asarray(sorted(members), dtype=np.int64)


def _prefix_reciprocal(rank: np.ndarray, in_prefix: np.ndarray, k: int):
    """Self-inclusive reciprocal sets R+(i,k) from sorted-row prefixes."""
    n = rank.shape[0]
    prefix = rank[:, : k + 1]
    return [prefix[i][in_prefix[prefix[i], i]] for i in range(n)]


def rerank_values(dist_all: np.ndarray, n_query: int, k1: int, k2: int, lam: float) -> np.ndarray:
    """Re-ranked query x gallery block of a raw self-distance array (float64).

    Exposed separately from rerank() so the pipeline can run it on
    internally assembled union matrices.
    """
    d = np.asarray(dist_all, dtype=np.float64)
    n = d.shape[0]
    if d.shape != (n, n):
        raise ValueError("dist_all must be square")
    if not 1 <= n_query < n:
        raise ValueError("need 1 <= n_query < n, got n_query=%d n=%d" % (n_query, n))
    if k1 >= n:
        raise ValueError("k1=%d needs more than k1 points, got n=%d" % (k1, n))

    V = _membership_vectors(d, k1, k2)
    row_sums = V.sum(axis=1)
    gal = V[n_query:]
    gal_sums = row_sums[n_query:]
    jaccard = np.empty((n_query, n - n_query), dtype=np.float64)
    for qi in range(n_query):
        overlap = np.minimum(V[qi][None, :], gal).sum(axis=1)
        union = row_sums[qi] + gal_sums - overlap
        jaccard[qi] = 1.0 - overlap / union
    return lam * d[:n_query, n_query:] + (1.0 - lam) * jaccard


def _membership_vectors(d: np.ndarray, k1: int, k2: int) -> np.ndarray:
    """Locally expanded membership vectors V for every row of a square d.

    Neighbor lists are sorted-row prefixes (self included). Expansion pulls
    in R+(q, k1/2) of every q in R+(i, k1) whose half-set overlaps
    R+(i, k1) by at least two thirds of its own size. Rows are Gaussian
    kernel weights exp(-d) normalized to sum 1, then averaged over each
    point's k2 nearest rows.
    """
    n = d.shape[0]
    rank = np.argsort(d, axis=1, kind="stable")
    rows = np.arange(n)[:, None]
    in_k1 = np.zeros((n, n), dtype=bool)
    in_k1[rows, rank[:, : k1 + 1]] = True
    k1h = max(k1 // 2, 1)
    in_k1h = np.zeros((n, n), dtype=bool)
    in_k1h[rows, rank[:, : k1h + 1]] = True

    recip = _prefix_reciprocal(rank, in_k1, k1)
    recip_half = _prefix_reciprocal(rank, in_k1h, k1h)

    V = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        base = recip[i]
        base_set = set(base.tolist())
        parts = [base]
        for q in base:
            cand = recip_half[q]
            overlap = sum(1 for x in cand.tolist() if x in base_set)
            if 3 * overlap >= 2 * len(cand):
                parts.append(cand)
        members = np.unique(np.concatenate(parts))
        if members.size == 0:
            # Mass ties can push i out of every prefix; fall back to its own
            # k1+1 nearest so the membership row stays a distribution.
            members = np.unique(rank[i, : k1 + 1])
        w = np.exp(-d[i, members])
        V[i, members] = w / w.sum()

    if k2 > 1:
        expanded = np.zeros_like(V)
        for t in range(k2):
            expanded += V[rank[:, t]]
        V = expanded / k2
    return V


def rerank_self(dist_all: np.ndarray, k1: int, k2: int, lam: float) -> np.ndarray:
    """Full n x n Jaccard-mixed distance over one sample set (float64).

    Every point acts as both query and gallery; the result is symmetric
    with a zero diagonal, suitable as a clustering distance.
    """
    d = np.asarray(dist_all, dtype=np.float64)
    n = d.shape[0]
    if d.shape != (n, n):
        raise ValueError("dist_all must be square")
    if k1 >= n:
        raise ValueError("k1=%d needs more than k1 points, got n=%d" % (k1, n))
    V = _membership_vectors(d, k1, k2)
    sums = V.sum(axis=1)
    jaccard = np.empty((n, n), dtype=np.float64)
    for i in range(n):
        overlap = np.minimum(V[i][None, :], V).sum(axis=1)
        jaccard[i] = 1.0 - overlap / (sums[i] + sums - overlap)
    np.fill_diagonal(jaccard, 0.0)
    return lam * d + (1.0 - lam) * jaccard


def rerank(dist_all: DistanceMatrix, n_query: int, params: RerankParams) -> DistanceMatrix:
    """Re-rank a self-distance matrix whose first n_query rows are queries.

    Returns the refined n_query x n_gallery matrix. lambda=1 reproduces the
    original query-gallery block bitwise.
    """
    if not dist_all.is_self:
        raise ValueError("rerank needs a self-distance matrix over query+gallery")
    n = dist_all.shape[0]
    if n_query >= n:
        raise ValueError("n_query=%d must be smaller than the matrix size %d" % (n_query, n))
    if params.k1 >= n:
        raise ValueError("k1=%d must be smaller than the matrix size %d" % (params.k1, n))
    values = rerank_values(dist_all.values, n_query, params.k1, params.k2, params.lam)
    return DistanceMatrix(
        values.astype(np.float32), dist_all.row_ids[:n_query], dist_all.col_ids[n_query:]
    )
