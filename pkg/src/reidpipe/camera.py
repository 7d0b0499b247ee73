"""Camera bias elimination in feature space and on distance matrices.

Four treatments, composable and individually disableable:

  * per-camera feature mean subtraction,
  * nearest-neighbor feature smoothing,
  * subtraction of a camera-feature distance matrix at a rate,
  * multiplicative weighting by a cross-camera co-occurrence topology.

Distances produced by subtraction or weighting are clamped at zero so the
results stay valid distance matrices.
"""

from dataclasses import dataclass

import numpy as np

from .store import DistanceMatrix, EmbeddingSet


@dataclass(frozen=True)
class CameraFixParams:
    """neighbor_k=0 disables smoothing; cam_dist_rate/topology_alpha=0 disable
    the distance-level treatments."""

    neighbor_k: int = 0
    cam_dist_rate: float = 0.0
    topology_alpha: float = 0.0

    def __post_init__(self):
        if self.neighbor_k < 0:
            raise ValueError("neighbor_k must be >= 0")
        if self.cam_dist_rate < 0:
            raise ValueError("cam_dist_rate must be >= 0")


class CameraTopology:
    """C x C matrix; prob[a][b] estimates P(identity seen under b | seen under a)."""

    def __init__(self, prob: np.ndarray):
        prob = np.ascontiguousarray(prob, dtype=np.float64)
        if prob.ndim != 2 or prob.shape[0] != prob.shape[1]:
            raise ValueError("topology must be a square matrix")
        if prob.size and (prob.min() < 0.0 or prob.max() > 1.0):
            raise ValueError("topology entries must lie in [0, 1]")
        prob.setflags(write=False)
        self.prob = prob

    @property
    def n_cameras(self) -> int:
        return self.prob.shape[0]


def subtract_camera_mean(es: EmbeddingSet) -> EmbeddingSet:
    """Subtract from each row the mean feature of its camera.

    Means are taken over all provided rows of the camera (query and gallery
    jointly when applied to a test set).
    """
    feats = es.features.astype(np.float64)
    out = feats.copy()
    for cam in np.unique(es.camids):
        mask = es.camids == cam
        out[mask] -= feats[mask].mean(axis=0)
    return es.with_features(out.astype(np.float32))


def neighbor_smooth(es: EmbeddingSet, k: int) -> EmbeddingSet:
    """Replace each row by the mean of itself and its k nearest neighbors.

    Neighbors are found by Euclidean distance over the input rows (self
    excluded, ties by ascending row position) and every lookup reads the
    input features, so the result does not depend on row update order.
    k=0 returns the set unchanged.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return es
    if k >= es.n:
        raise ValueError("k=%d needs at least k+1 rows, got %d" % (k, es.n))
    feats = es.features.astype(np.float64)
    sq = (feats * feats).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (feats @ feats.T)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    out = (feats + feats[order].sum(axis=1)) / (k + 1)
    return es.with_features(out.astype(np.float32))


def mean_camera_distance(mats) -> DistanceMatrix:
    """Entrywise arithmetic mean of distance matrices with identical ids."""
    mats = list(mats)
    if not mats:
        raise ValueError("mean_camera_distance needs at least one matrix")
    first = mats[0]
    acc = np.zeros(first.shape, dtype=np.float64)
    for m in mats:
        if m.shape != first.shape:
            raise ValueError("shape mismatch: %r vs %r" % (m.shape, first.shape))
        if not np.all(m.row_ids == first.row_ids) or not np.all(m.col_ids == first.col_ids):
            raise ValueError("averaged matrices must share row/col ids")
        acc += m.values.astype(np.float64)
    return DistanceMatrix((acc / len(mats)).astype(np.float32), first.row_ids, first.col_ids)


def subtract_camera_distance(dist: DistanceMatrix, cam_dist: DistanceMatrix, rate: float) -> DistanceMatrix:
    """dist - rate * cam_dist, clamped entrywise at zero."""
    if rate < 0:
        raise ValueError("rate must be >= 0")
    if dist.shape != cam_dist.shape:
        raise ValueError("shape mismatch: %r vs %r" % (dist.shape, cam_dist.shape))
    if not np.all(dist.row_ids == cam_dist.row_ids) or not np.all(dist.col_ids == cam_dist.col_ids):
        raise ValueError("camera distance ids do not match the feature distance ids")
    out = np.maximum(dist.values.astype(np.float64) - rate * cam_dist.values.astype(np.float64), 0.0)
    return DistanceMatrix(out.astype(np.float32), dist.row_ids, dist.col_ids)


def build_topology(pids, camids) -> CameraTopology:
    """Estimate cross-camera co-occurrence probabilities from labeled metadata.

    prob[a][b] = |identities seen under both a and b| / |identities seen
    under a|; rows of cameras with no identities are all zero.
    """
    pids = np.asarray(pids, dtype=np.int64)
    camids = np.asarray(camids, dtype=np.int64)
    if pids.size == 0:
        raise ValueError("topology needs non-empty labeled metadata")
    if pids.shape != camids.shape:
        raise ValueError("pids and camids must have the same length")
    if np.any(pids < 0) or np.any(camids < 0):
        raise ValueError("topology needs pid >= 0 and camid >= 0 for every row")
    n_cams = int(camids.max()) + 1
    seen = [set() for _ in range(n_cams)]
    for p, c in zip(pids.tolist(), camids.tolist()):
        seen[c].add(p)
    prob = np.zeros((n_cams, n_cams), dtype=np.float64)
    for a in range(n_cams):
        if not seen[a]:
            continue
        for b in range(n_cams):
            prob[a, b] = len(seen[a] & seen[b]) / len(seen[a])
    return CameraTopology(prob)


def apply_topology(dist: DistanceMatrix, topo: CameraTopology, query_cams, gallery_cams, alpha: float) -> DistanceMatrix:
    """Scale each entry by (1 + alpha * prob[query_cam][gallery_cam]), clamped at 0.

    alpha may be negative (pull co-occurring cameras closer) or positive
    (push them apart); 0 leaves the matrix untouched.
    """
    query_cams = np.asarray(query_cams, dtype=np.int64)
    gallery_cams = np.asarray(gallery_cams, dtype=np.int64)
    nq, ng = dist.shape
    if query_cams.shape != (nq,) or gallery_cams.shape != (ng,):
        raise ValueError("camera id lists must match the distance matrix shape")
    all_cams = np.concatenate([query_cams, gallery_cams])
    if all_cams.size and (all_cams.min() < 0 or all_cams.max() >= topo.n_cameras):
        raise ValueError("camera id out of range for a %d-camera topology" % topo.n_cameras)
    factor = 1.0 + alpha * topo.prob[query_cams[:, None], gallery_cams[None, :]]
    out = np.maximum(dist.values.astype(np.float64) * factor, 0.0)
    return DistanceMatrix(out.astype(np.float32), dist.row_ids, dist.col_ids)
