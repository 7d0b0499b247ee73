"""DBSCAN over a precomputed distance matrix and two-stage pseudo-labels.

Stage one keeps the n_keep largest clusters as training classes and
discards the rest. Stage two promotes the most isolated outliers to
single-sample classes that participate in training only as negatives
(their `negatives_only` flag is consumed by the triplet mining in
trainmath).
"""

import csv
from dataclasses import dataclass

import numpy as np

from .store import DistanceMatrix

OUTLIER = -1
NONE_CLASS = -1


@dataclass(frozen=True)
class DbscanParams:
    eps: float
    min_samples: int

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.min_samples < 1:
            raise ValueError("min_samples must be >= 1")


@dataclass
class PseudoLabeling:
    """Per-sample class assignment (NONE_CLASS = unassigned) plus per-class
    negatives-only flags."""

    assignment: np.ndarray
    negatives_only: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        self.negatives_only = np.asarray(self.negatives_only, dtype=bool)
        if self.negatives_only.shape != (self.n_classes,):
            raise ValueError("negatives_only must have one flag per class")
        assigned = self.assignment[self.assignment != NONE_CLASS]
        if assigned.size and (assigned.min() < 0 or assigned.max() >= self.n_classes):
            raise ValueError("class ids must be contiguous in [0, n_classes)")
        counts = np.bincount(assigned, minlength=self.n_classes)
        if self.n_classes and counts.min() < 1:
            raise ValueError("every class needs at least one sample")
        if np.any(self.negatives_only & (counts != 1)):
            raise ValueError("negatives-only classes must have exactly one sample")

    def class_sizes(self) -> np.ndarray:
        assigned = self.assignment[self.assignment != NONE_CLASS]
        return np.bincount(assigned, minlength=self.n_classes)

    def sample_flags(self) -> np.ndarray:
        """negatives_only flag per sample (False for unassigned rows)."""
        flags = np.zeros(self.assignment.shape[0], dtype=bool)
        mask = self.assignment != NONE_CLASS
        flags[mask] = self.negatives_only[self.assignment[mask]]
        return flags


def dbscan(dist: DistanceMatrix, params: DbscanParams) -> np.ndarray:
    """Standard DBSCAN over precomputed distances; returns labels (-1 = outlier).

    Core points have >= min_samples points (self included) within eps.
    Clusters are the connected components of core points under <= eps
    reachability, ids assigned in order of first discovery while scanning
    indices in ascending order. Border points attach to the cluster of the
    smallest-index core point within eps.
    """
    if not dist.is_self:
        raise ValueError("dbscan requires a self-distance matrix")
    d = dist.values
    n = d.shape[0]
    within = d <= params.eps
    core = within.sum(axis=1) >= params.min_samples
    labels = np.full(n, OUTLIER, dtype=np.int64)

    cluster = 0
    for i in range(n):
        if not core[i] or labels[i] != OUTLIER:
            continue
        labels[i] = cluster
        frontier = np.asarray([i])
        while frontier.size:
            reachable = within[frontier].any(axis=0) & core & (labels == OUTLIER)
            frontier = np.nonzero(reachable)[0]
            labels[frontier] = cluster
        cluster += 1

    for i in np.nonzero(~core)[0]:
        reach = np.nonzero(within[i] & core)[0]
        if reach.size:
            labels[i] = labels[reach[0]]
    return labels


def select_top_classes(labels: np.ndarray, n_keep: int) -> PseudoLabeling:
    """Keep the n_keep largest clusters as contiguous training classes.

    Kept classes are renumbered by descending size (ties by ascending
    original cluster id); all other samples become NONE_CLASS.
    """
    if n_keep < 1:
        raise ValueError("n_keep must be >= 1")
    labels = np.asarray(labels, dtype=np.int64)
    cluster_ids, counts = np.unique(labels[labels != OUTLIER], return_counts=True)
    order = np.lexsort((cluster_ids, -counts))
    kept = cluster_ids[order][:n_keep]
    remap = {int(c): rank for rank, c in enumerate(kept)}
    assignment = np.full(labels.shape[0], NONE_CLASS, dtype=np.int64)
    for i, lab in enumerate(labels.tolist()):
        if lab in remap:
            assignment[i] = remap[lab]
    n_classes = len(kept)
    return PseudoLabeling(assignment, np.zeros(n_classes, dtype=bool), n_classes)


def add_singletons(
    base: PseudoLabeling,
    labels: np.ndarray,
    dist: DistanceMatrix,
    m: int,
    include_discarded: bool = False,
) -> PseudoLabeling:
    """Promote up to m of the most isolated unassigned samples to
    single-sample negatives-only classes.

    Candidates are DBSCAN outliers (plus members of discarded clusters when
    include_discarded is set), ranked by descending distance to their
    nearest kept-class sample, ties by ascending index. Existing
    assignments are unchanged.
    """
    if m < 0:
        raise ValueError("m must be >= 0")
    labels = np.asarray(labels, dtype=np.int64)
    if not dist.is_self or dist.shape[0] != labels.shape[0]:
        raise ValueError("dist must be the self-distance matrix over the labeled samples")
    if base.assignment.shape[0] != labels.shape[0]:
        raise ValueError("base labeling does not match the label array")
    if m == 0:
        return base

    if include_discarded:
        candidates = np.nonzero(base.assignment == NONE_CLASS)[0]
    else:
        candidates = np.nonzero(labels == OUTLIER)[0]
    if candidates.size == 0:
        return base

    kept_rows = np.nonzero(base.assignment != NONE_CLASS)[0]
    if kept_rows.size:
        isolation = dist.values[np.ix_(candidates, kept_rows)].min(axis=1).astype(np.float64)
    else:
        isolation = np.zeros(candidates.shape[0], dtype=np.float64)
    order = np.lexsort((candidates, -isolation))
    chosen = candidates[order][:m]

    assignment = base.assignment.copy()
    n_new = chosen.shape[0]
    assignment[chosen] = base.n_classes + np.arange(n_new)
    negatives_only = np.concatenate([base.negatives_only, np.ones(n_new, dtype=bool)])
    return PseudoLabeling(assignment, negatives_only, base.n_classes + n_new)


def save_labels_csv(path: str, indices, labeling: PseudoLabeling) -> None:
    """Write index,class,negatives_only rows (class -1 = unassigned)."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.shape[0] != labeling.assignment.shape[0]:
        raise ValueError("index list does not match the labeling length")
    flags = labeling.sample_flags()
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["index", "class", "negatives_only"])
        for idx, cls, flag in zip(indices.tolist(), labeling.assignment.tolist(), flags.tolist()):
            w.writerow([idx, cls, int(flag)])
