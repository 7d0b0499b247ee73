"""Framework-free training numerics.

Forward-value computations only (no autograd): label-smoothed cross
entropy, batch-hard mining with negatives-only handling, the soft-margin
triplet loss, the warmup/step-decay learning-rate schedule and the seeded
mini-batch composition policy.
"""

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .rng import SplitMix64
from .store import DistanceMatrix, EmbeddingSet


@dataclass(frozen=True)
class BatchPolicy:
    """P identities x K instances batches, single-domain per batch."""

    p_identities: int
    k_instances: int
    target_batch_ratio: float
    camstyle_ratio: float

    def __post_init__(self):
        if self.p_identities < 2 or self.k_instances < 2:
            raise ValueError("triplet mining needs P >= 2 and K >= 2")
        if not 0.0 <= self.target_batch_ratio <= 1.0:
            raise ValueError("target_batch_ratio must lie in [0, 1]")
        if not 0.0 <= self.camstyle_ratio <= 1.0:
            raise ValueError("camstyle_ratio must lie in [0, 1]")


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup from 0.1x base, then step decay (1-indexed epochs)."""

    base_lr: float = 0.02
    warmup_epochs: int = 10
    decay_epochs: tuple = (24, 48)
    decay_factor: float = 0.1
    total_epochs: int = 60

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ValueError("warmup_epochs must lie in [0, total_epochs]")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError("decay epochs must be strictly increasing")
        if self.decay_epochs and self.decay_epochs[-1] >= self.total_epochs:
            raise ValueError("decay epochs must be < total_epochs")


class HardTriplet(NamedTuple):
    anchor: int
    d_pos: float
    d_neg: float


def label_smooth_ce(logits, true_class: int, epsilon: float, n_classes: int) -> float:
    """-sum_k q_k log softmax(logits)_k with the smoothed target q.

    q places 1 - epsilon + epsilon/n_classes on the true class and
    epsilon/n_classes elsewhere. The log-softmax subtracts the max logit
    before exponentiation, so extreme logits stay finite.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (n_classes,):
        raise ValueError("expected %d logits, got shape %r" % (n_classes, logits.shape))
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("epsilon must lie in [0, 1)")
    if not 0 <= true_class < n_classes:
        raise ValueError("true_class out of range")
    shifted = logits - logits.max()
    log_probs = shifted - math.log(np.exp(shifted).sum())
    q = np.full(n_classes, epsilon / n_classes, dtype=np.float64)
    q[true_class] += 1.0 - epsilon
    return float(-(q * log_probs).sum())


def soft_margin_triplet(d_ap: float, d_an: float) -> float:
    """softplus(d_ap - d_an) = ln(1 + exp(d_ap - d_an)), overflow-safe."""
    if not (math.isfinite(d_ap) and math.isfinite(d_an)):
        raise ValueError("triplet distances must be finite")
    if d_ap < 0 or d_an < 0:
        raise ValueError("triplet distances must be >= 0")
    x = d_ap - d_an
    if x > 20.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def batch_hard_triplets(dist: DistanceMatrix, labels, negatives_only) -> list:
    """Hardest positive/negative distances per anchor within a batch.

    Anchors are exactly the samples with negatives_only=False. For anchor a,
    d_pos is the largest distance to a same-class sample (self excluded) and
    d_neg the smallest distance to a different-class sample; flagged samples
    are eligible negatives but never anchors or positives.
    """
    if not dist.is_self:
        raise ValueError("batch mining needs the self-distance matrix of the batch")
    labels = np.asarray(labels, dtype=np.int64)
    flags = np.asarray(negatives_only, dtype=bool)
    n = dist.shape[0]
    if labels.shape != (n,) or flags.shape != (n,):
        raise ValueError("labels/flags must have one entry per batch sample")
    d = dist.values.astype(np.float64)

    out = []
    for a in range(n):
        if flags[a]:
            continue
        same = (labels == labels[a]) & ~flags
        same[a] = False
        if not same.any():
            raise ValueError(
                "class %d has no positive for anchor %d (non-flagged classes need >= 2 samples)"
                % (labels[a], a)
            )
        other = labels != labels[a]
        if not other.any():
            raise ValueError("anchor %d has no negative samples in the batch" % a)
        out.append(HardTriplet(a, float(d[a, same].max()), float(d[a, other].min())))
    return out


def lr_at(epoch: int, schedule: LrSchedule) -> float:
    """Learning rate at a 1-indexed epoch.

    Warmup scales the base rate linearly from 0.1x at epoch 1 to 1x at the
    last warmup epoch; afterwards each passed decay epoch multiplies by the
    decay factor.
    """
    if not 1 <= epoch <= schedule.total_epochs:
        raise ValueError("epoch %d out of range [1, %d]" % (epoch, schedule.total_epochs))
    if epoch <= schedule.warmup_epochs:
        if schedule.warmup_epochs == 1:
            return schedule.base_lr
        frac = (epoch - 1) / (schedule.warmup_epochs - 1)
        return schedule.base_lr * (0.1 + 0.9 * frac)
    n_decays = sum(1 for e in schedule.decay_epochs if e <= epoch)
    return schedule.base_lr * schedule.decay_factor**n_decays


def _sample_without_replacement(rng: SplitMix64, pool: list, k: int) -> list:
    """Partial Fisher-Yates draw of k items, consuming exactly k uniforms."""
    arr = list(pool)
    us = rng.uniforms(k)
    for i in range(k):
        j = i + int(us[i] * (len(arr) - i))
        arr[i], arr[j] = arr[j], arr[i]
    return arr[:k]


def compose_batch(meta: EmbeddingSet, policy: BatchPolicy, seed: int) -> list:
    """Deterministically compose one P x K mini-batch; returns sample indices.

    The whole batch comes from one domain (target with probability
    target_batch_ratio), P classes drawn without replacement, K instances
    per class with the CamStyle count chosen as the closest achievable to
    camstyle_ratio * K given each class's available rows.
    """
    rng = SplitMix64(seed)
    domain = "target" if rng.uniforms(1)[0] < policy.target_batch_ratio else "source"
    in_domain = meta.domains == domain

    classes = {}
    for row in np.nonzero(in_domain)[0]:
        pid = int(meta.pids[row])
        if pid < 0:
            continue
        classes.setdefault(pid, []).append(int(row))
    k = policy.k_instances
    eligible = sorted(pid for pid, rows in classes.items() if len(rows) >= k)
    if len(eligible) < policy.p_identities:
        raise ValueError(
            "domain %r has %d classes with >= %d samples, need %d"
            % (domain, len(eligible), k, policy.p_identities)
        )

    chosen_classes = _sample_without_replacement(rng, eligible, policy.p_identities)
    want_camstyle = math.floor(policy.camstyle_ratio * k + 0.5)
    batch = []
    for pid in chosen_classes:
        rows = classes[pid]
        cam_rows = [r for r in rows if meta.camstyle[r]]
        orig_rows = [r for r in rows if not meta.camstyle[r]]
        c = min(max(want_camstyle, k - len(orig_rows)), min(k, len(cam_rows)))
        picked = _sample_without_replacement(rng, cam_rows, c)
        picked += _sample_without_replacement(rng, orig_rows, k - c)
        batch.extend(int(meta.indices[r]) for r in picked)
    return batch
