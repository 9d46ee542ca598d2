"""Pivot-based refinement of global clusters against per-camera local clusters.

Within each global cluster, densely-connected members become pivots; per
camera the strongest pivot's local cluster decides which same-camera members
stay, and everything else is discarded with a probability that decays over
training so early (unreliable) merges are pruned hard and later ones kept.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .core import OUTLIER, ClusterAssignment, as_generator, pairwise_distance

_TOP_NEIGHBORS = 15


class Schedule(enum.Enum):
    NONE = "none"
    LINEAR = "linear"
    POLYNOMIAL = "polynomial"
    EXPONENTIAL = "exponential"
    COSINE = "cosine"

    @classmethod
    def from_name(cls, name: str) -> "Schedule":
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(s.value for s in cls)
            raise ValueError(f"unknown schedule {name!r}; expected one of: {valid}") from None


@dataclass(frozen=True)
class PivotScore:
    sample_id: int
    score: float
    is_pivot: bool


def pivot_scores(dist, sample_ids=None) -> list[PivotScore]:
    """Density scores for one cluster given its internal distance matrix.

    score(i) = sum over i's t nearest in-cluster neighbors of
    1 / (dist(i, j) + mean pairwise dist), t = min(15, size - 1).
    Members scoring at or above the mean score are pivots. A singleton
    cluster has no neighbors; its only member is trivially the pivot.
    """
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise ValueError("dist must be a square matrix")
    m = dist.shape[0]
    if sample_ids is None:
        sample_ids = np.arange(m)
    sample_ids = np.asarray(sample_ids, dtype=np.int64)
    if sample_ids.shape != (m,):
        raise ValueError("sample_ids length must match the distance matrix")
    if m == 1:
        return [PivotScore(int(sample_ids[0]), 0.0, True)]

    iu = np.triu_indices(m, 1)
    mean_dist = float(dist[iu].mean())
    t = min(_TOP_NEIGHBORS, m - 1)
    scores = np.empty(m)
    for i in range(m):
        row = np.delete(dist[i], i)
        nearest = np.sort(row)[:t]
        scores[i] = float(np.sum(1.0 / (nearest + mean_dist)))
    threshold = float(scores.mean())
    return [
        PivotScore(int(sid), float(sc), bool(sc >= threshold))
        for sid, sc in zip(sample_ids, scores)
    ]


def governing_pivot(pivots: list[PivotScore]) -> PivotScore:
    """Highest score wins; ties go to the smallest sample id."""
    if not pivots:
        raise ValueError("no pivots to choose from")
    return min(pivots, key=lambda p: (-p.score, p.sample_id))


def refine_cluster(member_ids, camera_of, local_label_of, pivots, p, rng):
    """Split one global cluster into (retained, discarded) sample-id arrays.

    Per camera holding at least one pivot, members sharing the governing
    pivot's local cluster always stay; the rest are discarded independently
    with probability p. Cameras without pivots keep all their members.
    """
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"discard probability must lie in [0, 1], got {p}")
    rng = as_generator(rng)
    member_ids = np.asarray(member_ids, dtype=np.int64)
    pivot_list = [pv for pv in pivots if pv.is_pivot]
    by_camera: dict[int, list[int]] = {}
    for sid in member_ids.tolist():
        by_camera.setdefault(int(camera_of[sid]), []).append(sid)

    member_set = set(member_ids.tolist())
    for pv in pivot_list:
        if pv.sample_id not in member_set:
            raise ValueError(f"pivot {pv.sample_id} is not a member of this cluster")

    retained: list[int] = []
    discarded: list[int] = []
    for cam in sorted(by_camera):
        group = sorted(by_camera[cam])
        cam_pivots = [pv for pv in pivot_list if int(camera_of[pv.sample_id]) == cam]
        if not cam_pivots:
            retained.extend(group)
            continue
        governor = governing_pivot(cam_pivots)
        keep_label = local_label_of[governor.sample_id]
        for sid in group:
            if local_label_of[sid] == keep_label:
                retained.append(sid)
            elif rng.random() < p:
                discarded.append(sid)
            else:
                retained.append(sid)
    return np.array(retained, dtype=np.int64), np.array(discarded, dtype=np.int64)


def decay_probability(schedule: Schedule, t: int, total: int, p_start: float = 1.0, p_end: float = 0.0) -> float:
    """Discard probability at epoch t of total; all schedules hit the endpoints."""
    if isinstance(schedule, str):
        schedule = Schedule.from_name(schedule)
    if t < 0 or total < 0 or t > total:
        raise ValueError(f"need 0 <= t <= total, got t={t}, total={total}")
    if not (0.0 <= p_end <= p_start <= 1.0):
        raise ValueError(f"need 0 <= p_end <= p_start <= 1, got ({p_start}, {p_end})")
    if total == 0 or schedule is Schedule.NONE:
        return p_start
    frac = t / total
    span = p_start - p_end
    if schedule is Schedule.LINEAR:
        return p_start - span * frac
    if schedule is Schedule.POLYNOMIAL:
        return p_end + span * (1.0 - frac) ** 2
    if schedule is Schedule.EXPONENTIAL:
        return p_end + span * math.exp(-5.0 * frac)
    if schedule is Schedule.COSINE:
        return p_end + 0.5 * span * (1.0 + math.cos(math.pi * frac))
    raise AssertionError(f"unhandled schedule {schedule}")


@dataclass(frozen=True, eq=False)
class RefinementPlan:
    """Bookkeeping for one refinement pass over a global assignment."""

    p: float
    discarded: np.ndarray  # sample ids removed this pass
    n_pivots: int
    n_considered: int  # non-outlier samples in the unrefined assignment
    discarded_by_camera: dict[int, int] = field(default_factory=dict)
    pivots_by_cluster: dict[int, list[PivotScore]] = field(default_factory=dict)

    @property
    def discard_ratio(self) -> float:
        return len(self.discarded) / self.n_considered if self.n_considered else 0.0


def refine_assignment(assignment: ClusterAssignment, features, camera_of, local_label_of, p, rng):
    """Refine every cluster of a global assignment; discards become OUTLIER.

    rng must be an RngState: each cluster draws from its own child stream so
    per-cluster results do not depend on processing order.
    """
    from .core import RngState

    if not isinstance(rng, RngState):
        raise TypeError("refine_assignment needs an RngState to derive per-cluster streams")
    if assignment.camera is not None:
        raise ValueError("refinement applies to global assignments only")
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"discard probability must lie in [0, 1], got {p}")
    features = np.asarray(features, dtype=np.float64)
    camera_of = np.asarray(camera_of, dtype=np.int64)
    local_label_of = np.asarray(local_label_of, dtype=np.int64)

    labels = assignment.labels.copy()
    all_discarded: list[int] = []
    by_camera: dict[int, int] = {}
    pivots_by_cluster: dict[int, list[PivotScore]] = {}
    n_pivots = 0
    for k in range(assignment.n_clusters):
        members = assignment.members(k)
        if len(members) == 1:
            pivots_by_cluster[k] = [PivotScore(int(members[0]), 0.0, True)]
            n_pivots += 1
            continue
        dist = pairwise_distance(features[members])
        pivots = pivot_scores(dist, members)
        pivots_by_cluster[k] = pivots
        n_pivots += sum(1 for pv in pivots if pv.is_pivot)
        _, discarded = refine_cluster(
            members, camera_of, local_label_of, pivots, p, rng.child("cluster", k).generator()
        )
        for sid in discarded.tolist():
            labels[sid] = OUTLIER
            by_camera[int(camera_of[sid])] = by_camera.get(int(camera_of[sid]), 0) + 1
            all_discarded.append(sid)

    refined = ClusterAssignment.from_labels(labels)
    plan = RefinementPlan(
        p=float(p),
        discarded=np.array(sorted(all_discarded), dtype=np.int64),
        n_pivots=n_pivots,
        n_considered=int(assignment.non_outlier_mask.sum()),
        discarded_by_camera=by_camera,
        pivots_by_cluster=pivots_by_cluster,
    )
    return refined, plan
