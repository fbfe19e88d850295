"""
Average-linkage agglomerative clustering of unit-norm embeddings under
cosine distance, with hard cannot-link constraints.
"""
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Sequence, Set, Tuple

import numpy as np

from diarization.formats import Source, dump_json_records, iter_json_records, require
from diarization.tracker import FaceTrack, tracks_overlap_in_time
from utils.exceptions import ValidationError
from utils.logger import get_logger

logger = get_logger(__name__)

UNIT_NORM_TOLERANCE = 1e-6


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - <a, b> for unit-norm vectors, clipped to [0, 2]."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValidationError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.clip(1.0 - np.dot(a, b), 0.0, 2.0))


def cosine_distance_matrix(vectors: np.ndarray) -> np.ndarray:
    distances = np.clip(1.0 - vectors @ vectors.T, 0.0, 2.0)
    np.fill_diagonal(distances, 0.0)
    return distances


@dataclass(frozen=True, eq=False)
class ClusterInput:
    items: Tuple[Tuple[str, np.ndarray], ...]
    cannot_link: FrozenSet[FrozenSet[str]] = frozenset()
    stop_threshold: float = 0.5

    def __post_init__(self) -> None:
        items = tuple((str(i), np.asarray(v, dtype=float)) for i, v in self.items)
        object.__setattr__(self, "items", items)
        object.__setattr__(
            self, "cannot_link", frozenset(frozenset(p) for p in self.cannot_link)
        )
        ids = [i for i, _ in items]
        if len(set(ids)) != len(ids):
            raise ValidationError("cluster item ids must be unique")
        if len({v.shape for _, v in items}) > 1:
            raise ValidationError("all cluster vectors must share one dimension")
        for item_id, vector in items:
            if abs(float(np.linalg.norm(vector)) - 1.0) > UNIT_NORM_TOLERANCE:
                raise ValidationError(f"vector of '{item_id}' is not unit-norm")
        known = set(ids)
        for pair in self.cannot_link:
            if len(pair) != 2:
                raise ValidationError(f"cannot-link pair must name two distinct ids: {sorted(pair)}")
            if not pair <= known:
                raise ValidationError(f"cannot-link pair references unknown ids: {sorted(pair - known)}")
        if not 0.0 <= self.stop_threshold <= 2.0:
            raise ValidationError(f"stop_threshold must be in [0, 2], got {self.stop_threshold}")


@dataclass(frozen=True)
class Partition:
    """Item id -> cluster label ("0", "1", ...)."""

    assignment: Dict[str, str] = field(default_factory=dict)

    def clusters(self) -> Dict[str, List[str]]:
        grouped: Dict[str, List[str]] = {}
        for item_id in sorted(self.assignment):
            grouped.setdefault(self.assignment[item_id], []).append(item_id)
        return dict(sorted(grouped.items(), key=lambda kv: int(kv[0])))

    @property
    def n_clusters(self) -> int:
        return len(set(self.assignment.values()))

    def __getitem__(self, item_id: str) -> str:
        return self.assignment[item_id]

    def __contains__(self, item_id: object) -> bool:
        return item_id in self.assignment


def ahc_constrained(cluster_input: ClusterInput) -> Partition:
    """
    Cluster with average linkage, never merging across a cannot-link pair.

    Merges the admissible cluster pair of smallest average cosine distance
    until that distance exceeds ``stop_threshold`` or no admissible pair
    remains. Ties go to the pair whose smallest member ids sort first.
    Constraints propagate: a merged cluster inherits its members' pairs.

    Args:
        cluster_input: Items, constraints and stopping threshold

    Returns:
        Partition with labels numbered by each cluster's smallest id
    """
    ordered = sorted(cluster_input.items, key=lambda item: item[0])
    ids = [item_id for item_id, _ in ordered]
    n = len(ids)
    if n == 0:
        return Partition({})

    vectors = np.vstack([v for _, v in ordered])
    sums = cosine_distance_matrix(vectors)
    sizes = np.ones(n)
    position = {item_id: k for k, item_id in enumerate(ids)}
    forbidden = np.zeros((n, n), dtype=bool)
    for pair in cluster_input.cannot_link:
        a, b = (position[i] for i in pair)
        forbidden[a, b] = forbidden[b, a] = True

    members: List[List[int]] = [[k] for k in range(n)]
    active = np.ones(n, dtype=bool)
    merges = 0
    while True:
        idx = np.flatnonzero(active)
        m = len(idx)
        if m < 2:
            break
        linkage = sums[np.ix_(idx, idx)] / np.outer(sizes[idx], sizes[idx])
        admissible = np.triu(np.ones((m, m), dtype=bool), k=1) & ~forbidden[np.ix_(idx, idx)]
        if not admissible.any():
            break
        candidates = np.where(admissible, linkage, np.inf)
        a, b = divmod(int(np.argmin(candidates)), m)
        if candidates[a, b] > cluster_input.stop_threshold:
            break
        i, j = int(idx[a]), int(idx[b])
        sums[i, :] += sums[j, :]
        sums[:, i] = sums[i, :]
        sizes[i] += sizes[j]
        forbidden[i, :] |= forbidden[j, :]
        forbidden[:, i] = forbidden[i, :]
        active[j] = False
        members[i].extend(members[j])
        merges += 1

    assignment: Dict[str, str] = {}
    for label, slot in enumerate(np.flatnonzero(active)):
        for k in members[slot]:
            assignment[ids[k]] = str(label)
    logger.debug(f"AHC: {n} items, {merges} merges, {n - merges} clusters")
    return Partition(assignment)


def cannot_link_violations(partition: Partition, cannot_link: Iterable[FrozenSet[str]]) -> List[Tuple[str, str]]:
    """Cannot-link pairs that ended up in one cluster."""
    violations = []
    for pair in cannot_link:
        a, b = sorted(pair)
        if partition.assignment.get(a) is not None and partition.assignment.get(a) == partition.assignment.get(b):
            violations.append((a, b))
    return sorted(violations)


def cannot_link_pairs(tracks: Sequence[FaceTrack]) -> Set[FrozenSet[str]]:
    """All pairs of tracks that share at least one millisecond."""
    ordered = sorted(tracks, key=lambda t: t.interval.onset_ms)
    pairs: Set[FrozenSet[str]] = set()
    for k, a in enumerate(ordered):
        for b in ordered[k + 1:]:
            if b.interval.onset_ms >= a.interval.offset_ms:
                break
            if tracks_overlap_in_time(a, b):
                pairs.add(frozenset((a.track_id, b.track_id)))
    return pairs


def cluster_tracks(tracks: Sequence[FaceTrack], threshold: float) -> Partition:
    """Cluster tracks that carry embeddings; overlapping tracks never share a cluster."""
    embedded = [t for t in tracks if t.embedding is not None]
    cluster_input = ClusterInput(
        items=tuple((t.track_id, t.embedding) for t in embedded),
        cannot_link=frozenset(cannot_link_pairs(embedded)),
        stop_threshold=threshold,
    )
    partition = ahc_constrained(cluster_input)
    logger.info(
        f"Clustered {len(embedded)} face tracks into {partition.n_clusters} identities "
        f"({len(cluster_input.cannot_link)} cannot-link pairs)"
    )
    return partition


def write_partition(partition: Partition) -> str:
    return dump_json_records(
        {"item_id": item_id, "cluster": partition.assignment[item_id]}
        for item_id in sorted(partition.assignment)
    )


def read_partition(lines: Source) -> Partition:
    assignment = {}
    for number, obj in iter_json_records(lines):
        assignment[require(obj, "item_id", str, number)] = require(obj, "cluster", str, number)
    return Partition(assignment)
