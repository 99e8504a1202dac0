"""Pair mining over feature vectors: coarse K-means, then a two-turn
union-find aggregation inside each coarse cluster, then pair harvesting
and band filtering.

Turn 1 links items by their primary (semantic) feature; turn 2 runs
strictly inside each turn-1 set with a task-specific score, so membership
never crosses a turn-1 boundary.  All thresholds are explicit Band
objects because the reference pipelines mix strict and inclusive bounds.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np


class PairingError(ValueError):
    pass


@dataclass(frozen=True)
class Band:
    """Similarity interval with explicit bound inclusivity."""

    lo: Optional[float] = None
    hi: Optional[float] = None
    lo_inclusive: bool = False
    hi_inclusive: bool = False

    def contains(self, score: float) -> bool:
        if self.lo is not None:
            if self.lo_inclusive:
                if score < self.lo:
                    return False
            elif score <= self.lo:
                return False
        if self.hi is not None:
            if self.hi_inclusive:
                if score > self.hi:
                    return False
            elif score >= self.hi:
                return False
        return True


# linking band for near-duplicate faces: strictly between 0.8 and 0.9 so
# perfectly identical images are not grouped
FACE_LINK_BAND = Band(lo=0.8, hi=0.9)
# style clustering threshold: 0.65 and above are linked
STYLE_LINK_BAND = Band(lo=0.65, lo_inclusive=True)
# keep filter for aligned face pairs: strictly exceeding 0.65
FACE_KEEP_BAND = Band(lo=0.65)


@dataclass
class FeatureRecord:
    item_id: int
    feature: np.ndarray
    task_feature: Optional[np.ndarray] = None

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.float32)
        norm = float(np.linalg.norm(self.feature))
        if abs(norm - 1.0) > 1e-5:
            raise PairingError(f"feature of item {self.item_id} has norm {norm}, expected 1")
        if self.task_feature is not None:
            self.task_feature = np.asarray(self.task_feature, dtype=np.float32)
            norm = float(np.linalg.norm(self.task_feature))
            if abs(norm - 1.0) > 1e-5:
                raise PairingError(
                    f"task feature of item {self.item_id} has norm {norm}, expected 1"
                )


class DisjointSetForest:
    """Union by rank with path compression over ids 0..n-1."""

    def __init__(self, count: int):
        self.parent = list(range(count))
        self.rank = [0] * count

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1

    def sets(self) -> list[list[int]]:
        groups: dict[int, list[int]] = {}
        for x in range(len(self.parent)):
            groups.setdefault(self.find(x), []).append(x)
        return [sorted(members) for _, members in sorted(groups.items())]


# -- coarse clustering -------------------------------------------------------


def kmeans(
    features: np.ndarray, k: int, seed: int = 0, max_iters: int = 50
) -> tuple[np.ndarray, np.ndarray]:
    """K-means with k-means++ seeding on unit vectors.

    Returns (assignment, centers).  Empty clusters are re-seeded from the
    point farthest from its assigned center.  Deterministic for a fixed
    seed.
    """
    points = np.asarray(features, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise PairingError(f"k={k} must be in [1, {n}]")
    rng = np.random.default_rng(seed)

    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    closest = np.full(n, np.inf)
    for i in range(1, k):
        dist = ((points - centers[i - 1]) ** 2).sum(axis=1)
        closest = np.minimum(closest, dist)
        total = closest.sum()
        if total <= 0:
            centers[i] = points[rng.integers(n)]
            continue
        centers[i] = points[rng.choice(n, p=closest / total)]

    assignment = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assignment = d2.argmin(axis=1)
        for c in range(k):
            members = new_assignment == c
            if members.any():
                centers[c] = points[members].mean(axis=0)
            else:
                worst = int(d2[np.arange(n), new_assignment].argmax())
                centers[c] = points[worst]
                new_assignment[worst] = c
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
    return assignment, centers


# -- fine aggregation --------------------------------------------------------


def union_find_pass(
    members: Sequence[int],
    similarity: Callable[[int, int], float],
    link: Callable[[float], bool],
) -> DisjointSetForest:
    """Union every member pair whose similarity satisfies the predicate;
    the resulting sets are the transitive closure of the link relation."""
    forest = DisjointSetForest(len(members))
    for i in range(len(members)):
        for j in range(i + 1, len(members)):
            if link(similarity(members[i], members[j])):
                forest.union(i, j)
    return forest


@dataclass(frozen=True)
class Cluster:
    cluster_id: int
    members: tuple[int, ...]          # item ids
    coarse_id: int
    turn1_id: int
    turn2_id: int


@dataclass(frozen=True)
class ClusterSet:
    clusters: tuple[Cluster, ...]

    def __post_init__(self):
        seen: set[int] = set()
        for cluster in self.clusters:
            overlap = seen.intersection(cluster.members)
            if overlap:
                raise PairingError(f"items {sorted(overlap)} appear in multiple clusters")
            seen.update(cluster.members)

    @property
    def item_count(self) -> int:
        return sum(len(c.members) for c in self.clusters)

    def membership(self) -> dict[int, int]:
        return {item: c.cluster_id for c in self.clusters for item in c.members}


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b))


def aggregate_cluster(
    records: Sequence[FeatureRecord],
    coarse_id: int,
    turn1_band: Band,
    turn2_band: Optional[Band],
    turn2_similarity: Optional[Callable[[FeatureRecord, FeatureRecord], float]] = None,
) -> list[tuple[int, int, tuple[int, ...]]]:
    """Two union-find turns inside one coarse cluster.

    Returns (turn1 set index, turn2 set index, item ids) triples; the
    second turn partitions each first-turn set, never merging across them.
    """
    ids = [r.item_id for r in records]
    by_pos = {i: r for i, r in enumerate(records)}
    turn1 = union_find_pass(
        list(range(len(records))),
        lambda i, j: _cosine(by_pos[i].feature, by_pos[j].feature),
        turn1_band.contains,
    )
    out = []
    for t1_idx, group in enumerate(turn1.sets()):
        if turn2_band is None:
            out.append((t1_idx, 0, tuple(sorted(ids[p] for p in group))))
            continue
        sim = turn2_similarity or (
            lambda a, b: _cosine(
                a.task_feature if a.task_feature is not None else a.feature,
                b.task_feature if b.task_feature is not None else b.feature,
            )
        )
        turn2 = union_find_pass(
            list(range(len(group))),
            lambda i, j: sim(by_pos[group[i]], by_pos[group[j]]),
            turn2_band.contains,
        )
        for t2_idx, sub in enumerate(turn2.sets()):
            out.append((t1_idx, t2_idx, tuple(sorted(ids[group[p]] for p in sub))))
    return out


def two_turn_aggregate(
    records: Sequence[FeatureRecord],
    k: int,
    seed: int = 0,
    turn1_band: Band = STYLE_LINK_BAND,
    turn2_band: Optional[Band] = None,
    turn2_similarity: Optional[Callable[[FeatureRecord, FeatureRecord], float]] = None,
    threads: int = 1,
    max_iters: int = 50,
) -> ClusterSet:
    """Coarse K-means, then per-cluster two-turn union-find.

    Coarse clusters are processed in parallel; output ordering and content
    are independent of the worker count.
    """
    if not records:
        return ClusterSet(clusters=())
    features = np.stack([r.feature for r in records])
    assignment, _ = kmeans(features, k, seed=seed, max_iters=max_iters)
    buckets: dict[int, list[FeatureRecord]] = {}
    for rec, coarse in zip(records, assignment):
        buckets.setdefault(int(coarse), []).append(rec)

    def work(item):
        coarse_id, members = item
        return coarse_id, aggregate_cluster(
            members, coarse_id, turn1_band, turn2_band, turn2_similarity
        )

    ordered = sorted(buckets.items())
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, ordered))
    else:
        results = [work(item) for item in ordered]
    results.sort(key=lambda r: r[0])

    clusters = []
    next_id = 0
    for coarse_id, groups in results:
        for t1_idx, t2_idx, members in groups:
            clusters.append(
                Cluster(
                    cluster_id=next_id,
                    members=members,
                    coarse_id=coarse_id,
                    turn1_id=t1_idx,
                    turn2_id=t2_idx,
                )
            )
            next_id += 1
    return ClusterSet(clusters=tuple(clusters))


# -- pair harvesting and filtering -------------------------------------------


def harvest_pairs(members: Sequence[int], ordered: bool = False) -> list[tuple[int, int]]:
    """All unordered pairs of a disjoint set (both directions if ordered)."""
    items = sorted(members)
    pairs = [(a, b) for i, a in enumerate(items) for b in items[i + 1 :]]
    if ordered:
        pairs = pairs + [(b, a) for a, b in pairs]
    return pairs


def harvest_all(clusters: ClusterSet, ordered: bool = False) -> list[tuple[int, int]]:
    out: list[tuple[int, int]] = []
    for cluster in clusters.clusters:
        if len(cluster.members) >= 2:
            out.extend(harvest_pairs(cluster.members, ordered=ordered))
    return out


def filter_pairs(
    pairs: Sequence[tuple[int, int]],
    score: Callable[[int, int], float],
    band: Band,
) -> list[tuple[int, int]]:
    """Keep pairs whose score falls inside the band; input order is kept."""
    return [p for p in pairs if band.contains(score(p[0], p[1]))]


# -- feature file and synthetic ground truth ----------------------------------


def save_features(path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise PairingError("feature matrix must be (count, dim)")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def load_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise PairingError("feature file too short")
    count, dim = struct.unpack_from("<II", raw, 0)
    expected = 8 + count * dim * 4
    if len(raw) != expected:
        raise PairingError(f"feature file holds {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4", offset=8).reshape(count, dim).copy()


def planted_features(
    n_clusters: int,
    per_cluster: int,
    dim: int = 16,
    seed: int = 0,
    spread: float = 0.05,
) -> tuple[np.ndarray, list[list[int]]]:
    """Unit features in tight planted clusters with far-apart centers.

    Returns (features, ground-truth member lists).  Within-cluster
    cosines stay near 1 and across-cluster cosines near 0, so mining
    should recover the plant exactly.
    """
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_clusters, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    # push centers apart until pairwise |cosine| is small
    for _ in range(200):
        gram = centers @ centers.T
        np.fill_diagonal(gram, 0.0)
        if np.abs(gram).max() < 0.35:
            break
        worst = np.unravel_index(np.abs(gram).argmax(), gram.shape)
        centers[worst[0]] = rng.standard_normal(dim)
        centers[worst[0]] /= np.linalg.norm(centers[worst[0]])
    features = []
    truth = []
    item = 0
    for c in range(n_clusters):
        group = []
        for _ in range(per_cluster):
            v = centers[c] + spread * rng.standard_normal(dim)
            v /= np.linalg.norm(v)
            features.append(v)
            group.append(item)
            item += 1
        truth.append(group)
    return np.asarray(features, dtype=np.float32), truth
