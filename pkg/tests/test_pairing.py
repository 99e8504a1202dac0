import itertools

import numpy as np
import pytest

from ctxedit.pairing import (
    Band,
    Cluster,
    ClusterSet,
    DisjointSetForest,
    FACE_KEEP_BAND,
    FACE_LINK_BAND,
    FeatureRecord,
    PairingError,
    STYLE_LINK_BAND,
    filter_pairs,
    harvest_all,
    harvest_pairs,
    kmeans,
    load_features,
    planted_features,
    save_features,
    two_turn_aggregate,
    union_find_pass,
)


def brute_force_closure(n: int, linked) -> list[list[int]]:
    """Boolean-matrix transitive closure, the slow reference."""
    adj = np.eye(n, dtype=bool)
    for i in range(n):
        for j in range(i + 1, n):
            if linked(i, j):
                adj[i, j] = adj[j, i] = True
    for _ in range(n):
        new = adj @ adj
        if (new == adj).all():
            break
        adj = new
    groups = []
    seen = set()
    for i in range(n):
        if i in seen:
            continue
        group = sorted(np.nonzero(adj[i])[0].tolist())
        seen.update(group)
        groups.append(group)
    return sorted(groups)


class TestDisjointSet:
    def test_find_is_idempotent_and_partitions(self):
        forest = DisjointSetForest(6)
        forest.union(0, 1)
        forest.union(1, 2)
        forest.union(4, 5)
        for x in range(6):
            assert forest.find(x) == forest.find(forest.find(x))
        assert forest.sets() == [[0, 1, 2], [3], [4, 5]]

    def test_union_order_does_not_matter(self):
        a = DisjointSetForest(5)
        b = DisjointSetForest(5)
        edges = [(0, 1), (2, 3), (1, 2)]
        for x, y in edges:
            a.union(x, y)
        for x, y in reversed(edges):
            b.union(y, x)
        assert a.sets() == b.sets()


class TestKMeans:
    def test_two_separated_clouds_recovered(self):
        rng = np.random.default_rng(0)
        a = rng.normal(0, 0.05, size=(20, 4)) + np.array([10, 0, 0, 0])
        b = rng.normal(0, 0.05, size=(20, 4)) + np.array([-10, 0, 0, 0])
        pts = np.vstack([a, b])
        assignment, _ = kmeans(pts, 2, seed=1)
        assert len(set(assignment[:20])) == 1
        assert len(set(assignment[20:])) == 1
        assert assignment[0] != assignment[20]

    def test_k_equals_n_gives_zero_inertia(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(8, 3))
        assignment, centers = kmeans(pts, 8, seed=3)
        assert len(set(assignment.tolist())) == 8
        inertia = sum(
            ((pts[i] - centers[assignment[i]]) ** 2).sum() for i in range(len(pts))
        )
        assert inertia < 1e-12

    def test_fixed_seed_reproducible(self):
        rng = np.random.default_rng(4)
        pts = rng.normal(size=(40, 6))
        a1, _ = kmeans(pts, 5, seed=7)
        a2, _ = kmeans(pts, 5, seed=7)
        assert np.array_equal(a1, a2)

    def test_k_out_of_range(self):
        with pytest.raises(PairingError):
            kmeans(np.zeros((3, 2)), 4)

    def test_identical_points_fill_all_clusters(self):
        pts = np.tile(np.array([[1.0, 0.0]]), (6, 1))
        assignment, _ = kmeans(pts, 3, seed=0)
        assert assignment.shape == (6,)


class TestUnionFindPass:
    def test_face_band_links_transitively(self):
        sims = {(0, 1): 0.85, (1, 2): 0.85, (0, 2): 0.5}

        def sim(i, j):
            return sims[(min(i, j), max(i, j))]

        forest = union_find_pass([0, 1, 2], sim, FACE_LINK_BAND.contains)
        assert forest.sets() == [[0, 1, 2]]

    def test_style_threshold_boundary(self):
        forest = union_find_pass([0, 1, 2], lambda i, j: 0.64, STYLE_LINK_BAND.contains)
        assert forest.sets() == [[0], [1], [2]]
        linked = union_find_pass([0, 1], lambda i, j: 0.65, STYLE_LINK_BAND.contains)
        assert linked.sets() == [[0, 1]]

    def test_matches_brute_force_closure(self):
        rng = np.random.default_rng(5)
        for trial in range(5):
            n = int(rng.integers(20, 200))
            sims = rng.random((n, n))
            sims = (sims + sims.T) / 2

            def sim(i, j):
                return float(sims[i, j])

            link = lambda s: s > 0.97
            forest = union_find_pass(list(range(n)), sim, link)
            want = brute_force_closure(n, lambda i, j: link(sim(i, j)))
            assert sorted(forest.sets()) == want

    def test_result_independent_of_processing_order(self):
        rng = np.random.default_rng(6)
        n = 30
        sims = rng.random((n, n))
        sims = (sims + sims.T) / 2
        similarity = lambda a, b: float(sims[a, b])
        ids = list(range(n))
        shuffled = ids[::-1]

        # the same relation processed under two member orderings: the forest
        # is positional, so map positions back to item ids before comparing
        f1 = union_find_pass(ids, similarity, lambda s: s > 0.9)
        f2 = union_find_pass(shuffled, similarity, lambda s: s > 0.9)
        sets1 = sorted(sorted(ids[p] for p in g) for g in f1.sets())
        sets2 = sorted(sorted(shuffled[p] for p in g) for g in f2.sets())
        assert sets1 == sets2


class TestBands:
    def test_face_band_strict_at_both_ends(self):
        assert not FACE_LINK_BAND.contains(0.8)
        assert FACE_LINK_BAND.contains(0.80001)
        assert FACE_LINK_BAND.contains(0.89999)
        assert not FACE_LINK_BAND.contains(0.9)

    def test_style_threshold_inclusive(self):
        assert STYLE_LINK_BAND.contains(0.65)
        assert not STYLE_LINK_BAND.contains(0.6499)

    def test_face_keep_strictly_exceeds(self):
        assert not FACE_KEEP_BAND.contains(0.65)
        assert FACE_KEEP_BAND.contains(0.651)

    def test_empty_band_keeps_nothing(self):
        band = Band(lo=0.9, hi=0.8)
        assert not any(band.contains(x) for x in np.linspace(0, 1, 101))


class TestHarvest:
    def test_three_members_three_pairs(self):
        assert harvest_pairs([5, 2, 9]) == [(2, 5), (2, 9), (5, 9)]

    def test_singleton_empty(self):
        assert harvest_pairs([3]) == []

    def test_counts_match_enumeration(self):
        for k in range(2, 13):
            pairs = harvest_pairs(list(range(k)))
            assert len(pairs) == k * (k - 1) // 2
            assert sorted(pairs) == sorted(itertools.combinations(range(k), 2))

    def test_ordered_flag_doubles(self):
        pairs = harvest_pairs([1, 2, 3], ordered=True)
        assert len(pairs) == 6
        assert (2, 1) in pairs and (1, 2) in pairs


class TestFilterPairs:
    def test_band_excludes_exact_point_nine(self):
        scores = {(0, 1): 0.9, (2, 3): 0.85, (4, 5): 0.8}
        kept = filter_pairs(list(scores), lambda a, b: scores[(a, b)], FACE_LINK_BAND)
        assert kept == [(2, 3)]

    def test_empty_band_empty_output(self):
        kept = filter_pairs([(0, 1)], lambda a, b: 0.85, Band(lo=0.9, hi=0.8))
        assert kept == []

    def test_stable_input_order(self):
        pairs = [(3, 4), (0, 1), (7, 8)]
        kept = filter_pairs(pairs, lambda a, b: 0.7, FACE_KEEP_BAND)
        assert kept == pairs


class TestTwoTurn:
    def _records(self, features):
        return [FeatureRecord(item_id=i, feature=v) for i, v in enumerate(features)]

    def test_planted_clusters_recovered_exactly(self):
        features, truth = planted_features(4, 6, seed=8)
        clusters = two_turn_aggregate(
            self._records(features), k=4, seed=9, turn1_band=Band(lo=0.8, lo_inclusive=True)
        )
        got = sorted(sorted(c.members) for c in clusters.clusters)
        assert got == sorted(truth)

    def test_identical_output_across_worker_counts(self):
        features, _ = planted_features(5, 8, seed=10)
        outs = []
        for threads in (1, 4, 8):
            clusters = two_turn_aggregate(
                self._records(features),
                k=5,
                seed=11,
                turn1_band=Band(lo=0.7, lo_inclusive=True),
                threads=threads,
            )
            outs.append([(c.cluster_id, c.members, c.coarse_id) for c in clusters.clusters])
        assert outs[0] == outs[1] == outs[2]

    def test_turn_two_never_crosses_turn_one(self):
        rng = np.random.default_rng(12)
        feats = rng.normal(size=(40, 8))
        feats /= np.linalg.norm(feats, axis=1, keepdims=True)
        records = [
            FeatureRecord(item_id=i, feature=v, task_feature=v) for i, v in enumerate(feats)
        ]
        with_t2 = two_turn_aggregate(
            records, k=3, seed=13,
            turn1_band=Band(lo=0.2, lo_inclusive=True),
            turn2_band=Band(lo=0.6, lo_inclusive=True),
        )
        without_t2 = two_turn_aggregate(
            records, k=3, seed=13, turn1_band=Band(lo=0.2, lo_inclusive=True)
        )
        turn1_of = without_t2.membership()
        for cluster in with_t2.clusters:
            owners = {turn1_of[item] for item in cluster.members}
            assert len(owners) == 1

    def test_clusters_partition_items(self):
        features, _ = planted_features(3, 5, seed=14)
        clusters = two_turn_aggregate(
            self._records(features), k=3, seed=15, turn1_band=Band(lo=0.8, lo_inclusive=True)
        )
        assert clusters.item_count == 15
        all_items = sorted(i for c in clusters.clusters for i in c.members)
        assert all_items == list(range(15))

    def test_overlapping_clusters_rejected(self):
        with pytest.raises(PairingError):
            ClusterSet(
                clusters=(
                    Cluster(0, (1, 2), 0, 0, 0),
                    Cluster(1, (2, 3), 0, 1, 0),
                )
            )

    def test_harvest_all_covers_every_final_set(self):
        features, truth = planted_features(3, 4, seed=16)
        clusters = two_turn_aggregate(
            self._records(features), k=3, seed=17, turn1_band=Band(lo=0.8, lo_inclusive=True)
        )
        pairs = harvest_all(clusters)
        want = sorted(
            pair for group in truth for pair in itertools.combinations(sorted(group), 2)
        )
        assert sorted(pairs) == want


class TestFeatureRecords:
    def test_norm_enforced(self):
        with pytest.raises(PairingError):
            FeatureRecord(item_id=0, feature=np.array([1.0, 1.0]))

    def test_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(18)
        feats = rng.normal(size=(10, 5)).astype(np.float32)
        path = tmp_path / "feats.bin"
        save_features(path, feats)
        assert np.array_equal(load_features(path), feats)

    def test_truncated_file_rejected(self, tmp_path):
        rng = np.random.default_rng(19)
        path = tmp_path / "feats.bin"
        save_features(path, rng.normal(size=(4, 4)).astype(np.float32))
        data = path.read_bytes()
        path.write_bytes(data[:-3])
        with pytest.raises(PairingError):
            load_features(path)
