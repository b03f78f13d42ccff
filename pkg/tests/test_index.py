import time

import numpy as np
import pytest

from simtext import index as I


def brute_force_threshold(scored):
    """Independent oracle: direct counting at every candidate boundary."""
    dists = sorted(set(d for d, _ in scored))
    candidates = [dists[0] - 1.0]
    candidates += [(a + b) / 2.0 for a, b in zip(dists, dists[1:])]
    candidates += [dists[-1] + 1.0]
    n_sim = sum(1 for _, y in scored if y == 0)
    n_dis = sum(1 for _, y in scored if y == 1)
    best = None
    for theta in candidates:
        fp = sum(1 for d, y in scored if y == 0 and d > theta) / n_sim
        fn = sum(1 for d, y in scored if y == 1 and d <= theta) / n_dis
        obj = 0.9 * fn + 0.1 * fp
        if best is None or obj < best[0]:
            best = (obj, theta, fp, fn)
    return best


class TestBuildInsert:
    def test_build_size(self):
        idx = I.build_index([("a", np.zeros(3), "x"), ("b", np.ones(3), "y"),
                             ("c", np.full(3, 2.0), "z")])
        assert len(idx) == 3

    def test_duplicate_id_rejected(self):
        with pytest.raises(I.ManifoldError, match="duplicate"):
            I.build_index([("a", np.zeros(2), "x"), ("a", np.ones(2), "y")])

    def test_dim_mismatch_rejected(self):
        idx = I.build_index([("a", np.zeros(3), "x")])
        with pytest.raises(I.ManifoldError, match="shape"):
            idx.insert("b", np.zeros(4), "y")

    def test_empty_rejected(self):
        with pytest.raises(I.ManifoldError, match="empty"):
            I.build_index([])

    def test_insert_visible_to_queries(self, rng):
        idx = I.build_index([("a", rng.random(4), "x")])
        v = rng.random(4)
        idx.insert("b", v, "y")
        assert idx.knn_predict(v, 1).label == "y"

    def test_thousand_inserts(self, rng):
        idx = I.build_index([("seed", rng.random(4), "x")])
        for i in range(1000):
            idx.insert(f"n{i}", rng.random(4), "x")
        assert len(idx) == 1001

    def test_desk_scale_build_under_a_second(self, rng):
        entries = [(f"e{i}", rng.random(10), str(i % 10)) for i in range(5000)]
        t0 = time.monotonic()
        idx = I.build_index(entries)
        assert time.monotonic() - t0 < 1.0
        assert len(idx) == 5000


class TestKnnPredict:
    def test_exact_hit_k1(self, rng):
        v = rng.random(4)
        idx = I.build_index([("a", v, "x"), ("b", rng.random(4), "y")])
        pred = idx.knn_predict(v, 1)
        assert pred.label == "x"
        assert pred.confidence == 1.0
        assert pred.neighbors[0][0] == "a"

    def test_unanimous_confidence_one(self, rng):
        idx = I.build_index([(f"a{i}", rng.random(3), "x") for i in range(3)]
                            + [("far", rng.random(3) + 100.0, "y")])
        pred = idx.knn_predict(rng.random(3), 3)
        assert pred.label == "x"
        assert pred.confidence == 1.0

    def test_two_to_one_vote_share(self):
        # three neighbors all at distance exactly 1 from the query
        idx = I.build_index([
            ("a", np.array([1.0, 0.0]), "x"),
            ("b", np.array([-1.0, 0.0]), "x"),
            ("c", np.array([0.0, 1.0]), "y"),
        ])
        pred = idx.knn_predict(np.zeros(2), 3)
        assert pred.label == "x"
        assert abs(pred.confidence - 2.0 / 3.0) < 1e-12

    def test_neighbors_sorted_ascending(self, rng):
        idx = I.build_index([(f"e{i}", rng.random(3), "x") for i in range(10)])
        pred = idx.knn_predict(rng.random(3), 5)
        dists = [d for _, d, _ in pred.neighbors]
        assert dists == sorted(dists)

    def test_distance_tie_broken_by_id(self):
        idx = I.build_index([
            ("zz", np.array([1.0, 0.0]), "x"),
            ("aa", np.array([-1.0, 0.0]), "y"),
        ])
        pred = idx.knn_predict(np.zeros(2), 1)
        assert pred.neighbors[0][0] == "aa"

    def test_label_tie_broken_by_nearer_member(self):
        idx = I.build_index([
            ("a", np.array([1.0, 0.0]), "near"),
            ("b", np.array([0.0, 3.0]), "far"),
            ("c", np.array([0.0, -3.0]), "far"),
        ])
        # votes: near = 1/2; far = 2/4 = 1/2; tie -> label of nearest member
        pred = idx.knn_predict(np.zeros(2), 3)
        assert pred.label == "near"
        assert abs(pred.confidence - 0.5) < 1e-12

    def test_permutation_invariant(self, rng):
        entries = [(f"e{i}", rng.random(3), str(i % 3)) for i in range(20)]
        idx1 = I.build_index(entries)
        idx2 = I.build_index(list(reversed(entries)))
        for _ in range(10):
            q = rng.random(3)
            p1 = idx1.knn_predict(q, 5)
            p2 = idx2.knn_predict(q, 5)
            assert p1.label == p2.label
            assert p1.confidence == p2.confidence
            assert p1.neighbors == p2.neighbors

    def test_self_retrieval(self, rng):
        entries = [(f"e{i}", rng.random(3), "x") for i in range(30)]
        idx = I.build_index(entries)
        for id_, vec, _ in entries:
            assert idx.knn_predict(vec, 1).neighbors[0][0] == id_

    def test_confidence_in_unit_interval(self, rng):
        entries = [(f"e{i}", rng.random(3), str(i % 4)) for i in range(30)]
        idx = I.build_index(entries)
        for _ in range(50):
            pred = idx.knn_predict(rng.random(3), int(rng.integers(1, 30)))
            assert 0.0 < pred.confidence <= 1.0

    def test_bad_k_rejected(self, rng):
        idx = I.build_index([("a", rng.random(2), "x")])
        with pytest.raises(I.ManifoldError):
            idx.knn_predict(rng.random(2), 2)
        with pytest.raises(I.ManifoldError):
            idx.knn_predict(rng.random(2), 0)


class TestClassifyPair:
    def test_zero_distance_always_similar(self):
        assert I.classify_pair(0.0, 0.0) == I.SIMILAR
        assert I.classify_pair(0.0, 5.0) == I.SIMILAR

    def test_boundary_inclusive(self):
        assert I.classify_pair(0.7, 0.7) == I.SIMILAR

    def test_just_beyond_boundary(self):
        assert I.classify_pair(0.7 + 1e-9, 0.7) == I.DISSIMILAR

    def test_negative_distance_rejected(self):
        with pytest.raises(ValueError):
            I.classify_pair(-1.0, 0.5)


class TestSelectSimilarityThreshold:
    def test_perfectly_separated(self):
        scored = [(0.1, 0), (0.2, 0), (0.9, 1), (1.3, 1)]
        theta, fp, fn = I.select_similarity_threshold(scored)
        assert fp == 0.0 and fn == 0.0
        assert 0.2 <= theta < 0.9

    def test_all_distances_equal(self):
        scored = [(0.5, 0), (0.5, 0), (0.5, 1)]
        theta, fp, fn = I.select_similarity_threshold(scored)
        # candidates are only "below all" (fp=1, fn=0 -> 0.1) and
        # "above all" (fp=0, fn=1 -> 0.9): the lower threshold wins
        assert theta == 0.5 - 1.0
        assert (fp, fn) == (1.0, 0.0)

    def test_matches_brute_force_on_random_instances(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            n = int(rng.integers(4, 24))
            scored = [(float(rng.random() * 2), int(rng.integers(2))) for _ in range(n)]
            if not any(y == 0 for _, y in scored):
                scored[0] = (scored[0][0], 0)
            if not any(y == 1 for _, y in scored):
                scored[-1] = (scored[-1][0], 1)
            theta, fp, fn = I.select_similarity_threshold(scored)
            obj, theta_bf, fp_bf, fn_bf = brute_force_threshold(scored)
            assert theta == theta_bf
            assert (fp, fn) == (fp_bf, fn_bf)
            assert abs((0.9 * fn + 0.1 * fp) - obj) < 1e-15

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="both"):
            I.select_similarity_threshold([(0.1, 0), (0.4, 0)])


class TestPersistence:
    def _index(self, rng):
        return I.build_index(
            [(f"id-{i}", rng.random(5), f"label {i % 3}") for i in range(12)])

    def test_round_trip(self, rng, tmp_path):
        idx = self._index(rng)
        I.save_index(tmp_path / "m.midx", idx)
        idx2 = I.load_index(tmp_path / "m.midx")
        assert idx2.dim == idx.dim
        for (i1, v1, l1), (i2, v2, l2) in zip(idx.entries(), idx2.entries()):
            assert i1 == i2 and l1 == l2
            assert np.array_equal(v1, v2)

    def test_bad_magic_rejected(self, rng, tmp_path):
        idx = self._index(rng)
        I.save_index(tmp_path / "m.midx", idx)
        blob = bytearray((tmp_path / "m.midx").read_bytes())
        blob[:4] = b"XXXX"
        (tmp_path / "m.midx").write_bytes(bytes(blob))
        with pytest.raises(I.ManifoldError, match="magic"):
            I.load_index(tmp_path / "m.midx")

    def test_truncation_rejected(self, rng, tmp_path):
        idx = self._index(rng)
        I.save_index(tmp_path / "m.midx", idx)
        blob = (tmp_path / "m.midx").read_bytes()
        (tmp_path / "m.midx").write_bytes(blob[:-3])
        with pytest.raises(I.ManifoldError, match="truncated"):
            I.load_index(tmp_path / "m.midx")

    def test_tsv_export_values_parse_back_exactly(self, rng, tmp_path):
        idx = self._index(rng)
        I.export_tsv(tmp_path / "m.tsv", idx)
        lines = (tmp_path / "m.tsv").read_text().splitlines()
        assert lines[0].split("\t")[:2] == ["id", "label"]
        assert len(lines) == 1 + len(idx)
        for line, (id_, vec, label) in zip(lines[1:], idx.entries()):
            parts = line.split("\t")
            assert parts[0] == id_ and parts[1] == label
            assert np.array_equal(np.array([float(x) for x in parts[2:]]), vec)
