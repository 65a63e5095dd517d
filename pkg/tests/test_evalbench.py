import numpy as np
import pytest

from featpipe.detector import Keypoint
from featpipe import evalbench as ev
from featpipe.grad import ShapeError


def kp(x, y, sigma=1.6):
    return Keypoint(x=float(x), y=float(y), sigma=float(sigma), theta=0.0, score=1.0)


def identity_gt(shape=(100, 100)):
    return ev.PairGroundTruth(np.eye(3), shape, shape)


def translation_gt(dx, dy, shape=(100, 100)):
    h = np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])
    return ev.PairGroundTruth(h, shape, shape)


def one_hot(i, dim=8, scale=1.0):
    v = np.zeros(dim)
    v[i] = scale
    return v


class TestPairGroundTruth:
    def test_singular_homography_rejected(self):
        h = np.zeros((3, 3))
        with pytest.raises(ShapeError):
            ev.PairGroundTruth(h, (10, 10), (10, 10))

    def test_wrong_shape_rejected(self):
        with pytest.raises(ShapeError):
            ev.PairGroundTruth(np.eye(4), (10, 10), (10, 10))

    def test_inverse(self):
        gt = translation_gt(5.0, -3.0)
        np.testing.assert_allclose(gt.h_ba @ gt.h_ab, np.eye(3), atol=1e-12)


class TestGtCorrespondences:
    def test_identity_identical_lists(self):
        kps = [kp(10, 20), kp(40, 50), kp(70, 30)]
        pairs = ev.gt_correspondences(kps, kps, identity_gt())
        assert pairs == [(0, 0), (1, 1), (2, 2)]

    def test_out_of_shared_region_excluded(self):
        gt = translation_gt(60.0, 0.0)  # shared band: x in [0, 39] on side a
        kps_a = [kp(10, 50), kp(80, 50)]
        kps_b = [kp(70, 50), kp(140, 50)]
        pairs = ev.gt_correspondences(kps_a, kps_b, gt, tol_px=2.0)
        assert pairs == [(0, 0)]

    def test_keypoint_outside_own_image_excluded(self):
        kps_a = [kp(-5, 10), kp(20, 20)]
        kps_b = [kp(-5, 10), kp(20, 20)]
        pairs = ev.gt_correspondences(kps_a, kps_b, identity_gt())
        assert pairs == [(1, 1)]

    def test_translation_against_bipartite_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            pts = rng.uniform(20, 70, size=(3, 2))
            dx, dy = 7.0, -4.0
            gt = translation_gt(dx, dy)
            kps_a = [kp(x, y) for x, y in pts]
            kps_b = [kp(x + dx, y + dy) for x, y in pts]
            pairs = ev.gt_correspondences(kps_a, kps_b, gt, tol_px=2.0)
            # exhaustive one-to-one assignment: every candidate pairing
            # within tolerance, maximum cardinality
            from itertools import permutations

            best = 0
            for perm in permutations(range(3)):
                ok = sum(
                    1
                    for i, j in enumerate(perm)
                    if np.hypot(
                        kps_a[i].x + dx - kps_b[j].x, kps_a[i].y + dy - kps_b[j].y
                    )
                    <= 2.0
                )
                best = max(best, ok)
            assert len(pairs) == best == 3
            assert pairs == [(0, 0), (1, 1), (2, 2)]

    def test_greedy_prefers_closer_candidate(self):
        # two a-keypoints inside tolerance of one b-keypoint
        kps_a = [kp(50, 50), kp(52, 50)]
        kps_b = [kp(51.5, 50)]
        pairs = ev.gt_correspondences(kps_a, kps_b, identity_gt(), tol_px=3.0)
        assert pairs == [(1, 0)]

    def test_scale_widens_tolerance(self):
        kps_a = [kp(50, 50)]
        far = [kp(58, 50, sigma=3.2)]  # twice the base scale: tol 5 -> 10
        near_only = [kp(58, 50, sigma=1.6)]
        assert ev.gt_correspondences(kps_a, far, identity_gt(), tol_px=5.0) == [(0, 0)]
        assert ev.gt_correspondences(kps_a, near_only, identity_gt(), tol_px=5.0) == []

    def test_one_to_one(self):
        rng = np.random.default_rng(3)
        kps_a = [kp(x, y) for x, y in rng.uniform(10, 90, size=(12, 2))]
        kps_b = [kp(x, y) for x, y in rng.uniform(10, 90, size=(9, 2))]
        pairs = ev.gt_correspondences(kps_a, kps_b, identity_gt(), tol_px=30.0)
        assert len({i for i, _ in pairs}) == len(pairs)
        assert len({j for _, j in pairs}) == len(pairs)


class TestRepeatability:
    def test_identity_exact_one(self):
        kps = [kp(10, 10), kp(30, 60), kp(80, 20)]
        val = ev.repeatability(kps, kps, identity_gt())
        assert abs(val - 1.0) < 1e-9

    def test_disjoint_zero(self):
        kps_a = [kp(10, 10), kp(20, 20)]
        kps_b = [kp(80, 80), kp(60, 90)]
        assert ev.repeatability(kps_a, kps_b, identity_gt(), tol_px=5.0) == 0.0

    def test_two_of_four_half(self):
        kps_a = [kp(10, 10), kp(30, 30), kp(50, 50), kp(70, 70)]
        kps_b = [kp(10, 10), kp(30, 30), kp(90, 10), kp(10, 90)]
        val = ev.repeatability(kps_a, kps_b, identity_gt(), tol_px=2.0)
        assert abs(val - 0.5) < 1e-9

    def test_empty_region_undefined(self):
        gt = translation_gt(200.0, 0.0)
        assert ev.repeatability([kp(10, 10)], [kp(10, 10)], gt) is None
        assert ev.repeatability([], [kp(10, 10)], identity_gt()) is None

    def test_monotone_on_added_correspondence(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            pts = rng.uniform(10, 90, size=(5, 2))
            kps_a = [kp(x, y) for x, y in pts]
            kps_b = [kp(x + rng.uniform(-8, 8), y + rng.uniform(-8, 8)) for x, y in pts]
            before = ev.repeatability(kps_a, kps_b, identity_gt(), tol_px=3.0)
            extra = kp(45.0, 45.0)
            after = ev.repeatability(
                kps_a + [extra], kps_b + [extra], identity_gt(), tol_px=3.0
            )
            assert after >= before - 1e-12


class TestNNMatch:
    def test_self_match(self):
        d = np.stack([one_hot(i) for i in range(4)])
        matches = ev.nn_match(d, d)
        assert matches == [(i, i, 0.0) for i in range(4)]

    def test_tie_takes_lower_index(self):
        da = np.array([[1.0, 0.0]])
        db = np.array([[0.0, 1.0], [0.0, 1.0]])
        assert ev.nn_match(da, db)[0][1] == 0

    def test_empty(self):
        assert ev.nn_match(np.zeros((0, 4)), np.zeros((3, 4))) == []
        assert ev.nn_match(np.zeros((3, 4)), np.zeros((0, 4))) == []

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            ev.nn_match(np.zeros((2, 4)), np.zeros((2, 5)))

    def test_distances_match_bruteforce(self):
        rng = np.random.default_rng(5)
        da = rng.normal(size=(6, 7))
        db = rng.normal(size=(9, 7))
        for i, j, dist in ev.nn_match(da, db):
            full = np.linalg.norm(da[i] - db, axis=1)
            assert j == int(np.argmin(full))
            np.testing.assert_allclose(dist, full[j], atol=1e-12)


class TestNNMap:
    def test_separable_exact_one(self):
        d = np.stack([one_hot(i) for i in range(5)])
        val = ev.nn_map(d, d, [(i, i) for i in range(5)])
        assert abs(val - 1.0) < 1e-9

    def test_all_incorrect_zero(self):
        da = np.stack([one_hot(0), one_hot(1)])
        db = np.stack([one_hot(1), one_hot(0)])
        val = ev.nn_map(da, db, [(0, 0), (1, 1)])
        assert abs(val) < 1e-9

    def test_hand_traced_trapezoid(self):
        # Four clusters on a line; NN distances 1, 2, 3, 4 in order.
        # gt holds pairs 0 and 2, so admissions alternate
        # correct/incorrect and the PR curve is, with |gt| = 2:
        #   start (recall 0, precision 1)
        #   d=1 correct:   (1/2, 1)
        #   d=2 incorrect: (1/2, 1/2)
        #   d=3 correct:   (1,   2/3)
        #   d=4 incorrect: (1,   1/2)
        # trapezoids over recall: 0.5*(1+1)/2 + 0 + 0.5*(1/2+2/3)/2 + 0
        # = 19/24
        da = np.array([[0.0], [100.0], [200.0], [300.0]])
        db = np.array([[1.0], [102.0], [203.0], [304.0]])
        val = ev.nn_map(da, db, [(0, 0), (2, 2)])
        assert abs(val - 19.0 / 24.0) < 1e-9

    def test_degradation_after_full_recall_keeps_auc_one(self):
        # correct matches strictly closer than every incorrect one and
        # recall saturates before precision drops
        da = np.array([[0.0], [100.0], [200.0], [300.0]])
        db = np.array([[1.0], [102.0], [203.0], [304.0]])
        val = ev.nn_map(da, db, [(0, 0), (1, 1)])
        assert abs(val - 1.0) < 1e-9

    def test_no_gt_undefined(self):
        d = np.zeros((3, 4))
        assert ev.nn_map(d, d, []) is None

    def test_bounds(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            da = rng.normal(size=(8, 5))
            db = rng.normal(size=(8, 5))
            pairs = [(i, int(rng.integers(8))) for i in range(4)]
            val = ev.nn_map(da, db, pairs)
            assert -1e-12 <= val <= 1.0 + 1e-12


class TestMatchingScore:
    def test_identical_pipelines_exact_one(self):
        kps = [kp(10, 10), kp(40, 70), kp(80, 30)]
        d = np.stack([one_hot(i) for i in range(3)])
        val = ev.matching_score(kps, d, kps, d, identity_gt())
        assert abs(val - 1.0) < 1e-9

    def test_no_geometric_overlap_scores_zero(self):
        kps_a = [kp(10, 10), kp(20, 20)]
        kps_b = [kp(80, 80), kp(60, 90)]
        d = np.stack([one_hot(i) for i in range(2)])
        val = ev.matching_score(kps_a, d, kps_b, d, identity_gt(), tol_px=3.0)
        assert val == 0.0

    def test_half_matching_fixture(self):
        # indices 0 and 1 agree geometrically and descriptively; 2 and 3
        # sit far apart geometrically, so their NN matches never count
        kps_a = [kp(10, 10), kp(30, 50), kp(70, 20), kp(20, 80)]
        kps_b = [kp(10, 10), kp(30, 50), kp(90, 90), kp(60, 60)]
        d = np.stack([one_hot(i) for i in range(4)])
        val = ev.matching_score(kps_a, d, kps_b, d, identity_gt(), tol_px=2.0)
        assert abs(val - 0.5) < 1e-9

    def test_misaligned_counts_rejected(self):
        kps = [kp(10, 10), kp(20, 20)]
        d = np.zeros((3, 4))
        with pytest.raises(ShapeError):
            ev.matching_score(kps, d, kps, d[:2], identity_gt())

    def test_empty_region_undefined(self):
        gt = translation_gt(200.0, 0.0)
        kps = [kp(10, 10)]
        d = np.zeros((1, 4))
        assert ev.matching_score(kps, d, kps, d, gt) is None

    def test_monotone_on_added_correspondence(self):
        kps_a = [kp(10, 10), kp(70, 20)]
        kps_b = [kp(10, 10), kp(90, 90)]
        da = np.stack([one_hot(0), one_hot(1)])
        db = np.stack([one_hot(0), one_hot(2)])
        before = ev.matching_score(kps_a, da, kps_b, db, identity_gt(), tol_px=2.0)
        ka, kb = kp(50, 50), kp(50, 50)
        after = ev.matching_score(
            kps_a + [ka], np.vstack([da, one_hot(3)]),
            kps_b + [kb], np.vstack([db, one_hot(3)]),
            identity_gt(), tol_px=2.0,
        )
        assert after >= before - 1e-12


class TestPermutationInvariance:
    def test_all_metrics(self):
        rng = np.random.default_rng(13)
        pts = rng.uniform(15, 85, size=(6, 2))
        kps_a = [kp(x, y) for x, y in pts]
        kps_b = [kp(x + rng.uniform(-1, 1), y + rng.uniform(-1, 1)) for x, y in pts]
        da = rng.normal(size=(6, 5))
        db = da + rng.normal(size=(6, 5)) * 0.05
        gt = identity_gt()
        base = ev.evaluate_pair("p", kps_a, da, kps_b, db, gt, tol_px=3.0)
        for seed in range(4):
            prng = np.random.default_rng(seed)
            pa = prng.permutation(6)
            pb = prng.permutation(6)
            perm = ev.evaluate_pair(
                "p",
                [kps_a[i] for i in pa], da[pa],
                [kps_b[j] for j in pb], db[pb],
                gt, tol_px=3.0,
            )
            np.testing.assert_allclose(perm.repeatability, base.repeatability, atol=1e-12)
            np.testing.assert_allclose(perm.nn_map, base.nn_map, atol=1e-12)
            np.testing.assert_allclose(perm.matching_score, base.matching_score, atol=1e-12)


class TestFiles:
    def test_gt_file_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        entries = [
            ("s000_v0", "s000_v1", np.eye(3) + rng.normal(size=(3, 3)) * 0.01),
            ("s000_v0", "s000_v2", np.eye(3) + rng.normal(size=(3, 3)) * 0.01),
        ]
        path = tmp_path / "gt.txt"
        ev.write_gt_file(path, entries)
        back = ev.read_gt_file(path)
        assert [(a, b) for a, b, _ in back] == [(a, b) for a, b, _ in entries]
        for (_, _, h0), (_, _, h1) in zip(entries, back):
            np.testing.assert_allclose(h1, h0, rtol=1e-10)

    def test_gt_file_bad_line(self, tmp_path):
        path = tmp_path / "gt.txt"
        path.write_text("a b 1 0 0 0 1 0 0 0\n")
        with pytest.raises(ShapeError, match="line 1"):
            ev.read_gt_file(path)

    def test_gt_file_singular(self, tmp_path):
        path = tmp_path / "gt.txt"
        path.write_text("a b 0 0 0 0 0 0 0 0 0\n")
        with pytest.raises(ShapeError, match="singular"):
            ev.read_gt_file(path)

    def test_metrics_csv_roundtrip(self, tmp_path):
        rows = [
            ev.PairMetrics("s000_v0:s000_v1", 1.0, 19.0 / 24.0, 0.5),
            ev.PairMetrics("s001_v0:s001_v1", None, None, None),
        ]
        path = tmp_path / "metrics.csv"
        ev.write_metrics_csv(path, rows)
        text = path.read_text().splitlines()
        assert text[0] == "pair_id,repeatability,nn_map,matching_score"
        assert "undefined" in text[2]
        back = ev.read_metrics_csv(path)
        assert back[0].pair_id == rows[0].pair_id
        np.testing.assert_allclose(back[0].nn_map, rows[0].nn_map, atol=1e-12)
        assert back[1].repeatability is None

    def test_metrics_csv_header_enforced(self, tmp_path):
        path = tmp_path / "metrics.csv"
        path.write_text("a,b,c\n")
        with pytest.raises(ShapeError):
            ev.read_metrics_csv(path)

    def test_summary_table(self):
        rows = [
            ev.PairMetrics("pair1", 1.0, 0.75, 0.5),
            ev.PairMetrics("pair2", None, None, 0.25),
        ]
        table = ev.summary_table(rows)
        lines = table.splitlines()
        assert lines[0].startswith("pair")
        assert any(ln.startswith("pair1") for ln in lines)
        assert any(ln.startswith("mean") for ln in lines)
        assert "undefined" in table
        assert "0.375" in table  # mean matching score over defined rows


class TestRenderMatches:
    def test_writes_png(self, tmp_path):
        rng = np.random.default_rng(1)
        img_a = rng.uniform(size=(40, 50))
        img_b = rng.uniform(size=(30, 20))
        kps_a = [kp(10, 10), kp(30, 20)]
        kps_b = [kp(5, 5), kp(15, 25)]
        path = tmp_path / "viz.png"
        ev.render_matches(img_a, kps_a, img_b, kps_b, [(0, 0, 0.1), (1, 1, 0.2)], path)
        data = path.read_bytes()
        assert data[:8] == b"\x89PNG\r\n\x1a\n"
        from PIL import Image

        with Image.open(path) as im:
            assert im.size == (50 + 8 + 20, 40)

    def test_no_matches_ok(self, tmp_path):
        img = np.zeros((20, 20))
        path = tmp_path / "viz.png"
        ev.render_matches(img, [], img, [], [], path)
        assert path.exists()


class TestEvaluatePair:
    def test_identity_everything_one(self):
        kps = [kp(10, 10), kp(40, 70), kp(80, 30)]
        d = np.stack([one_hot(i) for i in range(3)])
        m = ev.evaluate_pair("id", kps, d, kps, d, identity_gt())
        assert abs(m.repeatability - 1.0) < 1e-9
        assert abs(m.nn_map - 1.0) < 1e-9
        assert abs(m.matching_score - 1.0) < 1e-9
