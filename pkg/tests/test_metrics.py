import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adk.metrics import EvalReport, auroc, average_precision, evaluate, pro, pro_curve
from adk.numerics import Rng
from adk.pipeline import InferenceResult

from oracles import brute_force_pro, pairwise_auroc, rank_walk_ap


def result(heatmap, score=None):
    heatmap = np.asarray(heatmap, dtype=np.float64)
    return InferenceResult(np.zeros(heatmap.shape + (3,)), heatmap, float(heatmap.max()) if score is None else score)


def random_instance(seed, n_max=100, ties=True):
    g = Rng(seed, "metric").generator
    n = int(g.integers(2, n_max + 1))
    scores = g.integers(0, 10, size=n) / 10.0 if ties and seed % 2 else g.uniform(size=n)
    labels = g.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    return scores.tolist(), labels.tolist()


class TestAuroc:
    def test_hand_case(self):
        assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_separated(self):
        assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_all_ties(self):
        assert auroc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_single_class(self):
        with pytest.raises(ValueError):
            auroc([0.1, 0.2], [1, 1])

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_pairwise_oracle(self, seed):
        s, y = random_instance(seed)
        assert abs(auroc(s, y) - pairwise_auroc(s, y)) <= 1e-9

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_increasing_transform_invariant(self, seed):
        s, y = random_instance(seed)
        t = np.exp(3 * np.asarray(s)) + 7
        assert auroc(t, y) == pytest.approx(auroc(s, y), abs=1e-12)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_complement_symmetry(self, seed):
        s, y = random_instance(seed)
        assert auroc(s, y) + auroc(s, 1 - np.asarray(y)) == pytest.approx(1.0, abs=1e-12)


class TestAveragePrecision:
    def test_hand_case(self):
        assert average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == pytest.approx(0.8333333333333333, abs=1e-15)

    def test_perfect(self):
        assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0

    def test_last_positive(self):
        assert average_precision([0.9, 0.8, 0.7, 0.6, 0.1], [0, 0, 0, 0, 1]) == pytest.approx(0.2)

    def test_no_positive(self):
        with pytest.raises(ValueError):
            average_precision([0.1, 0.2], [0, 0])

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_rank_walk_oracle(self, seed):
        s, y = random_instance(seed)
        assert abs(average_precision(s, y) - rank_walk_ap(s, y)) <= 1e-9

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_increasing_transform_invariant(self, seed):
        s, y = random_instance(seed)
        assert average_precision(np.asarray(s) ** 3 - 1, y) == pytest.approx(average_precision(s, y), abs=1e-12)


class TestPro:
    def test_perfect(self):
        m = np.zeros((8, 8), bool)
        m[2:4, 2:5] = True
        for limit in (0.05, 0.3, 1.0):
            assert pro([m.astype(float)], [m], limit) == pytest.approx(1.0, abs=1e-12)

    def test_constant_map(self):
        m = np.zeros((8, 8), bool)
        m[1:3, 1:3] = True
        maps = [np.full((8, 8), 0.4)]
        value = pro(maps, [m])
        assert value == pytest.approx(brute_force_pro(maps, [m]), abs=1e-12)
        # the single jump lands at FPR 1, so the interpolated curve is 0.3 at the limit
        assert value == pytest.approx(0.15, abs=1e-12)

    def test_two_regions_half_plateau(self):
        m = np.zeros((8, 8), bool)
        m[0:2, 0:2] = True
        m[5:7, 5:7] = True
        score = np.zeros((8, 8))
        score[0:2, 0:2] = 1.0
        value = pro([score], [m])
        assert value == pytest.approx(brute_force_pro([score], [m]), abs=1e-12)
        # Curve (0, 0) -> (0, 0.5) -> (1, 1): the missed region ties with all 56 negatives,
        # so the trapezoid rises from 0.5 to 0.65 across [0, 0.3].
        assert value == pytest.approx(0.575, abs=1e-12)
        fpr, overlap = pro_curve([score], [m])
        assert overlap[1] == 0.5 and fpr[1] == 0.0

    def test_eight_connectivity(self):
        m = np.zeros((4, 4), bool)
        m[0, 0] = m[1, 1] = True  # diagonal neighbours form one region
        score = np.zeros((4, 4))
        score[0, 0] = 1.0
        fpr, overlap = pro_curve([score], [m])
        assert overlap[1] == 0.5

    @pytest.mark.parametrize("seed", range(15))
    def test_matches_brute_force(self, seed):
        g = Rng(seed, "pro").generator
        maps, masks = [], []
        for _ in range(int(g.integers(1, 4))):
            maps.append(np.round(g.uniform(size=(8, 8)), 1 + seed % 3))
            masks.append(g.uniform(size=(8, 8)) > 0.75)
        masks[0][0, 0] = True
        assert abs(pro(maps, masks) - brute_force_pro(maps, masks)) <= 1e-9

    def test_no_regions(self):
        with pytest.raises(ValueError):
            pro([np.zeros((4, 4))], [np.zeros((4, 4), bool)])


class TestEvaluate:
    def test_perfect(self):
        masks = [np.zeros((8, 8), bool) for _ in range(4)]
        masks[2][1:4, 1:4] = True
        masks[3][5:7, 0:3] = True
        results = [result(m.astype(float)) for m in masks]
        rep = evaluate(results, masks, [0, 0, 1, 1])
        assert (rep.image_auroc, rep.pixel_auroc, rep.pro, rep.pixel_ap) == (1.0, 1.0, pytest.approx(1.0), 1.0)
        assert rep.n_images == 4 and rep.n_pixels == 256

    def test_permutation_baseline(self):
        g = Rng(0, "perm").generator
        labels = np.array([0, 1] * 100)
        scores = g.permutation(np.linspace(0, 1, 200))
        masks = [np.zeros((4, 4), bool) for _ in range(200)]
        for k in np.flatnonzero(labels):
            masks[k][1, 1] = True
        results = [result(g.uniform(size=(4, 4)), s) for s in scores]
        rep = evaluate(results, masks, labels.tolist())
        assert abs(rep.image_auroc - 0.5) <= 0.1

    def test_pixel_pooling(self):
        g = Rng(1, "pool").generator
        heat = [g.uniform(size=(3, 3)) for _ in range(3)]
        masks = [g.uniform(size=(3, 3)) > 0.6 for _ in range(3)]
        masks[0][0, 0], masks[1][0, 0] = True, False
        rep = evaluate([result(h) for h in heat], masks, [1, 0, 1])
        pooled_s = np.concatenate([h.ravel() for h in heat]).tolist()
        pooled_y = np.concatenate([m.ravel() for m in masks]).astype(int).tolist()
        assert abs(rep.pixel_ap - rank_walk_ap(pooled_s, pooled_y)) <= 1e-12
        assert abs(rep.pixel_auroc - pairwise_auroc(pooled_s, pooled_y)) <= 1e-12

    def test_macro_average(self):
        masks = [np.zeros((4, 4), bool) for _ in range(4)]
        masks[1][0, 0] = masks[3][2, 2] = True
        heat = [np.zeros((4, 4)), masks[1].astype(float), np.zeros((4, 4)), np.full((4, 4), 0.5)]
        scores = [0.1, 0.9, 0.2, 0.1]
        rep = evaluate([result(h, s) for h, s in zip(heat, scores)], masks, [0, 1, 0, 1], categories=["a", "a", "b", "b"])
        assert rep.per_category["a"]["image_auroc"] == 1.0 and rep.per_category["b"]["image_auroc"] == 0.0
        assert rep.image_auroc == 0.5

    def test_report_serialisation(self):
        rep = EvalReport(0.9, 0.8, 0.7, 0.6, 10, 640, {"all": {"image_auroc": 0.9, "pixel_auroc": 0.8, "pro": 0.7, "pixel_ap": 0.6}})
        doc = json.loads(rep.to_json())
        assert {"image_auroc", "pixel_auroc", "pro", "pixel_ap", "n_images", "n_pixels", "per_category"} <= doc.keys()
        table = rep.to_table().splitlines()
        assert table[0].split()[0] == "category" and table[-1].split()[0] == "mean"
        assert len({len(line) for line in table}) == 1

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            evaluate([result(np.zeros((2, 2)))], [], [0])
