import math

import numpy as np
import pytest

from conftest import build_session
from scripts.errors import DegenerateMap, EmptyFixations, GridMismatch, OutOfBounds, ZeroMap
from scripts.heatmap import GridSpec, Heatmap
from scripts.metrics import (
    Fixations,
    cc,
    eval_against_mask,
    fixations_from_mask,
    fixations_from_session,
    kld,
    kld_directed,
    nss,
)


def _cc_oracle(a, b):
    a = np.ravel(a)
    b = np.ravel(b)
    num = sum((x - a.mean()) * (y - b.mean()) for x, y in zip(a, b))
    den = math.sqrt(sum((x - a.mean()) ** 2 for x in a) * sum((y - b.mean()) ** 2 for y in b))
    return num / den


def _nss_oracle(v, cells):
    flat = [float(x) for x in np.ravel(v)]
    mean = sum(flat) / len(flat)
    sd = math.sqrt(sum((x - mean) ** 2 for x in flat) / len(flat))
    return sum((float(v[r, c]) - mean) / sd for r, c in cells) / len(cells)


def _kld_oracle(p, q, eps=1e-8):
    def dist(v):
        v = [float(x) for x in np.ravel(v)]
        floored = [max(x / sum(v), eps) for x in v]
        return [x / sum(floored) for x in floored]
    P, Q = dist(p), dist(q)
    return max(sum(a * math.log(a / b) for a, b in zip(P, Q)), 0.0)


class TestCC:

    def test_against_direct_sums(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            shape = tuple(int(d) for d in rng.integers(2, 7, size=2))
            a, b = rng.uniform(size=shape), rng.uniform(size=shape)
            assert cc(a, b) == pytest.approx(_cc_oracle(a, b), abs=1e-9)

    def test_symmetric_and_self(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(size=(4, 4)), rng.uniform(size=(4, 4))
        assert cc(a, b) == cc(b, a)
        assert cc(a, a) == pytest.approx(1.0)
        assert cc(a, -a + 5.0) == pytest.approx(-1.0)

    def test_invariant_to_affine_rescale(self):
        rng = np.random.default_rng(2)
        a, b = rng.uniform(size=(5, 6)), rng.uniform(size=(5, 6))
        assert cc(3.0 * a + 7.0, b) == pytest.approx(cc(a, b), abs=1e-12)

    def test_constant_map(self):
        with pytest.raises(DegenerateMap):
            cc(np.ones((3, 3)), np.eye(3))

    def test_grid_mismatch(self):
        with pytest.raises(GridMismatch):
            cc(np.eye(3), np.eye(4))

    def test_accepts_heatmaps(self):
        a = Heatmap(GridSpec(2, 2), [[0.0, 1.0], [2.0, 3.0]])
        assert cc(a, a.values) == pytest.approx(1.0)


class TestNSS:

    def test_single_fixation(self):
        v = np.array([[1.0, 3.0], [5.0, 7.0]])
        assert nss(v, Fixations(((1, 1),))) == pytest.approx(3.0 / math.sqrt(5.0))

    def test_against_direct_sums(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            shape = tuple(int(d) for d in rng.integers(2, 7, size=2))
            v = rng.uniform(size=shape)
            n = int(rng.integers(1, 6))
            cells = tuple((int(rng.integers(shape[0])), int(rng.integers(shape[1]))) for _ in range(n))
            assert nss(v, Fixations(cells)) == pytest.approx(_nss_oracle(v, cells), abs=1e-9)

    def test_all_cells_average_to_zero(self):
        v = np.random.default_rng(3).uniform(size=(3, 4))
        cells = tuple((r, c) for r in range(3) for c in range(4))
        assert nss(v, Fixations(cells)) == pytest.approx(0.0, abs=1e-12)

    def test_repeated_fixations_count_twice(self):
        v = np.array([[1.0, 3.0], [5.0, 7.0]])
        once = nss(v, Fixations(((0, 0), (1, 1))))
        twice = nss(v, Fixations(((0, 0), (1, 1), (1, 1))))
        assert twice > once

    def test_errors(self):
        v = np.array([[1.0, 3.0], [5.0, 7.0]])
        with pytest.raises(EmptyFixations):
            nss(v, Fixations(()))
        with pytest.raises(OutOfBounds):
            nss(v, Fixations(((2, 0),)))
        with pytest.raises(DegenerateMap):
            nss(np.ones((2, 2)), Fixations(((0, 0),)))


class TestKLD:

    def test_two_cell_value(self):
        assert kld(np.array([0.5, 0.5]), np.array([0.25, 0.75])) == pytest.approx(0.143841, abs=1e-6)

    def test_against_direct_sums(self):
        rng = np.random.default_rng(8)
        for _ in range(1000):
            shape = tuple(int(d) for d in rng.integers(1, 6, size=2))
            p = rng.uniform(size=shape) * (rng.uniform(size=shape) > 0.2)
            q = rng.uniform(size=shape) * (rng.uniform(size=shape) > 0.2)
            if p.sum() == 0 or q.sum() == 0:
                continue
            assert kld(p, q) == pytest.approx(_kld_oracle(p, q), abs=1e-9)

    def test_identical_is_zero(self):
        p = np.random.default_rng(4).uniform(size=(6, 6))
        assert kld(p, p * 3.0) == pytest.approx(0.0, abs=1e-12)

    def test_non_negative(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            p = rng.uniform(size=(4, 5)) * (rng.uniform(size=(4, 5)) > 0.3)
            q = rng.uniform(size=(4, 5)) * (rng.uniform(size=(4, 5)) > 0.3)
            if p.sum() == 0 or q.sum() == 0:
                continue
            assert kld(p, q) >= 0.0

    def test_zero_policies(self):
        p = np.array([1.0, 0.0])
        q = np.array([0.5, 0.5])
        assert kld(p, q, zero_policy="discard") == pytest.approx(math.log(2.0), abs=1e-6)
        assert kld(p, q, zero_policy="floor") == pytest.approx(math.log(2.0), abs=1e-6)
        with pytest.raises(ValueError):
            kld(p, q, zero_policy="ignore")

    def test_direction(self):
        p = np.array([0.5, 0.5])
        q = np.array([0.25, 0.75])
        assert kld_directed(p, q, "pred_gt") == pytest.approx(kld(q, p))
        assert kld_directed(p, q, "gt_pred") != pytest.approx(kld_directed(p, q, "pred_gt"))

    def test_zero_map(self):
        with pytest.raises(ZeroMap):
            kld(np.zeros(3), np.ones(3))


class TestFixations:

    def test_from_mask(self):
        fix = fixations_from_mask(np.array([[0.0, 1.0], [0.6, 0.2]]))
        assert set(fix.cells) == {(0, 1), (1, 0)}

    def test_from_session_viewport_centres(self):
        s = build_session([(0, 0.0, 0.0, 0.5, 0.5, 10.0), (10, 0.5, 0.5, 1.0, 1.0, 10.0)])
        assert fixations_from_session(s, GridSpec(2, 2)).cells == ((0, 0), (1, 1))


class TestMaskEvaluation:

    def test_map_equal_to_mask(self):
        mask = np.zeros((4, 4))
        mask[1:3, 1:3] = 1.0
        scores = eval_against_mask(mask, mask)
        assert scores["cc_seg"] == pytest.approx(1.0)
        assert scores["nss_seg"] > 0
        assert scores["kld_seg"] == pytest.approx(0.0, abs=1e-6)
        assert "nss_attn" not in scores

    def test_empty_mask_gives_nan(self):
        hmap = np.random.default_rng(6).uniform(size=(3, 3))
        scores = eval_against_mask(hmap, np.zeros((3, 3)), fix=Fixations(((0, 0),)))
        assert math.isnan(scores["cc_seg"])
        assert math.isnan(scores["nss_seg"])
        assert math.isnan(scores["kld_seg"])
        assert math.isfinite(scores["nss_attn"])

    def test_mask_range_checked(self):
        with pytest.raises(ValueError):
            eval_against_mask(np.eye(2), np.full((2, 2), 2.0))
