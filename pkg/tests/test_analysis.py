import math
from itertools import product

import numpy as np
import pytest
from scipy.integrate import quad

from conftest import SMALL_GRIDS, build_session
from scripts.analysis import (
    expertise_agreement_report,
    grade_concordance,
    mean_pairwise_concordance,
    pairwise_attention_agreement,
    pearson_with_p,
    student_t_sf,
)
from scripts.errors import ConstantInput, GradeOutOfDomain, TooFewGrades, TooFewMaps, TooFewPoints
from scripts.heatmap import GridSpec
from scripts.synth import generate_cohort
from scripts.telemetry import GradePair


def _t_tail_oracle(t, df):
    c = math.gamma((df + 1) / 2.0) / (math.sqrt(df * math.pi) * math.gamma(df / 2.0))
    value, _ = quad(lambda u: c * (1.0 + u * u / df) ** (-(df + 1) / 2.0), t, np.inf)
    return value


def _with_correlation(r, n, seed=0):
    """Paired samples whose sample correlation is exactly r."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    z = rng.normal(size=n)
    x = (x - x.mean()) / np.linalg.norm(x - x.mean())
    z = z - z.mean()
    z -= np.dot(z, x) * x
    z /= np.linalg.norm(z)
    return x, r * x + math.sqrt(1.0 - r * r) * z


class TestConcordance:

    def test_identical(self):
        assert grade_concordance(GradePair(3, 4), GradePair(3, 4)) == 1.0

    def test_one_step_apart(self):
        assert grade_concordance(GradePair(3, 4), GradePair(4, 4)) == pytest.approx(1.0 - 1.0 / math.sqrt(8.0))

    def test_extremes(self):
        assert grade_concordance(GradePair(3, 3), GradePair(5, 5)) == pytest.approx(0.0)

    def test_against_enumerated_maximum(self):
        rng = np.random.default_rng(9)
        for _ in range(1000):
            lo = int(rng.integers(1, 4))
            domain = tuple(range(lo, lo + int(rng.integers(2, 5))))
            a, b = (GradePair(*(int(g) for g in rng.choice(domain, size=2))) for _ in range(2))
            farthest = max(math.dist(x, y) for x in product(domain, repeat=2) for y in product(domain, repeat=2))
            expected = 1.0 - math.dist((a.primary, a.secondary), (b.primary, b.secondary)) / farthest
            assert grade_concordance(a, b, domain) == pytest.approx(expected, abs=1e-12)

    def test_bounds_and_symmetry(self):
        grades = [GradePair(p, s) for p in (3, 4, 5) for s in (3, 4, 5)]
        for a in grades:
            for b in grades:
                v = grade_concordance(a, b)
                assert 0.0 <= v <= 1.0
                assert v == grade_concordance(b, a)

    def test_domain(self):
        with pytest.raises(GradeOutOfDomain):
            grade_concordance(GradePair(2, 4), GradePair(3, 4))
        assert grade_concordance(GradePair(1, 1), GradePair(5, 5), domain=(1, 2, 3, 4, 5)) == pytest.approx(0.0)

    def test_mean_pairwise(self):
        with pytest.raises(TooFewGrades):
            mean_pairwise_concordance([GradePair(3, 3)])
        grades = [GradePair(3, 4), GradePair(4, 4), GradePair(3, 4)]
        expected = (2 * (1.0 - 1.0 / math.sqrt(8.0)) + 1.0) / 3.0
        assert mean_pairwise_concordance(grades) == pytest.approx(expected)
        assert mean_pairwise_concordance([GradePair(3, 3), GradePair(3, 3), GradePair(5, 5)]) == pytest.approx(1.0 / 3.0)


class TestAgreement:

    def test_too_few_maps(self):
        with pytest.raises(TooFewMaps):
            pairwise_attention_agreement([np.eye(3)])

    def test_identical_maps(self):
        m = np.random.default_rng(0).uniform(size=(5, 5))
        assert pairwise_attention_agreement([m, m * 2.0, m + 1.0]) == pytest.approx(1.0)

    def test_one_matching_pair_of_three(self):
        a = np.array([[1.0, -1.0], [1.0, -1.0]])
        b = np.array([[1.0, 1.0], [-1.0, -1.0]])
        assert pairwise_attention_agreement([a, 2.0 * a + 1.0, b]) == pytest.approx(1.0 / 3.0, abs=1e-12)


class TestPearson:

    def test_critical_value_at_ten_points(self):
        x, y = _with_correlation(0.6319, 10)
        res = pearson_with_p(x, y)
        assert res.r == pytest.approx(0.6319, abs=1e-12)
        assert 0.049 <= res.p <= 0.051

    def test_p_matches_numerical_integration(self):
        for n, r in [(5, 0.3), (12, -0.5), (40, 0.2), (8, 0.95)]:
            x, y = _with_correlation(r, n, seed=n)
            t = abs(r) * math.sqrt((n - 2) / (1 - r * r))
            assert pearson_with_p(x, y).p == pytest.approx(2.0 * _t_tail_oracle(t, n - 2), rel=1e-6, abs=1e-8)

    def test_t_tail(self):
        assert student_t_sf(0.0, 5) == pytest.approx(0.5)
        assert student_t_sf(-2.0, 7) == pytest.approx(1.0 - _t_tail_oracle(2.0, 7))
        assert student_t_sf(math.inf, 3) == 0.0

    def test_regression_line(self):
        x = np.array([0.0, 1.0, 2.0, 3.0])
        res = pearson_with_p(x, 2.0 * x + 1.0)
        assert (res.slope, res.intercept, res.p) == pytest.approx((2.0, 1.0, 0.0))

    def test_undefined_cases(self):
        with pytest.raises(TooFewPoints):
            pearson_with_p([1.0, 2.0], [3.0, 4.0])
        with pytest.raises(ConstantInput):
            pearson_with_p([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])


class TestAgreementReport:

    def test_small_cohort_layout(self, tiny_cohort):
        points, groups = expertise_agreement_report(tiny_cohort.sessions, grid=GridSpec(10, 10))
        assert list(points.columns) == ["wsi_id", "expertise", "n_readers", "attn_agreement", "grade_concordance"]
        assert len(points) == 6 * 3
        assert (points["n_readers"] == 3).all()
        assert points["attn_agreement"].between(-1.0, 1.0).all()
        assert list(groups["expertise"]) == ["resident", "general", "specialist"]
        assert (groups["n"] == 6).all()

    def test_single_reader_groups_are_skipped(self):
        rows = [(0, 0.0, 0.0, 0.5, 0.5, 10.0), (10, 0.5, 0.5, 1.0, 1.0, 10.0)]
        sessions = [
            build_session(rows, "a", "p1", "w1", "resident", GradePair(3, 3)),
            build_session(rows, "b", "p2", "w1", "specialist", GradePair(3, 3)),
        ]
        points, groups = expertise_agreement_report(sessions, grid=GridSpec(4, 4))
        assert points.empty and groups.empty

    def test_constant_maps_are_not_counted_as_readers(self):
        rows = [(0, 0.0, 0.0, 0.5, 0.5, 10.0), (10, 0.5, 0.5, 1.0, 1.0, 10.0)]
        whole = [(0, 0.0, 0.0, 1.0, 1.0, 10.0), (10, 0.0, 0.0, 1.0, 1.0, 10.0)]
        sessions = [
            build_session(rows, "a", "p1", "w1", "general", GradePair(3, 3)),
            build_session(rows, "b", "p2", "w1", "general", GradePair(3, 4)),
            build_session(whole, "c", "p3", "w1", "general", GradePair(4, 4)),
        ]
        points, _ = expertise_agreement_report(sessions, grid=GridSpec(4, 4))
        assert len(points) == 1
        assert points.loc[0, "n_readers"] == 2
        assert points.loc[0, "attn_agreement"] == pytest.approx(1.0)

    @pytest.mark.slow
    def test_expertise_trend_across_seeds(self):
        hits = 0
        for seed in range(20):
            cohort = generate_cohort(20, 4, seed=seed, grids=SMALL_GRIDS, feature_grids=())
            _, groups = expertise_agreement_report(cohort.sessions, grid=GridSpec(12, 12))
            g = groups.set_index("expertise")
            conc = g["mean_concordance"]
            ordered = conc["specialist"] > conc["general"] > conc["resident"]
            if ordered and g.loc["resident", "slope"] > 0 and g.loc["general", "slope"] > 0:
                hits += 1
        assert hits >= 19
