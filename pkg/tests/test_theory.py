import math

import numpy as np
import pytest

from sdcount import theory


def enum_min_divisions(c_star, c_max):
    # independent enumeration: smallest N with 4^N sub-regions sufficing
    n = 0
    while 4**n * c_max < c_star:
        n += 1
    return n


def enum_max_divisions(h, w, r):
    n = 0
    while max(h, w) / 2**n >= r:
        n += 1
    return n


class TestMinDivisions:
    def test_dense_image_instance(self):
        assert theory.min_divisions(136.5, 22.0) == 2

    def test_already_closed(self):
        assert theory.min_divisions(10.0, 20.0) == 0

    def test_enumerated(self):
        assert theory.min_divisions(65.0, 1.0) == enum_min_divisions(65.0, 1.0) == 4

    def test_exact_power_boundary(self):
        assert theory.min_divisions(16.0, 1.0) == 2  # 4^2 exactly suffices
        assert theory.min_divisions(16.0 + 1e-9, 1.0) == 3

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            theory.min_divisions(0.0, 5.0)
        with pytest.raises(ValueError):
            theory.min_divisions(5.0, 0.0)


class TestMaxDivisions:
    def test_examples(self):
        assert theory.max_divisions(256, 256, 64) == 3
        assert theory.max_divisions(64, 64, 64) == 1
        assert theory.max_divisions(1920, 1080, 64) == 5

    def test_matches_enumeration(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            h, w = rng.integers(1, 4096, 2)
            r = int(rng.integers(1, 256))
            assert theory.max_divisions(h, w, r) == enum_max_divisions(h, w, r)

    def test_matches_closed_form(self):
        for h, w, r in [(256, 256, 64), (1920, 1080, 64), (100, 700, 13)]:
            expected = math.floor(max(math.log2(h / r), math.log2(w / r))) + 1
            assert theory.max_divisions(h, w, r) == expected

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            theory.max_divisions(0, 10, 1)


class TestDivisionBounds:
    def test_combines_both_bounds(self):
        b = theory.division_bounds(136.5, 22.0, 512, 512, 64)
        assert b == theory.DivisionBounds(n_min=2, n_max=4)
        assert b.n_min <= b.n_max


class TestBruteForceOracle:
    def test_already_within(self):
        assert theory.brute_force_min_divisions(np.full((4, 4), 1.0), 22.0) == 0

    def test_one_split_sufficient(self):
        g = np.array([[12.0, 12.0], [3.0, 3.0]])
        assert theory.brute_force_min_divisions(g, 22.0) == 1

    def test_unsatisfiable(self):
        g = np.array([[30.0, 0.0], [0.0, 0.0]])
        with pytest.raises(ValueError):
            theory.brute_force_min_divisions(g, 22.0)

    def test_non_power_of_two_rejected(self):
        with pytest.raises(ValueError):
            theory.brute_force_min_divisions(np.ones((3, 3)), 5.0)

    def test_sandwich_on_random_grids(self):
        rows = theory.sweep_division_bounds(100, seed=7)
        assert all(r["ok"] for r in rows)
        assert any(r["oracle"] > 0 for r in rows)

    def test_exhaustive_agreement_with_direct_search(self):
        # cross-check the reshape aggregation against explicit slicing
        rng = np.random.default_rng(8)
        for _ in range(20):
            g = rng.uniform(0, 10, (8, 8))
            c_max = float(rng.uniform(15, 60))
            expected = None
            for n in range(4):
                side = 8 >> n
                worst = 0.0
                for j in range(0, 8, side):
                    for k in range(0, 8, side):
                        worst = max(worst, g[j : j + side, k : k + side].sum())
                if worst <= c_max:
                    expected = n
                    break
            if expected is None:
                with pytest.raises(ValueError):
                    theory.brute_force_min_divisions(g, c_max)
            else:
                assert theory.brute_force_min_divisions(g, c_max) == expected


class TestErrorProfile:
    def test_interpolation_and_domain(self):
        p = theory.ErrorProfile(np.array([0.0, 10.0]), np.array([0.0, 1.0]))
        assert p(5.0) == pytest.approx(0.5)
        with pytest.raises(ValueError):
            p(11.0)

    def test_max_on(self):
        p = theory.ErrorProfile.from_function(lambda x: 0.01 * x, np.linspace(0, 20, 21))
        assert p.max_on(0.0, 10.0) == pytest.approx(0.1)
        assert p.max_on(0.0, 7.3) == pytest.approx(0.073)

    def test_invalid(self):
        with pytest.raises(ValueError):
            theory.ErrorProfile(np.array([1.0, 0.0]), np.array([0.0, 0.0]))
        with pytest.raises(ValueError):
            theory.ErrorProfile(np.array([0.0, 1.0]), np.array([-0.1, 0.0]))


class TestSplitInstance:
    def test_part_above_cmax_rejected(self):
        with pytest.raises(ValueError):
            theory.SplitInstance(20.0, (20.0,), 10.0)

    def test_sum_mismatch_rejected(self):
        with pytest.raises(ValueError):
            theory.SplitInstance(20.0, (5.0, 5.0), 10.0)


class TestMcVerifyProp2:
    def test_reference_instance(self):
        profile = theory.ErrorProfile.from_function(
            lambda x: 0.01 * x, np.linspace(0.0, 20.0, 201)
        )
        report = theory.mc_verify_prop2(
            profile, c_star=20.0, c_max=10.0, parts=(10.0, 10.0),
            trials=100_000, seed=123,
        )
        assert report.bound == pytest.approx(2.0)
        assert abs(report.emp_open - 4.0) <= 6.0 * report.se_open
        assert report.closed_within_bound and report.closed_below_open
        # independence slack: closed error concentrates near bound / sqrt(2)
        assert abs(report.emp_closed - 2.0 / math.sqrt(2.0)) <= 6.0 * report.se_closed

    def test_constant_profile_violates_premise(self):
        flat = theory.ErrorProfile(np.array([0.0, 30.0]), np.array([0.1, 0.1]))
        with pytest.raises(ValueError):
            theory.mc_verify_prop2(flat, 20.0, 10.0, (10.0, 10.0), trials=100)

    def test_monotone_profiles_order_closed_below_open(self):
        rng = np.random.default_rng(9)
        for _ in range(5):
            slope = float(rng.uniform(0.005, 0.05))
            profile = theory.ErrorProfile.from_function(
                lambda x: slope * x + 0.001, np.linspace(0.0, 40.0, 81)
            )
            parts = (8.0, 8.0, 8.0)
            report = theory.mc_verify_prop2(
                profile, c_star=24.0, c_max=10.0, parts=parts,
                trials=50_000, seed=int(rng.integers(1 << 30)),
            )
            assert report.passed

    def test_deterministic_under_seed(self):
        profile = theory.ErrorProfile.from_function(
            lambda x: 0.01 * x, np.linspace(0.0, 20.0, 21)
        )
        a = theory.mc_verify_prop2(profile, 20.0, 10.0, (10.0, 10.0), 5000, seed=5)
        b = theory.mc_verify_prop2(profile, 20.0, 10.0, (10.0, 10.0), 5000, seed=5)
        assert a.emp_open == b.emp_open and a.emp_closed == b.emp_closed

    def test_faulty_noise_profile_fails_bound(self):
        profile = theory.ErrorProfile.from_function(
            lambda x: 0.01 * x, np.linspace(0.0, 20.0, 21)
        )
        noisy = theory.ErrorProfile(np.array([0.0, 20.0]), np.array([0.2, 0.2]))
        report = theory.mc_verify_prop2(
            profile, 20.0, 10.0, (10.0, 10.0), 50_000, seed=5, noise_profile=noisy
        )
        assert not report.closed_within_bound
        assert not report.passed


class TestJsDivergence:
    def test_identical(self):
        p = np.array([0.2, 0.3, 0.5])
        assert theory.js_divergence(p, p) == 0.0

    def test_disjoint_supports(self):
        p = np.array([1.0, 0.0])
        q = np.array([0.0, 1.0])
        assert theory.js_divergence(p, q) == pytest.approx(math.log(2.0))

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(10)
        for _ in range(30):
            p = rng.dirichlet(np.ones(8))
            q = rng.dirichlet(np.ones(8))
            js = theory.js_divergence(p, q)
            assert js == pytest.approx(theory.js_divergence(q, p))
            assert 0.0 <= js <= math.log(2.0) + 1e-12
            if np.max(np.abs(p - q)) > 1e-6:
                assert js > 0.0

    def test_errors(self):
        with pytest.raises(ValueError):
            theory.js_divergence([0.5, 0.5], [1.0, 0.0, 0.0])
        with pytest.raises(ValueError):
            theory.js_divergence([0.5, 0.4], [1.0, 0.0])
        with pytest.raises(ValueError):
            theory.js_divergence([1.5, -0.5], [0.5, 0.5])
