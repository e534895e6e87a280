"""Resolvents against brute-force 1D minimization oracles."""

import numpy as np
import pytest
from scipy import optimize

from drsaddle.prox import (
    eval_hinge_conjugate,
    eval_kl,
    eval_kl_conjugate,
    eval_smoothed_hinge,
    golden_max,
    golden_min,
    project_inf_ball,
    prox_box,
    prox_ridge,
    resolvent_hinge_conjugate,
    resolvent_kl_conjugate,
    smoothed_hinge_grad,
)


def scalar_argmin(f, lo, hi):
    res = optimize.minimize_scalar(
        f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12}
    )
    return res.x


class TestProxBox:
    def test_interior_points_unchanged(self):
        z = np.array([0.2, 0.9, 0.0, 1.0])
        np.testing.assert_array_equal(prox_box(z, 0.0, 1.0), z)

    def test_clamps_both_sides(self):
        z = np.array([-0.5, 2.0])
        np.testing.assert_array_equal(prox_box(z, 0.0, 1.0), [0.0, 1.0])

    def test_reversed_bounds_rejected(self):
        with pytest.raises(ValueError):
            prox_box(np.zeros(2), 1.0, 0.0)

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        z = 3.0 * rng.standard_normal(50)
        once = prox_box(z, -0.3, 0.8)
        np.testing.assert_array_equal(prox_box(once, -0.3, 0.8), once)

    def test_matches_grid_minimization(self):
        # nearest feasible point on a fine grid of [0, 1]
        rng = np.random.default_rng(1)
        grid = np.linspace(0.0, 1.0, 2001)
        for z in 2.0 * rng.standard_normal(20):
            best = grid[np.argmin((grid - z) ** 2)]
            got = prox_box(np.array([z]), 0.0, 1.0)[0]
            assert abs(got - best) <= 5e-4


class TestProjectInfBall:
    def test_inside_ball_unchanged(self):
        p = np.array([0.4, -0.5, 0.0])
        np.testing.assert_array_equal(project_inf_ball(p, 0.5), p)

    def test_componentwise_clamp(self):
        np.testing.assert_array_equal(
            project_inf_ball(np.array([0.3, -0.7]), 0.5), [0.3, -0.5]
        )

    def test_zero_radius_gives_zero_block(self):
        rng = np.random.default_rng(2)
        out = project_inf_ball(rng.standard_normal(10), 0.0)
        assert np.all(out == 0.0)

    def test_negative_radius_rejected(self):
        with pytest.raises(ValueError):
            project_inf_ball(np.zeros(2), -0.1)


class TestProxRidge:
    def test_zero_penalty_is_identity(self):
        z = np.array([1.0, -4.0, 0.5])
        np.testing.assert_array_equal(prox_ridge(z, 2.0, 0.0), z)

    def test_plug_in_values(self):
        np.testing.assert_allclose(
            prox_ridge(np.array([2.0, -2.0]), 1.0, 1.0), [1.0, -1.0]
        )

    def test_matches_quadratic_argmin(self):
        # argmin_x step*lam/2 x^2 + (x - z)^2/2 = z/(1 + step*lam)
        rng = np.random.default_rng(3)
        step, lam = 0.7, 2.3
        z = 4.0 * rng.standard_normal(30)
        expect = z / (1.0 + step * lam)
        np.testing.assert_allclose(prox_ridge(z, step, lam), expect, atol=1e-8)

    def test_subgradient_relation(self):
        # z - prox == step*lam*prox, the optimality condition rearranged
        rng = np.random.default_rng(4)
        z = rng.standard_normal(25)
        step, lam = 0.9, 1.7
        p = prox_ridge(z, step, lam)
        np.testing.assert_allclose(z - p, step * lam * p, atol=1e-12)


def kl_conjugate_scalar(y, b):
    # -b + b log(b / (1 - y)) for y < 1, with the 0 log 0 convention
    if b == 0.0:
        return 0.0 if y <= 1.0 else np.inf
    if y >= 1.0:
        return np.inf
    return -b + b * np.log(b / (1.0 - y))


class TestResolventKlConjugate:
    def test_zero_data_collapses_to_min(self):
        z = np.array([-2.0, 0.5, 1.0, 3.0])
        out = resolvent_kl_conjugate(z, 1.0, np.zeros(4))
        np.testing.assert_allclose(out, np.minimum(z, 1.0), atol=1e-15)

    def test_plug_in_value(self):
        out = resolvent_kl_conjugate(np.array([1.0]), 1.0, np.array([1.0]))
        assert out[0] == pytest.approx(0.0, abs=1e-15)

    def test_negative_data_rejected(self):
        with pytest.raises(ValueError):
            resolvent_kl_conjugate(np.zeros(2), 1.0, np.array([1.0, -1.0]))

    def test_output_stays_in_domain(self):
        rng = np.random.default_rng(5)
        z = 5.0 * rng.standard_normal(200)
        b = rng.uniform(0.0, 3.0, 200)
        b[::7] = 0.0
        out = resolvent_kl_conjugate(z, 0.8, b)
        assert np.all(out <= 1.0)
        assert np.all(out[b > 0.0] < 1.0)

    def test_matches_1d_minimization_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(40):
            z = float(4.0 * rng.standard_normal())
            b = float(rng.uniform(0.05, 3.0))
            step = float(rng.uniform(0.1, 2.0))
            got = resolvent_kl_conjugate(np.array([z]), step, np.array([b]))[0]
            oracle = scalar_argmin(
                lambda y: step * kl_conjugate_scalar(y, b) + 0.5 * (y - z) ** 2,
                min(z, 1.0) - 5.0,
                1.0 - 1e-13,
            )
            assert abs(got - oracle) <= 1e-6


class TestResolventHingeConjugate:
    def test_positive_label_plug_in(self):
        out = resolvent_hinge_conjugate(np.array([0.0]), 1.0, np.array([1.0]), 1)
        assert out[0] == pytest.approx(-0.5)

    def test_negative_label_clamps_high(self):
        out = resolvent_hinge_conjugate(np.array([5.0]), 1.0, np.array([-1.0]), 1)
        assert out[0] == pytest.approx(1.0)

    def test_invalid_label_rejected(self):
        with pytest.raises(ValueError):
            resolvent_hinge_conjugate(np.zeros(1), 1.0, np.array([2.0]), 1)

    def test_output_stays_in_interval(self):
        rng = np.random.default_rng(7)
        labels = rng.choice([-1.0, 1.0], 100)
        z = 3.0 * rng.standard_normal(100)
        out = resolvent_hinge_conjugate(z, 0.6, labels, 20)
        assert np.all(out >= np.minimum(-labels, 0.0) - 1e-15)
        assert np.all(out <= np.maximum(-labels, 0.0) + 1e-15)

    def test_matches_1d_minimization_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(40):
            b = float(rng.choice([-1.0, 1.0]))
            y = float(3.0 * rng.standard_normal())
            step = float(rng.uniform(0.1, 2.0))
            n = int(rng.integers(1, 12))
            lo, hi = min(-b, 0.0), max(-b, 0.0)
            got = resolvent_hinge_conjugate(np.array([y]), step, np.array([b]), n)[0]
            oracle, _ = golden_min(
                lambda t: step * (b * t + 0.5 * t * t) / n + 0.5 * (t - y) ** 2,
                np.array([lo]),
                np.array([hi]),
            )
            assert abs(got - oracle[0]) <= 1e-8


class TestEvaluators:
    def test_kl_at_data(self):
        b = np.array([0.5, 2.0, 1.0])
        expect = float(np.sum(b - b * np.log(b)))
        assert eval_kl(b, b) == pytest.approx(expect, rel=1e-14)

    def test_kl_negative_argument_infinite(self):
        assert eval_kl(np.array([1.0, -0.1]), np.array([0.0, 0.0])) == np.inf

    def test_kl_zero_zero_convention(self):
        assert eval_kl(np.zeros(3), np.zeros(3)) == 0.0

    def test_kl_zero_with_positive_data_infinite(self):
        assert eval_kl(np.array([0.0]), np.array([1.0])) == np.inf

    def test_kl_conjugate_domain(self):
        b = np.array([1.0])
        assert eval_kl_conjugate(np.array([1.0]), b) == np.inf
        assert np.isfinite(eval_kl_conjugate(np.array([0.5]), b))
        assert eval_kl_conjugate(np.array([1.0]), np.zeros(1)) == 0.0

    def test_kl_fenchel_young_equality(self):
        # equality holds at s = b/(1-z); inequality holds elsewhere
        rng = np.random.default_rng(9)
        for _ in range(30):
            b = rng.uniform(0.1, 2.0, 4)
            z = rng.uniform(-1.0, 0.9, 4)
            s = b / (1.0 - z)
            lhs = eval_kl(s, b) + eval_kl_conjugate(z, b)
            assert lhs == pytest.approx(float(z @ s), rel=1e-10)
            s2 = s + rng.uniform(0.01, 0.5, 4)
            assert eval_kl(s2, b) + eval_kl_conjugate(z, b) >= float(z @ s2) - 1e-12

    def test_smoothed_hinge_regions(self):
        b = np.ones(3)
        z = np.array([2.0, -1.0, 0.5])
        np.testing.assert_allclose(eval_smoothed_hinge(z, b), [0.0, 1.5, 0.125])

    def test_smoothed_hinge_invalid_label(self):
        with pytest.raises(ValueError):
            eval_smoothed_hinge(np.zeros(1), np.array([0.5]))

    def test_smoothed_hinge_gradient_continuity(self):
        # finite differences across both breakpoints of the piecewise form
        h = 1e-6
        for b in (-1.0, 1.0):
            for z0 in (0.0, b):
                lab = np.array([b])
                left = (
                    eval_smoothed_hinge(np.array([z0]), lab)
                    - eval_smoothed_hinge(np.array([z0 - h]), lab)
                )[0] / h
                right = (
                    eval_smoothed_hinge(np.array([z0 + h]), lab)
                    - eval_smoothed_hinge(np.array([z0]), lab)
                )[0] / h
                assert abs(left - right) <= 1e-4
                g = smoothed_hinge_grad(np.array([z0]), lab)[0]
                assert abs(0.5 * (left + right) - g) <= 1e-4

    def test_hinge_conjugate_matches_direct_sum(self):
        rng = np.random.default_rng(10)
        labels = rng.choice([-1.0, 1.0], 6)
        y = resolvent_hinge_conjugate(rng.standard_normal(6), 0.5, labels, 6)
        expect = float(np.sum(labels * y + 0.5 * y * y) / 6.0)
        assert eval_hinge_conjugate(y, labels, 6) == pytest.approx(expect, rel=1e-14)

    def test_hinge_conjugate_outside_interval_infinite(self):
        assert eval_hinge_conjugate(
            np.array([0.5]), np.array([1.0]), 1
        ) == np.inf


class TestFirmNonexpansiveness:
    CASES = [
        ("box", lambda a: prox_box(a, 0.0, 1.0)),
        ("ball", lambda a: project_inf_ball(a, 0.7)),
        ("ridge", lambda a: prox_ridge(a, 0.8, 1.5)),
        (
            "kl",
            lambda a: resolvent_kl_conjugate(a, 0.6, np.full(a.shape, 1.3)),
        ),
        (
            "hinge",
            lambda a: resolvent_hinge_conjugate(
                a, 0.4, np.ones(a.shape), 10
            ),
        ),
    ]

    @pytest.mark.parametrize("name,res", CASES, ids=[c[0] for c in CASES])
    def test_firm_on_1000_random_pairs(self, name, res):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            a = 4.0 * rng.standard_normal(3)
            b = 4.0 * rng.standard_normal(3)
            ra, rb = res(a), res(b)
            d = ra - rb
            slack = float(d @ (a - b)) - float(d @ d)
            assert slack >= -1e-10


class TestGoldenSection:
    def test_min_of_shifted_quadratic(self):
        x, fx = golden_min(
            lambda t: (t - 0.3) ** 2, np.array([-4.0]), np.array([4.0])
        )
        assert x[0] == pytest.approx(0.3, abs=1e-7)
        assert fx[0] == pytest.approx(0.0, abs=1e-14)

    def test_max_of_concave(self):
        x, fx = golden_max(
            lambda t: -((t + 1.2) ** 2) + 5.0, np.array([-4.0]), np.array([4.0])
        )
        assert x[0] == pytest.approx(-1.2, abs=1e-7)
        assert fx[0] == pytest.approx(5.0, abs=1e-13)

    def test_vectorized_brackets(self):
        lo = np.array([-2.0, 0.0])
        hi = np.array([2.0, 5.0])
        targets = np.array([0.5, 3.0])
        x, _ = golden_min(lambda t: (t - targets) ** 2, lo, hi)
        np.testing.assert_allclose(x, targets, atol=1e-7)
