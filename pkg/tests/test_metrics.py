"""Metric functions, trace storage, the per-checkpoint recorder, and the
reference-point container."""

import math
from dataclasses import replace

import numpy as np
import pytest

from drsaddle.linops import dense_matrix
from drsaddle.metrics import (
    TRACE_COLUMNS,
    MetricRecorder,
    RunTrace,
    bregman_H,
    ergodic_update,
    lagrangian,
    primal_error,
    primal_value,
    psnr,
    rate_fit,
    restricted_gap,
)
from drsaddle.problems import (
    ReferencePoint,
    build_tgv_kl,
    build_toy_qp,
    make_deblur_data,
    motion_blur_kernel,
)
from drsaddle.solvers import (
    SolverConfig,
    fixed_point_state,
    make_preconditioner,
    run,
    weight_m,
)
from drsaddle.spaces import BlockVector, StateU, weighted_norm_sq


@pytest.fixture(scope="module")
def toy():
    return build_toy_qp(active=True)


def dense_lagrangian(prob, x, y):
    # independent evaluation from the builder's own constants
    q = prob.meta["q_diag"]
    Kd = dense_matrix(prob.K)
    F = 0.5 * x @ (q * x) - prob.f.data @ x
    G = 0.0
    off = 0
    for i in range(3):
        n_i = prob.dual_layout.sizes[i]
        yi = y[off : off + n_i]
        G += 0.5 * prob.meta["s_curv"][i] * yi @ yi + prob.meta["c_blocks"][i] @ yi
        off += n_i
    return F + (Kd @ x) @ y - G


def feasible_dual(prob, rng):
    y = BlockVector(prob.dual_layout, rng.standard_normal(5))
    for i in range(3):
        np.clip(
            y.flat_block(i),
            prob.meta["lo_blocks"][i],
            prob.meta["hi_blocks"][i],
            out=y.flat_block(i),
        )
    return y


def grid_max(fn, lo, hi, n=4001):
    ts = np.linspace(lo, hi, n)
    return float(np.max(fn(ts)))


def grid_min(fn, lo, hi, n=4001):
    ts = np.linspace(lo, hi, n)
    return float(np.min(fn(ts)))


class TestLagrangian:
    def test_matches_dense_formula(self, toy):
        prob, _ = toy
        rng = np.random.default_rng(0)
        for _ in range(50):
            x = BlockVector(prob.primal_layout, rng.standard_normal(3))
            y = feasible_dual(prob, rng)
            ref = dense_lagrangian(prob, x.data, y.data)
            assert lagrangian(prob, x, y) == pytest.approx(ref, rel=1e-12)

    def test_saddle_inequalities(self, toy):
        prob, ref = toy
        at_saddle = lagrangian(prob, ref.x, ref.y)
        rng = np.random.default_rng(1)
        for _ in range(200):
            x = BlockVector(prob.primal_layout, rng.standard_normal(3))
            y = feasible_dual(prob, rng)
            assert lagrangian(prob, ref.x, y) <= at_saddle + 1e-10
            assert lagrangian(prob, x, ref.y) >= at_saddle - 1e-10


class TestBregman:
    def test_zero_at_reference(self, toy):
        prob, ref = toy
        z = (ref.x, ref.y)
        assert abs(bregman_H(prob, z, z)) <= 1e-12

    def test_nonnegative_against_saddle(self, toy):
        prob, ref = toy
        rng = np.random.default_rng(2)
        for _ in range(300):
            x = BlockVector(prob.primal_layout, 2.0 * rng.standard_normal(3))
            y = feasible_dual(prob, rng)
            h = bregman_H(prob, (x, y), (ref.x, ref.y))
            assert h >= -1e-9

    def test_matches_dense_formula(self, toy):
        prob, ref = toy
        rng = np.random.default_rng(3)
        x = BlockVector(prob.primal_layout, rng.standard_normal(3))
        y = feasible_dual(prob, rng)
        expect = dense_lagrangian(prob, x.data, ref.y.data) - dense_lagrangian(
            prob, ref.x.data, y.data
        )
        h = bregman_H(prob, (x, y), (ref.x, ref.y))
        assert h == pytest.approx(expect, rel=1e-12, abs=1e-12)


class TestRestrictedGap:
    def test_vanishes_at_saddle(self, toy):
        prob, ref = toy
        assert abs(restricted_gap(prob, ref.x, ref.y)) <= 1e-10

    def test_dominates_bregman(self, toy):
        # the boxes contain the saddle point, so sup/inf beat the
        # particular choices y = y*, x = x*
        prob, ref = toy
        rng = np.random.default_rng(4)
        for _ in range(100):
            x = BlockVector(prob.primal_layout, rng.standard_normal(3))
            y = feasible_dual(prob, rng)
            g = restricted_gap(prob, x, y)
            h = bregman_H(prob, (x, y), (ref.x, ref.y))
            assert g >= h - 1e-10

    def test_partial_optimizations_match_grid_search(self, toy):
        prob, _ = toy
        rng = np.random.default_rng(5)
        x = BlockVector(prob.primal_layout, rng.standard_normal(3))
        y = feasible_dual(prob, rng)
        sub_box = [(-0.8, 0.6), (-0.4, 0.4), (-0.7, 0.2)]

        v = prob.K.apply(x)
        expect = 0.0
        off = 0
        for i in range(3):
            n_i = prob.dual_layout.sizes[i]
            s = prob.meta["s_curv"][i]
            for j in range(n_i):
                vj = v.data[off + j]
                cj = prob.meta["c_blocks"][i][j]
                lo = max(prob.meta["lo_blocks"][i][j], sub_box[i][0])
                hi = min(prob.meta["hi_blocks"][i][j], sub_box[i][1])
                expect += grid_max(
                    lambda t: vj * t - 0.5 * s * t * t - cj * t, lo, hi
                )
            off += n_i
        assert prob.sup_dual(v, sub_box) == pytest.approx(expect, abs=1e-6)

        w = prob.K.adjoint(y)
        q = prob.meta["q_diag"]
        f = prob.f.data
        expect = sum(
            grid_min(
                lambda t: 0.5 * q[j] * t * t - f[j] * t + w.data[j] * t,
                -3.0, 3.0,
            )
            for j in range(3)
        )
        assert prob.inf_primal(w, None) == pytest.approx(expect, abs=1e-5)

        g = restricted_gap(prob, x, y, box_dual=sub_box)
        direct = (
            prob.eval_F(x)
            + prob.sup_dual(v, sub_box)
            + prob.eval_G(y)
            - prob.inf_primal(w, None)
        )
        assert g == pytest.approx(direct, rel=1e-12)

    def test_inf_when_problem_lacks_hooks(self, toy):
        prob, _ = toy
        stripped = replace(prob, sup_dual=None, inf_primal=None)
        x = BlockVector(prob.primal_layout)
        y = BlockVector(prob.dual_layout)
        assert restricted_gap(stripped, x, y) == float("inf")


class TestPrimal:
    def test_value_is_objective_plus_conjugate(self, toy):
        prob, _ = toy
        rng = np.random.default_rng(6)
        x = BlockVector(prob.primal_layout, rng.standard_normal(3))
        expect = prob.eval_F(x) + prob.eval_G_conj(prob.K.apply(x))
        assert primal_value(prob, x) == pytest.approx(expect, rel=1e-14)

    def test_reference_attains_minimum(self, toy):
        # strong duality: the primal value at x* equals the saddle value
        prob, ref = toy
        assert primal_value(prob, ref.x) == pytest.approx(ref.primal, abs=1e-10)
        rng = np.random.default_rng(7)
        for _ in range(100):
            x = BlockVector(prob.primal_layout, 2.0 * rng.standard_normal(3))
            assert primal_value(prob, x) >= ref.primal - 1e-10

    def test_error_relative_and_absolute_modes(self, toy):
        prob, ref = toy
        x = BlockVector(prob.primal_layout, np.array([1.0, 1.0, 1.0]))
        val = primal_value(prob, x)
        rel = primal_error(prob, x, ref.primal)
        assert rel == pytest.approx((val - ref.primal) / abs(ref.primal), rel=1e-12)
        assert primal_error(prob, x, 0.0) == pytest.approx(val, rel=1e-12)


class TestPsnr:
    def test_exact_match_is_inf(self):
        img = np.ones((4, 4))
        assert psnr(img, img) == float("inf")

    def test_constant_offset_closed_form(self):
        truth = np.zeros((8, 8))
        img = np.full((8, 8), 0.1)
        assert psnr(img, truth) == pytest.approx(20.0, abs=1e-12)

    def test_uniform_noise_monte_carlo(self):
        # mean square of U(-a, a) is a^2/3
        rng = np.random.default_rng(8)
        a = 0.05
        truth = rng.random((200, 500))
        img = truth + rng.uniform(-a, a, truth.shape)
        expect = -10.0 * math.log10(a * a / 3.0)
        assert psnr(img, truth) == pytest.approx(expect, abs=0.2)

    def test_peak_rescaling(self):
        rng = np.random.default_rng(9)
        truth = rng.random((16, 16))
        img = truth + 0.01 * rng.standard_normal(truth.shape)
        assert psnr(img, truth, peak=2.0) == pytest.approx(
            psnr(img, truth) + 20.0 * math.log10(2.0), abs=1e-10
        )


class TestErgodicUpdate:
    def test_first_sample_replaces_seed_mean(self, toy):
        prob, _ = toy
        mean = BlockVector(prob.primal_layout, np.array([9.0, 9.0, 9.0]))
        v = BlockVector(prob.primal_layout, np.array([1.0, 2.0, 3.0]))
        out = ergodic_update(mean, v, 1)
        np.testing.assert_allclose(out.data, v.data, atol=1e-15)

    def test_running_mean_matches_batch_mean(self, toy):
        prob, _ = toy
        rng = np.random.default_rng(10)
        vals = [rng.standard_normal(3) for _ in range(1000)]
        mean = BlockVector(prob.primal_layout)
        for c, v in enumerate(vals, start=1):
            mean = ergodic_update(mean, BlockVector(prob.primal_layout, v), c)
        np.testing.assert_allclose(mean.data, np.mean(vals, axis=0), atol=1e-13)


class TestRateFit:
    def test_exact_power_laws(self):
        ks = np.arange(1, 200, dtype=float)
        assert rate_fit(ks, 3.0 / ks**2, 1, 199) == pytest.approx(-2.0, abs=1e-12)
        assert rate_fit(ks, 0.5 / ks, 1, 199) == pytest.approx(-1.0, abs=1e-12)

    def test_window_selects_regime(self):
        ks = np.arange(1, 1001, dtype=float)
        vals = np.where(ks <= 100, 1.0 / ks, 0.01)
        assert rate_fit(ks, vals, 1, 100) == pytest.approx(-1.0, abs=1e-12)
        assert rate_fit(ks, vals, 100, 1000) == pytest.approx(0.0, abs=1e-2)

    def test_drops_unusable_points(self):
        ks = np.arange(1, 50, dtype=float)
        vals = 1.0 / ks
        vals[3] = np.inf
        vals[7] = 0.0
        vals[11] = np.nan
        assert rate_fit(ks, vals, 1, 49) == pytest.approx(-1.0, abs=1e-12)

    def test_too_few_points_raises(self):
        with pytest.raises(ValueError):
            rate_fit([1.0, 2.0, 3.0], [1.0, 0.5, 0.3], 1, 3)


class TestRunTrace:
    def fill(self, tr, rows):
        for r in rows:
            tr.append(dict(zip(TRACE_COLUMNS, r)))

    def test_append_column_len(self):
        tr = RunTrace()
        self.fill(tr, [[1.0 * i] * len(TRACE_COLUMNS) for i in range(4)])
        assert len(tr) == 4
        np.testing.assert_allclose(tr.column("bregman"), [0.0, 1.0, 2.0, 3.0])

    def test_csv_round_trip_with_sentinels(self, tmp_path):
        tr = RunTrace()
        row0 = [0.0, 0.0, np.inf, -np.inf, 1.25, np.nan, np.inf, 0.5, 3.75]
        row1 = [10.0, 2.5, 1e-13, 0.1, -2.5, 0.3, 22.1, 1e-300, 100.0]
        self.fill(tr, [row0, row1])
        path = tmp_path / "trace.csv"
        tr.to_csv(path)
        back = RunTrace.from_csv(path)
        assert len(back) == 2
        for name in TRACE_COLUMNS:
            np.testing.assert_array_equal(
                back.column(name), tr.column(name)
            ) if name != "primal_err_rel" else None
        # nan survives separately (nan != nan)
        assert math.isnan(back.column("primal_err_rel")[0])
        assert back.column("primal_err_rel")[1] == 0.3

    def test_iteration_column_written_as_integer(self, tmp_path):
        tr = RunTrace()
        self.fill(tr, [[7.0] + [0.0] * (len(TRACE_COLUMNS) - 1)])
        path = tmp_path / "t.csv"
        tr.to_csv(path)
        line = path.read_text().splitlines()[1]
        assert line.split(",")[0] == "7"

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("k,epoch,wrong\n0,0,0\n")
        with pytest.raises(ValueError):
            RunTrace.from_csv(path)


def make_snap(state, x_test, y_test, erg_x, erg_y, k=3, epoch=1.5):
    return {
        "k": k, "epoch": epoch, "state": state,
        "x_test": x_test, "y_test": y_test,
        "erg_x": erg_x, "erg_y": erg_y, "wall_ms": 12.5,
    }


class TestMetricRecorder:
    def test_full_kit_row_matches_direct_calls(self, toy):
        prob, ref = toy
        cfg = SolverConfig(algorithm="pdr", sigma=1.0, tau=0.5, epochs=5.0)
        pre = make_preconditioner(prob, cfg)
        w = weight_m(prob, pre, cfg.sigma, cfg.tau)
        ref_state = fixed_point_state(prob, ref.x, ref.y, cfg.sigma, cfg.tau)
        rec = MetricRecorder(prob, ref=ref, ref_state=ref_state, weight=w,
                             with_gap=True)
        out = run(prob, cfg, recorder=rec, pre=pre)

        row = {c: rec.trace.column(c)[-1] for c in TRACE_COLUMNS}
        erg = (out.erg_x, out.erg_y)
        assert row["k"] == 5.0
        assert row["epoch"] == 5.0
        assert row["bregman"] == pytest.approx(
            bregman_H(prob, erg, (ref.x, ref.y)), rel=1e-12, abs=1e-15
        )
        assert row["gap"] == pytest.approx(
            restricted_gap(prob, out.erg_x, out.erg_y), rel=1e-12, abs=1e-15
        )
        assert row["primal"] == pytest.approx(
            primal_value(prob, out.erg_x), rel=1e-12
        )
        assert row["primal_err_rel"] == pytest.approx(
            primal_error(prob, out.erg_x, ref.primal), rel=1e-12, abs=1e-15
        )
        diff = StateU(
            out.state.x - ref_state.x,
            out.state.y - ref_state.y,
            out.state.x_bar - ref_state.x_bar,
            out.state.y_bar - ref_state.y_bar,
        )
        assert row["mp_dist"] == pytest.approx(
            math.sqrt(weighted_norm_sq(diff, w)), rel=1e-12
        )
        assert row["psnr"] == float("inf")  # no image truth on this problem

    def test_missing_inputs_leave_inf_sentinels(self, toy):
        prob, _ = toy
        rec = MetricRecorder(prob)
        x = BlockVector(prob.primal_layout, np.array([0.1, 0.2, 0.3]))
        y = BlockVector(prob.dual_layout)
        st = StateU(x.copy(), y.copy(), x.copy(), y.copy())
        rec(make_snap(st, x, y, x, y))
        row = {c: rec.trace.column(c)[0] for c in TRACE_COLUMNS}
        for name in ("bregman", "gap", "primal_err_rel", "psnr", "mp_dist"):
            assert row[name] == float("inf")
        assert np.isfinite(row["primal"])

    def test_state_variant_mismatch_gives_inf_distance(self, toy):
        prob, ref = toy
        cfg = SolverConfig(algorithm="pdr", sigma=1.0, tau=0.5)
        pre = make_preconditioner(prob, cfg)
        w = weight_m(prob, pre, 1.0, 0.5)
        full_ref = fixed_point_state(prob, ref.x, ref.y, 1.0, 0.5)
        rec = MetricRecorder(prob, ref=ref, ref_state=full_ref, weight=w)
        x = BlockVector(prob.primal_layout)
        y = BlockVector(prob.dual_layout)
        quad_state = StateU(x.copy(), y.copy(), None, y.copy())
        rec(make_snap(quad_state, x, y, x, y))
        assert rec.trace.column("mp_dist")[0] == float("inf")

    def test_psnr_column_uses_image_block(self):
        clean, _, data = make_deblur_data(
            8, 8, motion_blur_kernel(3, 0.0), poisson=False
        )
        prob = build_tgv_kl(
            motion_blur_kernel(3, 0.0), data, alpha0=0.04, alpha1=0.02,
            clean=clean,
        )
        rec = MetricRecorder(prob)
        x = BlockVector(prob.primal_layout)
        x.block(0)[:] = clean + 0.05
        y = BlockVector(prob.dual_layout)
        st = StateU(x.copy(), y.copy(), x.copy(), y.copy())
        rec(make_snap(st, x, y, x, y))
        assert rec.trace.column("psnr")[0] == pytest.approx(
            psnr(clean + 0.05, clean), rel=1e-12
        )


class TestPrimalErrorObservation:
    def test_deblur_primal_error_trends_down(self, capsys):
        # observation, not a theorem: the relative primal error of the
        # ergodic deblur iterates should mostly decrease once finite
        from drsaddle.problems import reference_solution

        kernel = motion_blur_kernel(3, 0.0)
        _, _, data = make_deblur_data(8, 8, kernel, poisson=False)
        prob = build_tgv_kl(kernel, data, alpha0=0.04, alpha1=0.02)
        ref = reference_solution(prob, epochs=1500.0, sigma=1.0, tau=1.0)
        rec = MetricRecorder(prob, ref=ref)
        cfg = SolverConfig(algorithm="pdr", sigma=1.0, tau=1.0, epochs=150.0,
                           cadence=5.0)
        run(prob, cfg, recorder=rec)
        errs = rec.trace.column("primal_err_rel")
        finite = errs[np.isfinite(errs)]
        assert finite.size >= 10
        ups = sum(1 for a, b in zip(finite, finite[1:]) if b > a)
        print(f"primal error checkpoints: {finite.size}, upward moves: {ups}")
        assert ups / (finite.size - 1) <= 0.5
        assert finite[-1] < finite[0]


class TestReferencePoint:
    def test_save_load_round_trip(self, toy, tmp_path):
        _, ref = toy
        path = tmp_path / "ref.bin"
        ref.save(path)
        back = ReferencePoint.load(path)
        np.testing.assert_array_equal(back.x.data, ref.x.data)
        np.testing.assert_array_equal(back.y.data, ref.y.data)
        assert back.primal == ref.primal
        assert back.x.layout == ref.x.layout
        assert back.y.layout == ref.y.layout
        assert back.meta == ref.meta

    def test_load_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b'{"format": "something-else"}\n')
        with pytest.raises(ValueError):
            ReferencePoint.load(path)
