import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blindtd.covariance import LiftedOperator, sample_covariance, unvec, vec, vectorize_and_denoise
from blindtd.model import (
    BandPlan,
    CalibrationBasis,
    DelayGrid,
    MultipathChannel,
    build_chebyshev_basis,
    build_dictionary,
    build_steering,
    synth_gain_response,
)
from blindtd.selftest import noiseless_instance, recover_noiseless
from blindtd.simulate import draw_path_gains, make_pilots, simulate_snapshots
from blindtd.solver import (
    SolverConfig,
    alt_min_solve,
    calib_extract,
    estimate,
    group_lasso_solve,
    group_norms,
    lambda_max,
    prox_group_columns,
    rank1_extract,
    support_to_delays,
)

from conftest import crandn


def noiseless_setup(**kw):
    inst = noiseless_instance(**kw)
    op = LiftedOperator(inst.basis, build_dictionary(inst.grid, inst.plan))
    cov = vectorize_and_denoise(inst.covariance, 0.0)
    return inst, op, cov


class TestProx:
    def test_zero_threshold_is_identity(self, rng):
        q = crandn(rng, 4, 6)
        np.testing.assert_array_equal(prox_group_columns(q, 0.0), q)

    def test_column_at_threshold_vanishes(self):
        q = np.array([[0.6], [0.8j]])
        np.testing.assert_array_equal(prox_group_columns(q, 1.0), np.zeros((2, 1)))

    def test_shrinks_norm_by_threshold_keeping_direction(self, rng):
        q = crandn(rng, 3, 5) * 4
        out = prox_group_columns(q, 0.7)
        np.testing.assert_allclose(group_norms(out), group_norms(q) - 0.7)
        cos = np.abs(np.sum(out.conj() * q, axis=0)) / (group_norms(out) * group_norms(q))
        np.testing.assert_allclose(cos, 1.0)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31), thr=st.floats(0.01, 5.0))
    def test_optimality_conditions(self, seed, thr):
        rng = np.random.default_rng(seed)
        q = crandn(rng, 4, 6)
        x = prox_group_columns(q, thr)
        for m in range(q.shape[1]):
            nx = np.linalg.norm(x[:, m])
            if nx > 0:  # stationarity: x - q + thr x / ||x|| = 0
                np.testing.assert_allclose(x[:, m] - q[:, m] + thr * x[:, m] / nx, 0, atol=1e-12)
            else:  # zero is optimal iff ||q|| <= thr
                assert np.linalg.norm(q[:, m]) <= thr + 1e-12

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            prox_group_columns(np.ones((2, 2)), -1.0)


class TestGroupLasso:
    def test_lambda_above_lambda_max_gives_zero(self):
        _, op, cov = noiseless_setup()
        lmax = lambda_max(op, cov)
        sol = group_lasso_solve(op, cov, SolverConfig(), lam=1.0001 * lmax)
        assert not np.any(sol.q)
        sol = group_lasso_solve(op, cov, SolverConfig(), lam=0.9 * lmax)
        assert np.any(sol.q)

    @pytest.mark.parametrize("r", [1, 2])
    def test_zero_lambda_matches_least_squares(self, r):
        # 16 rows, R^2 * 2 unknowns, full column rank
        plan = BandPlan(2, 2, 20e6, (0, 3))
        grid = DelayGrid(2, plan.unambiguous_delay * 0.8)
        op = LiftedOperator(build_chebyshev_basis(plan.nl, r), build_dictionary(grid, plan))
        dense = op.to_dense()
        assert np.linalg.matrix_rank(dense) == dense.shape[1]
        rng = np.random.default_rng(0)
        r_mat = sample_covariance(crandn(rng, plan.nl, 6))
        cov = vectorize_and_denoise(r_mat, 0.0)
        ls, *_ = np.linalg.lstsq(dense, cov.r_tilde, rcond=None)
        sol = group_lasso_solve(op, cov, SolverConfig(max_iters=20000, grad_tol=1e-13), lam=0.0)
        np.testing.assert_allclose(vec(sol.q), ls, atol=1e-6)

    def test_noiseless_recovery(self):
        inst = noiseless_instance()
        res, corr = recover_noiseless(inst)
        np.testing.assert_array_equal(res.support, inst.support)
        assert corr >= 0.999

    def test_objective_nonincreasing_over_window(self):
        _, op, cov = noiseless_setup()
        cfg = SolverConfig(bb_memory=5)
        sol = group_lasso_solve(op, cov, cfg, lam=0.05 * lambda_max(op, cov))
        tr = sol.objective_trace
        for k in range(1, len(tr)):
            assert tr[k] <= max(tr[max(0, k - cfg.bb_memory):k]) + 1e-12 * abs(tr[0])
        assert tr[-1] < tr[0]

    def test_warm_start_begins_at_given_point(self):
        _, op, cov = noiseless_setup()
        lam = 0.05 * lambda_max(op, cov)
        sol = group_lasso_solve(op, cov, SolverConfig(grad_tol=1e-10, max_iters=5000), lam=lam)
        again = group_lasso_solve(op, cov, SolverConfig(warm_start=sol.q), lam=lam)
        assert again.objective_trace[0] == pytest.approx(sol.objective_trace[-1], rel=1e-12)
        assert again.objective_trace[-1] <= again.objective_trace[0] * (1 + 1e-12)

    def test_auto_lambda_rule(self):
        cfg = SolverConfig(lambda_scale=2.0, lambda_floor=0.1)
        assert cfg.resolve_lambda(0.5, 64) == pytest.approx(2.0 * 0.5 * np.sqrt(np.log(64)))
        assert cfg.resolve_lambda(0.0, 64, lam_max=3.0) == pytest.approx(0.3)
        assert SolverConfig(lam=7.0).resolve_lambda(1.0, 64) == 7.0

    @pytest.mark.parametrize("kw", [dict(lam=-1.0), dict(lambda_floor=2.0), dict(max_iters=0),
                                    dict(grad_tol=0.0), dict(support_threshold=1.0)])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            SolverConfig(**kw)


class TestRankOne:
    def test_exact_factors(self, rng):
        z = crandn(rng, 4)
        r = np.array([0.0, 2.0, 0.0, 0.5, 1.0])
        f = rank1_extract(np.outer(z, r))
        np.testing.assert_allclose(np.outer(f.z_hat, f.r_s_hat), np.outer(z, r), atol=1e-12)
        assert f.r_s_hat.min() >= 0
        np.testing.assert_allclose(f.r_s_hat / f.r_s_hat.max(), r / r.max(), atol=1e-12)
        assert f.spectral_gap_ratio < 1e-12

    def test_perturbation_is_stable(self, rng):
        z = crandn(rng, 4)
        r = rng.uniform(0, 1, 8)
        e = 1e-6 * crandn(rng, 4, 8)
        f = rank1_extract(np.outer(z, r) + e)
        assert np.linalg.norm(np.outer(f.z_hat, f.r_s_hat) - np.outer(z, r)) < 1e-5

    def test_degenerate_split_is_flagged(self):
        q = np.zeros((4, 4), dtype=complex)
        q[0, 0] = q[1, 1] = 1.0
        assert rank1_extract(q).spectral_gap_ratio == pytest.approx(1.0)

    def test_zero_rejected(self):
        with pytest.raises(ValueError):
            rank1_extract(np.zeros((4, 3)))


class TestCalibExtract:
    def test_unit_vector(self):
        p = calib_extract(np.kron([1, 0], [1, 0]))
        np.testing.assert_allclose(p, [1, 0])

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31), r=st.integers(1, 5))
    def test_recovers_p_up_to_scale(self, seed, r):
        rng = np.random.default_rng(seed)
        p = crandn(rng, r)
        q = calib_extract(np.kron(p.conj(), p))
        corr = abs(np.vdot(q, p)) / (np.linalg.norm(q) * np.linalg.norm(p))
        assert corr == pytest.approx(1.0, abs=1e-10)

    def test_scale_invariance(self, rng):
        p = crandn(rng, 3)
        z = np.kron(p.conj(), p)
        base = calib_extract(z)
        for beta in (np.exp(0.7j), 2.5, 0.1 * np.exp(-2j)):
            np.testing.assert_allclose(calib_extract(beta * z), base, atol=1e-12)

    @pytest.mark.parametrize("z", [np.zeros(4), np.ones(3)])
    def test_invalid(self, z):
        with pytest.raises(ValueError):
            calib_extract(z)


class TestSupport:
    GRID = DelayGrid(5, 5.0)

    def test_threshold(self):
        tau, sig, sup = support_to_delays(np.array([0, 1.0, 0.04, 0.5, 0.06]), self.GRID, 0.05)
        np.testing.assert_array_equal(sup, [1, 3, 4])
        np.testing.assert_allclose(tau, [1.0, 3.0, 4.0])
        np.testing.assert_allclose(sig, [1.0, 0.5, 0.06])

    def test_all_zero_is_empty(self):
        tau, sig, sup = support_to_delays(np.zeros(5), self.GRID)
        assert tau.size == sig.size == sup.size == 0

    def test_scale_invariant(self):
        r = np.array([0, 1.0, 0.2, 0.01, 0.3])
        assert np.array_equal(support_to_delays(r, self.GRID)[2], support_to_delays(7 * r, self.GRID)[2])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            support_to_delays(np.ones(4), self.GRID)


class TestEstimate:
    def test_flat_gain_single_function(self):
        inst, _, _ = noiseless_setup(r=1, coeffs=(1.0,))
        res, corr = recover_noiseless(inst)
        np.testing.assert_array_equal(res.support, inst.support)
        np.testing.assert_allclose(res.g_hat / res.g_hat[0], 1.0, atol=1e-8)

    def test_unit_modulus_rescaled_truth_gives_same_output(self):
        inst, op, cov = noiseless_setup()
        beta = np.exp(1.3j)
        a = beta * inst.g[:, None] * build_steering(inst.grid.points[inst.support], inst.plan)
        cov_b = vectorize_and_denoise((a * inst.powers) @ a.conj().T, 0.0)
        cfg = SolverConfig(lam=1e-3 * np.linalg.norm(cov.r_tilde))
        r1 = estimate(cov, op, inst.grid, inst.basis, cfg)
        r2 = estimate(cov_b, op, inst.grid, inst.basis, cfg)
        np.testing.assert_array_equal(r1.support, r2.support)
        np.testing.assert_allclose(r1.g_hat, r2.g_hat, atol=1e-9)

    def test_empty_support_reported(self):
        inst, op, cov = noiseless_setup()
        res = estimate(cov, op, inst.grid, inst.basis, SolverConfig(lam=1e6 * lambda_max(op, cov)))
        assert res.empty and res.diagnostics["empty_support"]
        assert np.all(np.isnan(res.g_hat))

    def test_dimension_check(self):
        inst, op, cov = noiseless_setup()
        with pytest.raises(ValueError):
            estimate(cov, op, DelayGrid(8, 1.0), inst.basis)

    def test_first_delay_monte_carlo(self):
        # N=16, L=2, K=3, P=400, SNR 5 dB: a pilot run of 50 seeds puts every
        # first-delay estimate on the true grid point; require >= 80%.
        plan = BandPlan(16, 2, 20e6, (0, 48))
        grid = DelayGrid(64, plan.unambiguous_delay)
        basis = build_chebyshev_basis(plan.nl, 3)
        op = LiftedOperator(basis, build_dictionary(grid, plan))
        g = synth_gain_response(basis, seed=7)
        cfg = SolverConfig(lambda_scale=30.0, lambda_floor=0.01)
        hits = 0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            idx = np.sort(rng.choice(32, 3, replace=False))
            ch = MultipathChannel(grid.points[idx], 10 ** (-0.3 * np.arange(3)))
            c, w = simulate_snapshots(ch, g, plan, draw_path_gains(ch, 400, rng),
                                      make_pilots(16, rng), 5.0, rng)
            res = estimate(vectorize_and_denoise(sample_covariance(c), w), op, grid, basis, cfg)
            if res.tau_hat.size and abs(res.tau_hat.min() - ch.delays[0]) <= grid.step * (1 + 1e-9):
                hits += 1
        assert hits >= 40


class TestAltMin:
    def setup_method(self):
        self.plan = BandPlan(8, 2, 20e6, (0, 12))
        self.grid = DelayGrid(16, self.plan.unambiguous_delay)
        self.basis = build_chebyshev_basis(self.plan.nl, 2)
        self.dict = build_dictionary(self.grid, self.plan)
        self.p = np.array([1.0, 0.3])
        ch = MultipathChannel(self.grid.points[[3, 9]], [1.0, 0.6])
        g = self.basis.matrix @ self.p
        from blindtd.model import GainResponse
        draws = draw_path_gains(ch, 40, 0)
        self.c, _ = simulate_snapshots(ch, GainResponse(g), self.plan, draws, make_pilots(8, 0), np.inf)

    def test_huge_lambda_gives_zero(self):
        _, x, _ = alt_min_solve(self.c, self.dict, self.basis, lam=1e9, p_init=self.p)
        assert not np.any(x)

    def test_noiseless_support_from_true_init(self):
        cfg = SolverConfig(max_iters=3000, grad_tol=1e-9)
        p, x, trace = alt_min_solve(self.c, self.dict, self.basis, cfg, p_init=self.p, lam=0.5, n_outer=1)
        rows = np.linalg.norm(x, axis=1)
        np.testing.assert_array_equal(np.flatnonzero(rows > 0.05 * rows.max()), [3, 9])
        assert abs(np.vdot(p, self.p)) / (np.linalg.norm(p) * np.linalg.norm(self.p)) > 0.999

    def test_objective_nonincreasing(self):
        _, _, trace = alt_min_solve(self.c, self.dict, self.basis, lam=1.0)
        assert np.all(np.diff(trace) <= 1e-9 * trace[0])

    def test_row_mismatch(self):
        with pytest.raises(ValueError):
            alt_min_solve(self.c.values[:-1], self.dict, self.basis)
