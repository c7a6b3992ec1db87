import dataclasses

import numpy as np
import pytest

from msssa.errors import DivergenceError, NumericError, HeuristicFailureError, IllConditionedError, InvalidArgumentError, InvalidDimensionError
from msssa.linalg import build_tv_matrix
from msssa.solver import (
    Problem,
    SolverConfig,
    _objective_monitor,
    bregman_iterate,
    init_penalties,
    initial_state,
    objective,
    precompute,
    refresh_shifts,
    relative_change,
    soft_threshold,
    solve,
    update_penalties,
)

from conftest import random_problem
from test_linalg import kron_sylvester


def naive_iterate(state, prob):
    """One split Bregman step with an explicit Kronecker Sylvester solve."""
    mu1, mu2 = state.mu1, state.mu2
    P, Phi = prob.P, prob.Phi
    W = 2 * Phi.T @ Phi + mu1 * np.eye(prob.n_atoms)
    Z = mu2 * P @ P.T
    M = 2 * Phi.T @ prob.Y + mu1 * (state.A - state.DA) + mu2 * (state.B - state.DB) @ P.T
    X = kron_sylvester(W, Z, M)
    A = np.array([[np.sign(v) * max(abs(v) - prob.lambda1 / mu1, 0.0) for v in row] for row in X + state.DA])
    B = np.array([[np.sign(v) * max(abs(v) - prob.lambda2 / mu2, 0.0) for v in row] for row in X @ P + state.DB])
    return X, A, B, state.DA + X - A, state.DB + X @ P - B


class TestProblem:
    def test_unit_norm_atoms_required(self):
        with pytest.raises(InvalidArgumentError):
            Problem(np.ones((2, 3)), 2 * np.eye(2), build_tv_matrix(3))

    def test_shapes(self):
        with pytest.raises(InvalidDimensionError):
            Problem(np.ones((2, 3)), np.eye(3), build_tv_matrix(3))
        with pytest.raises(InvalidDimensionError):
            Problem(np.ones((2, 3)), np.eye(2), build_tv_matrix(4))

    def test_negative_weight(self):
        with pytest.raises(InvalidArgumentError):
            Problem(np.ones((2, 3)), np.eye(2), build_tv_matrix(3), -1.0, 0.0)


class TestObjective:
    def test_zero(self, rng):
        prob = random_problem(4, 6, 5, seed=1)
        assert objective(np.zeros((6, 5)), prob) == pytest.approx(float(np.sum(prob.Y ** 2)), rel=1e-14)

    def test_exact_fit(self, rng):
        Phi = np.linalg.qr(rng.standard_normal((3, 3)))[0]
        Y = rng.standard_normal((3, 4))
        prob = Problem(Y, Phi, rng.standard_normal((4, 2)))
        assert objective(np.linalg.solve(Phi, Y), prob) == pytest.approx(0.0, abs=1e-24)

    def test_hand_computed(self):
        s = np.sqrt(0.5)
        Phi = np.array([[1.0, s], [0.0, s]])
        X0 = np.array([[1.0, -2.0], [0.5, 0.5]])
        Y = Phi @ X0
        prob = Problem(Y, Phi, build_tv_matrix(2), 1.0, 1.0)
        X = np.array([[1.0, -1.0], [0.0, 2.0]])
        # residual Phi (X0 - X) = Phi [[0, -1], [0.5, -1.5]]
        R = np.array([[0.5 * s, -1.0 - 1.5 * s], [0.5 * s, -1.5 * s]])
        expected = float(np.sum(R ** 2)) + 4.0 + (2.0 + 2.0)
        assert objective(X, prob) == pytest.approx(expected, rel=1e-14)

    def test_shape_check(self):
        prob = random_problem(4, 6, 5)
        with pytest.raises(InvalidDimensionError):
            objective(np.zeros((5, 6)), prob)

    @pytest.mark.parametrize("C,N", [(8, 4), (4, 8)])
    def test_monitor_agrees(self, rng, C, N):
        prob = random_problem(C, N, 7, 0.3, 0.2, seed=3)
        X = rng.standard_normal((N, 7))
        val = _objective_monitor(prob)(X, X @ prob.P)
        assert val == pytest.approx(objective(X, prob), rel=1e-12)


class TestSoftThreshold:
    def test_identity(self, rng):
        M = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(soft_threshold(M, 0.0), M)

    def test_scalars(self):
        np.testing.assert_array_equal(soft_threshold(np.array([[2.0, 0.5, -2.0, 0.0]]), 1.0), [[1.0, 0.0, -1.0, 0.0]])

    def test_scalar_oracle(self, rng):
        M = rng.standard_normal((6, 7))
        tau = 0.3
        ref = np.empty_like(M)
        for i in range(M.shape[0]):
            for j in range(M.shape[1]):
                m = M[i, j]
                ref[i, j] = 0.0 if m == 0 else max(0.0, 1.0 - tau / abs(m)) * m
        np.testing.assert_allclose(soft_threshold(M, tau), ref, rtol=1e-15, atol=1e-300)

    def test_negative(self):
        with pytest.raises(InvalidArgumentError):
            soft_threshold(np.ones((1, 1)), -0.1)


class TestPrecompute:
    def test_orthonormal_square(self, rng):
        Phi = np.linalg.qr(rng.standard_normal((4, 4)))[0]
        prob = Problem(rng.standard_normal((4, 5)), Phi, build_tv_matrix(5))
        f = precompute(prob, 1.0, 1.0)
        np.testing.assert_allclose(f.delta_w, 2.0)
        assert f.O.min() == pytest.approx(3.0)

    def test_invariants(self):
        prob = random_problem(5, 8, 6, seed=2)
        f = precompute(prob, 0.7, 1.3)
        Phi, P = prob.Phi, prob.P
        assert np.linalg.norm((f.F * f.delta_w) @ f.F.T - 2 * Phi.T @ Phi) <= 1e-8 * np.linalg.norm(2 * Phi.T @ Phi)
        assert np.linalg.norm((f.G * f.delta_z) @ f.G.T - P @ P.T) <= 1e-8 * np.linalg.norm(P @ P.T)
        np.testing.assert_array_equal(f.Dw, f.delta_w + 0.7)
        np.testing.assert_array_equal(f.Dz, 1.3 * f.delta_z)
        np.testing.assert_array_equal(f.O, f.Dw[:, None] + f.Dz[None, :])
        np.testing.assert_allclose(f.Y_Phi, 2 * f.F.T @ Phi.T @ prob.Y @ f.G, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(f.P_G, P.T @ f.G)

    def test_overcomplete_min_o(self):
        prob = random_problem(5, 8, 6, seed=2)
        f = precompute(prob, 0.5, 2.0)
        assert f.delta_w.min() == 0.0 or abs(f.delta_w.min()) < 1e-12
        assert f.O.min() == pytest.approx(0.5 + 2.0 * f.delta_z.min(), abs=1e-12)

    def test_ill_conditioned(self):
        prob = random_problem(5, 8, 6, seed=2)
        with pytest.raises(IllConditionedError) as exc:
            precompute(prob, 1e-15, 1e-15, o_floor=1e-8)
        assert exc.value.min_value < 1e-8

    def test_refresh_same(self):
        prob = random_problem(5, 8, 6)
        f = precompute(prob, 0.7, 1.3)
        g = refresh_shifts(f, 0.7, 1.3)
        np.testing.assert_array_equal(g.O, f.O)
        for name in ("F", "G", "delta_w", "delta_z", "Y_Phi", "P_G"):
            assert getattr(g, name) is getattr(f, name)

    def test_refresh_double_mu2(self):
        prob = random_problem(5, 8, 6)
        f = precompute(prob, 0.7, 1.3)
        np.testing.assert_array_equal(refresh_shifts(f, 0.7, 2.6).Dz, 2.0 * f.Dz)

    def test_refresh_equals_precompute(self):
        prob = random_problem(5, 8, 6)
        g = refresh_shifts(precompute(prob, 0.7, 1.3), 3.1, 0.2)
        h = precompute(prob, 3.1, 0.2)
        for name in ("O", "Dw", "Dz"):
            np.testing.assert_array_equal(getattr(g, name), getattr(h, name))


class TestIterate:
    def test_zero_weights(self, rng):
        prob = random_problem(4, 6, 5, 0.0, 0.0, seed=4)
        st = initial_state(prob, 0.8, 1.1)
        st = dataclasses.replace(st, DA=rng.standard_normal(st.DA.shape), A=rng.standard_normal(st.A.shape))
        out = bregman_iterate(st, precompute(prob, 0.8, 1.1), prob)
        np.testing.assert_array_equal(out.DA, 0.0)
        np.testing.assert_array_equal(out.DB, 0.0)

    def test_naive_oracle(self, rng):
        prob = random_problem(4, 6, 5, 0.2, 0.3, seed=5)
        mu1, mu2 = 0.9, 1.7
        fact = precompute(prob, mu1, mu2)
        st = initial_state(prob, mu1, mu2)
        for _ in range(3):
            ref = naive_iterate(st, prob)
            st = bregman_iterate(st, fact, prob)
            for got, want in zip((st.X, st.A, st.B, st.DA, st.DB), ref):
                np.testing.assert_allclose(got, want, rtol=1e-8, atol=1e-10)
        assert st.iter == 3

    @pytest.mark.parametrize("T,NP", [(5, 3), (3, 6)])
    def test_naive_oracle_general_p(self, T, NP):
        prob = random_problem(4, 5, T, 0.2, 0.3, seed=6, tv=False, NP=NP)
        fact = precompute(prob, 1.2, 0.4)
        st = initial_state(prob, 1.2, 0.4)
        st = bregman_iterate(st, fact, prob)
        ref = naive_iterate(initial_state(prob, 1.2, 0.4), prob)
        np.testing.assert_allclose(st.X, ref[0], rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(st.B, ref[2], rtol=1e-8, atol=1e-10)

    def test_fixed_point(self):
        prob = random_problem(6, 4, 5, 0.0, 0.0, seed=7)
        X = np.linalg.lstsq(prob.Phi, prob.Y, rcond=None)[0]
        st = dataclasses.replace(initial_state(prob, 1.0, 1.0), X=X, A=X.copy(), B=X @ prob.P, XP=X @ prob.P)
        out = bregman_iterate(st, precompute(prob, 1.0, 1.0), prob)
        for a, b in ((out.X, st.X), (out.A, st.A), (out.B, st.B), (out.DA, st.DA), (out.DB, st.DB)):
            np.testing.assert_allclose(a, b, atol=1e-10)

    def test_penalty_mismatch(self):
        prob = random_problem(4, 6, 5)
        with pytest.raises(InvalidArgumentError):
            bregman_iterate(initial_state(prob, 1.0, 1.0), precompute(prob, 2.0, 1.0), prob)

    def test_quadratic_subproblem_residual(self, rng):
        prob = random_problem(4, 6, 5, 0.0, 0.0, seed=8)
        mu1, mu2 = 0.6, 1.4
        st = initial_state(prob, mu1, mu2)
        st = dataclasses.replace(st, A=rng.standard_normal(st.A.shape), B=rng.standard_normal(st.B.shape),
                                 DA=rng.standard_normal(st.A.shape), DB=rng.standard_normal(st.B.shape))
        X = bregman_iterate(st, precompute(prob, mu1, mu2), prob).X
        P, Phi = prob.P, prob.Phi
        M = 2 * Phi.T @ prob.Y + mu1 * (st.A - st.DA) + mu2 * (st.B - st.DB) @ P.T
        res = (2 * Phi.T @ Phi + mu1 * np.eye(6)) @ X + mu2 * X @ P @ P.T - M
        assert np.linalg.norm(res) <= 1e-8 * np.linalg.norm(M)


def _bare_cfg(**kw):
    return SolverConfig(balance_residuals=False, rescale_duals=False, **kw)


def _state_with(prob, h1, h2, h1_prev, h2_prev, mu1=1.0, mu2=2.0):
    st = initial_state(prob, mu1, mu2)
    N, T = st.X.shape
    X = np.zeros((N, T))
    A = np.zeros((N, T))
    A[0, 0] = h1
    B = np.zeros_like(st.B)
    B[0, 0] = h2
    X[1, 1] = 1.0
    return dataclasses.replace(st, X=X, A=A - 0.0, B=B, XP=X @ prob.P + 0.0 * B, h1_prev=h1_prev, h2_prev=h2_prev)


class TestPenaltyRule:
    """The geometric update table, with the guards switched off."""

    prob = random_problem(4, 6, 5)

    def _run(self, h1, h2, h1p, h2p, cfg=None):
        st = _state_with(self.prob, h1, h2, h1p, h2p)
        # the constructed state has |X - A| = sqrt(h1^2 + 1) etc.; recompute the prev values
        h1_now, h2_now = st.h1, st.h2
        st = dataclasses.replace(st, h1_prev=h1_now * h1p, h2_prev=h2_now * h2p)
        return update_penalties(st, cfg or _bare_cfg()), h1_now, h2_now

    def test_sufficient_decrease(self):
        out, _, _ = self._run(0.3, 0.3, 2.0, 2.0)  # h = 0.5 * h_prev
        assert (out.mu1, out.mu2) == (1.0, 2.0)

    def test_stalled(self):
        out, _, _ = self._run(0.3, 0.3, 1.0, 1.0)  # h = h_prev
        assert out.mu1 == pytest.approx(1.05)
        assert out.mu2 == pytest.approx(2.1)

    def test_boundary(self):
        out, _, _ = self._run(0.3, 0.3, 1.0 / 0.5, 1.0 / 0.96)  # h2 = 0.96 h2_prev
        assert out.mu1 == 1.0
        assert out.mu2 == pytest.approx(2.1)

    def test_prev_values_stored(self):
        out, h1, h2 = self._run(0.3, 0.4, 1.0, 1.0)
        assert out.h1_prev == h1 and out.h2_prev == h2

    def test_first_call_records_only(self):
        st = initial_state(self.prob, 1.0, 2.0)
        out = update_penalties(st, _bare_cfg())
        assert (out.mu1, out.mu2) == (1.0, 2.0)
        assert out.h1_prev == 0.0

    def test_dual_rescaling(self, rng):
        st = _state_with(self.prob, 0.3, 0.3, 1.0, 1.0)
        st = dataclasses.replace(st, h1_prev=st.h1, h2_prev=st.h2, DA=np.ones_like(st.DA))
        out = update_penalties(st, SolverConfig(balance_residuals=False))
        np.testing.assert_allclose(out.mu1 * out.DA, st.mu1 * st.DA)

    def test_balance_guard(self):
        st = _state_with(self.prob, 0.3, 0.3, 1.0, 1.0)
        st = dataclasses.replace(st, h1_prev=st.h1, h2_prev=st.h2, a_change=1e3, b_change=0.0)
        out = update_penalties(st, SolverConfig())
        assert out.mu1 == 1.0 and out.mu2 > 2.0

    def test_residual_sequence(self):
        # synthetic losses: shrinking fast, then stalling, then shrinking again
        cfg = _bare_cfg()
        seq = [1.0, 0.5, 0.25, 0.25, 0.24, 0.1, 0.099]
        expect = [False, False, True, True, False, True]
        st = initial_state(self.prob, 1.0, 1.0)
        mu = 1.0
        for k, (prev, cur) in enumerate(zip(seq, seq[1:])):
            A = np.zeros_like(st.X)
            A[0, 0] = cur
            s = dataclasses.replace(st, X=np.zeros_like(st.X), A=A, mu1=mu, h1_prev=prev, h2_prev=None)
            s = dataclasses.replace(s, h2_prev=1.0)
            out = update_penalties(s, cfg)
            assert (out.mu1 > mu) == expect[k]
            mu = out.mu1


class TestInitPenalties:
    def test_single_grid(self):
        prob = random_problem(4, 6, 5)
        assert init_penalties(prob, SolverConfig(mu_grid=(0.3,))) == (0.3, 0.3)

    def test_members(self):
        prob = random_problem(4, 6, 5)
        m = init_penalties(prob, SolverConfig(mu_grid=(0.1, 10.0)))
        assert set(m) <= {0.1, 10.0}

    def test_exhaustive(self):
        prob = random_problem(10, 20, 8, 0.2, 0.2, seed=9)
        grid = np.logspace(-2, 1, 4)
        t1 = np.zeros((4, 4))
        t2 = np.zeros((4, 4))
        for j, g1 in enumerate(grid):
            for l, g2 in enumerate(grid):
                st = initial_state(prob, g1, g2)
                X, A, B, _, _ = naive_iterate(st, prob)
                t1[j, l] = 0.5 * g1 * np.sum((X - A) ** 2)
                t2[j, l] = 0.5 * g2 * np.sum((X @ prob.P - B) ** 2)
        s1, s2 = t1.sum(axis=1), t2.sum(axis=0)
        want = (grid[int(np.flatnonzero(s1 == s1.max())[0])], grid[int(np.flatnonzero(s2 == s2.max())[0])])
        got = init_penalties(prob, SolverConfig(mu_grid=tuple(grid)))
        assert got == pytest.approx(want)

    def test_all_ill_conditioned(self):
        prob = random_problem(4, 6, 5)
        with pytest.raises(HeuristicFailureError):
            init_penalties(prob, SolverConfig(mu_grid=(1e-14, 2e-14), o_floor=1e-8))


class TestSolve:
    def test_least_squares(self, rng):
        Phi = np.linalg.qr(rng.standard_normal((5, 5)))[0]
        Y = rng.standard_normal((5, 6))
        rep = solve(Problem(Y, Phi, build_tv_matrix(6), 0.0, 0.0), SolverConfig(eps=1e-12))
        want = np.linalg.solve(Phi, Y)
        assert np.linalg.norm(rep.X_hat - want) <= 1e-6 * np.linalg.norm(want)

    def test_huge_lambda(self):
        prob = random_problem(5, 8, 6, seed=10)
        lam = 2 * np.max(np.abs(prob.Phi.T @ prob.Y)) * 1.5
        rep = solve(prob.with_weights(lam, 0.0))
        assert np.allclose(rep.X_hat, 0.0, atol=1e-8)
        assert objective(np.zeros_like(rep.X_hat), prob.with_weights(lam, 0.0)) <= rep.objective + 1e-10

    def test_zero_solution_ratio(self):
        prob = random_problem(5, 8, 6, seed=10)
        lam = 1e3
        rep = solve(prob.with_weights(lam, lam))
        assert rep.converged and rep.iterations < 1000
        assert np.linalg.norm(rep.X_hat) <= 1e-12 * np.linalg.norm(prob.Y)
        assert relative_change(np.zeros((2, 2)), np.ones((2, 2))) == 0.0

    def test_report_fields(self):
        prob = random_problem(5, 8, 6, seed=11)
        rep = solve(prob, SolverConfig(record_trace=True, eps=1e-8))
        assert rep.converged and rep.stop_reason == "eps"
        assert len(rep.objective_trace) == rep.iterations
        assert rep.objective == pytest.approx(objective(rep.X_hat, prob), rel=1e-14)
        assert all(np.isfinite(rep.objective_trace))
        d = rep.to_dict()
        assert d["iterations"] == rep.iterations and "objective_trace" in d

    def test_iter_max(self):
        prob = random_problem(5, 8, 6, seed=11)
        rep = solve(prob, SolverConfig(iter_max=3, eps=1e-14))
        assert not rep.converged and rep.iterations == 3 and rep.stop_reason == "iter_max"

    def test_target_stop(self):
        prob = random_problem(5, 8, 6, seed=11)
        best = solve(prob, SolverConfig(eps=1e-12)).objective
        rep = solve(prob, SolverConfig(eps=1e-15, target_loss=best, target_precision=1e-4))
        assert rep.stop_reason == "target"
        assert abs(rep.objective - best) <= 1e-4 * best

    def test_mu_override(self):
        prob = random_problem(5, 8, 6, seed=11)
        rep = solve(prob, SolverConfig(mu1=0.5, mu2=0.25))
        assert rep.mu_initial == (0.5, 0.25)
        rep = solve(prob, mu=(0.3, 0.2))
        assert rep.mu_initial == (0.3, 0.2)

    def test_deterministic(self):
        prob = random_problem(5, 8, 6, seed=12)
        a = solve(prob)
        b = solve(prob)
        np.testing.assert_array_equal(a.X_hat, b.X_hat)

    def test_non_finite_input_rejected(self):
        prob = random_problem(5, 8, 6, seed=12)
        with pytest.raises(NumericError):
            Problem(np.full((5, 6), np.nan), prob.Phi, prob.P)

    def test_divergence_guard(self):
        prob = random_problem(5, 8, 6, seed=12)
        # overflowing data makes the objective non-finite on the first iteration
        big = prob.with_signals(prob.Y * 1e200)
        with pytest.raises(DivergenceError):
            solve(big, SolverConfig(record_trace=True, mu1=1.0, mu2=1.0))

    @pytest.mark.parametrize("seed", range(3))
    def test_argmin_perturbation(self, seed):
        prob = random_problem(3, 4, 4, 0.3, 0.2, seed=20 + seed)
        rep = solve(prob, SolverConfig(eps=1e-12, iter_max=100000))
        f0 = objective(rep.X_hat, prob)
        rng = np.random.default_rng(seed)
        for _ in range(100):
            D = rng.standard_normal(rep.X_hat.shape)
            D *= 1e-4 / np.linalg.norm(D)
            assert objective(rep.X_hat + D, prob) >= f0 - 1e-12
