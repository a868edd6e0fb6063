from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from discrn import graph, harness, inner, kernels, outer, problem, streams
from discrn.errors import Condition1Failure, SubsolverDiverged
from discrn.outer import (Batch, OuterConfig, SubmodelParams, SubsolverOptions,
                          submodel_eval)
from discrn.problem import CostModel, DistributionSpec, Scenario

from conftest import rel_err


class Planar(CostModel):
    """``f_i = a_i p^2 / 2 + (u_i . x) p + x^T Q_i x / 2`` with ``x`` in the plane."""

    d = 2

    def __init__(self, seed, n=6):
        rng = np.random.default_rng(seed)
        self.n = n
        self.a = rng.uniform(1, 3, n)
        self.u = rng.normal(size=(n, 2))
        B = rng.normal(size=(n, 2, 2))
        self.Q = np.einsum("icj,ikj->ick", B, B) + np.eye(2)

    def value(self, x, p):
        x = self.as_x(x)
        return 0.5 * self.a * p * p + np.sum(self.u * x, -1) * p + \
            0.5 * np.einsum("ic,icj,ij->i", x, self.Q, x)

    def grad_p(self, x, p):
        return self.a * p + np.sum(self.u * self.as_x(x), -1)

    def hess_p(self, x, p):
        return np.broadcast_to(self.a, np.shape(p)).copy()

    def grad_x(self, x, p):
        x = self.as_x(x)
        return self.u * np.asarray(p)[..., None] + np.einsum("icj,ij->ic", self.Q, x)

    def hess_x(self, x, p):
        return np.broadcast_to(self.Q, np.shape(p) + (2, 2)).copy()

    def p_coefficients(self, x):
        return self.a, np.sum(self.u * self.as_x(x), -1)

    def omega(self, x):
        return self.a

    theta = omega


def planar_scenario(seed):
    m = Planar(seed)
    return Scenario("planar", [m], DistributionSpec.uniform(m.n, 0.0, 1.0), 3.0)


def nonconvex_setup(seed, n=10, S=4):
    g = graph.random_connected_graph(n, 2 * n, seed)
    sc = problem.make_nonconvex_scenario(n, seed)
    x = np.full((n, 1), 0.3) + 0.01 * np.random.default_rng(seed).normal(size=(n, 1))
    return g, sc, x, outer.assemble_batch(x, S, 0.1, sc, g, seed)


def derivs(batch, x, sc):
    gk, Hk = outer.empirical_derivatives(batch, x, sc)
    return gk, Hk, outer.frozen_objective(batch, x, sc)


# -- empirical derivatives ------------------------------------------------------

def test_two_driver_gradient_vanishes(two_driver):
    batch = Batch(np.full((1, 1, 2), 1.5), np.array([[[1.0, 2.0]]]), np.ones((1, 1), int), 0.1)
    gk, Hk = outer.empirical_derivatives(batch, np.zeros((2, 1)), two_driver)
    np.testing.assert_array_equal(gk, 0.0)
    np.testing.assert_allclose(Hk[:, 0, 0], [8.0, 2.0])


def test_ev_hessian_blocks_constant():
    n = 6
    g = graph.random_connected_graph(n, 9, 0)
    sc = problem.make_ev_tou_scenario(n, 60, 0, p_ref=10.0)
    c = np.array([a["c"] for a in sc.params["agents"]])
    d = np.array([a["d"] for a in sc.params["agents"]])
    for x0 in (0.0, 1.3):
        x = np.full((n, 1), x0)
        batch = outer.assemble_batch(x, 2, 0.1, sc, g, 0)
        _, Hk = outer.empirical_derivatives(batch, x, sc)
        np.testing.assert_allclose(Hk[:, 0, 0], 2 * c * d * d, rtol=1e-13)


@pytest.mark.parametrize("make", ["nonconvex", "planar"])
def test_derivatives_match_finite_differences(make):
    if make == "nonconvex":
        g, sc, x, batch = nonconvex_setup(1)
    else:
        sc = planar_scenario(1)
        g = graph.random_connected_graph(sc.n, 8, 1)
        x = np.random.default_rng(1).normal(size=(sc.n, 2))
        batch = outer.assemble_batch(x, 3, 0.1, sc, g, 1)
    gk, Hk, _ = derivs(batch, x, sc)
    h = 1e-6
    F = lambda y: outer.frozen_objective(batch, y, sc)
    for i in range(sc.n):
        for c in range(sc.d):
            e = np.zeros_like(x)
            e[i, c] = h
            assert rel_err(gk[i, c], (F(x + e) - F(x - e)) / (2 * h)) <= 1e-5
            gp, _ = outer.empirical_derivatives(batch, x + e, sc)
            gm, _ = outer.empirical_derivatives(batch, x - e, sc)
            np.testing.assert_array_less(rel_err(Hk[i, :, c], (gp[i] - gm[i]) / (2 * h)), 1e-5)
            # off-block entries vanish: F^S is separable across agents
            others = np.delete(np.arange(sc.n), i)
            np.testing.assert_allclose((gp - gm)[others], 0.0, atol=1e-12)


# -- submodels -----------------------------------------------------------------

@pytest.mark.parametrize("kind", outer.KINDS)
def test_submodel_at_anchor(kind):
    g, sc, x, batch = nonconvex_setup(2)
    gk, Hk, F = derivs(batch, x, sc)
    v, grad = submodel_eval(SubmodelParams(kind=kind), x, x, gk, Hk, F)
    assert v == F
    np.testing.assert_array_equal(grad, gk)


@pytest.mark.parametrize("kind", outer.KINDS)
def test_submodel_gradient_finite_differences(kind):
    g, sc, x, batch = nonconvex_setup(3)
    gk, Hk, F = derivs(batch, x, sc)
    params = SubmodelParams(kind=kind, rho=np.linspace(10, 60, sc.n))
    rng = np.random.default_rng(0)
    h = 1e-6
    for scale in (1.0, 1e-3, 1e-7):
        y = x + scale * rng.normal(size=x.shape)
        y[0] = x[0]  # one agent exactly at its anchor
        _, grad = submodel_eval(params, y, x, gk, Hk, F)
        for i in range(sc.n):
            e = np.zeros_like(y)
            e[i, 0] = h
            fd = (submodel_eval(params, y + e, x, gk, Hk, F)[0]
                  - submodel_eval(params, y - e, x, gk, Hk, F)[0]) / (2 * h)
            assert rel_err(grad[i, 0], fd) <= 1e-5


def test_submodel_planar_gradient():
    sc = planar_scenario(4)
    rng = np.random.default_rng(4)
    x_k = rng.normal(size=(sc.n, 2))
    gk = rng.normal(size=(sc.n, 2))
    Hk = sc.models[0].Q
    params = SubmodelParams(kind="cubic", rho=7.0)
    y = x_k + rng.normal(size=x_k.shape)
    _, grad = submodel_eval(params, y, x_k, gk, Hk, 0.0)
    h = 1e-6
    for i in range(sc.n):
        for c in range(2):
            e = np.zeros_like(y)
            e[i, c] = h
            fd = (submodel_eval(params, y + e, x_k, gk, Hk, 0.0)[0]
                  - submodel_eval(params, y - e, x_k, gk, Hk, 0.0)[0]) / (2 * h)
            assert rel_err(grad[i, c], fd) <= 1e-5


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_cubic_dominates_quadratic_model(seed):
    rng = np.random.default_rng(seed)
    n = 5
    x_k = rng.normal(size=(n, 1))
    gk = rng.normal(size=(n, 1))
    Hk = rng.normal(size=(n, 1, 1))
    y = x_k + rng.normal(size=(n, 1))
    cubic, _ = submodel_eval(SubmodelParams(kind="cubic", rho=1.0), y, x_k, gk, Hk, 0.0)
    xi = y - x_k
    quad = float(np.sum(gk * xi) + 0.5 * np.sum(Hk[:, :, 0] * xi * xi))
    assert cubic >= quad
    assert submodel_eval(SubmodelParams(kind="cubic", rho=1.0), x_k, x_k, gk, Hk, 0.0)[0] == 0.0


def test_block_and_dense_hessian_agree():
    g, sc, x, batch = nonconvex_setup(5)
    gk, Hk, F = derivs(batch, x, sc)
    y = x + np.random.default_rng(5).normal(size=x.shape)
    v, _ = submodel_eval(SubmodelParams(kind="newton"), y, x, gk, Hk, F)
    xi = (y - x).ravel()
    H = outer.dense_hessian(Hk)
    dense = F + gk.ravel() @ xi + 0.5 * xi @ H @ xi + 50 / 2 * xi @ xi
    assert v == pytest.approx(dense, abs=1e-12 * max(1, abs(dense)))
    off = H - np.diag(np.diag(H))
    assert not off.any()


def test_params_validation():
    with pytest.raises(ValueError):
        SubmodelParams(kind="halley")
    with pytest.raises(ValueError):
        SubmodelParams(rho=0.0)
    with pytest.raises(ValueError):
        SubmodelParams(c=0.0)


# -- subsolver --------------------------------------------------------------------

def lone_agent():
    """A one-agent 'graph' whose mixing matrix is the identity."""
    return SimpleNamespace(indptr=np.zeros(2, dtype=np.int64), indices=np.zeros(0, dtype=np.int64),
                           lambdaN=1.0)


@pytest.mark.parametrize("radius", ["cauchy", "scaled"])
def test_scalar_cubic_toy(radius):
    # g=1, H=0, rho=6: stationarity 1 + 3 xi |xi| = 0 gives xi = -1/sqrt(3)
    params = SubmodelParams(kind="cubic", rho=6.0)
    res = outer.dgd_subsolve(params, np.zeros((1, 1)), lone_agent(), np.ones((1, 1)),
                             np.zeros((1, 1, 1)), SubsolverOptions(radius=radius))
    assert res.x[0, 0] == pytest.approx(-1 / np.sqrt(3), abs=1e-4)


def test_cauchy_radius_minimizes_along_ray():
    rng = np.random.default_rng(6)
    n = 5
    gk = rng.normal(size=(n, 1))
    Hk = rng.uniform(-1, 3, size=(n, 1, 1))
    for kind in outer.KINDS:
        params = SubmodelParams(kind=kind, rho=rng.uniform(1, 5, n), eta_g=2.0, eta_H=2.0)
        use_h, cubic, quad = params.coefficients(n)
        r = outer.cauchy_radius(gk, Hk, use_h, cubic, quad)
        u = gk / np.linalg.norm(gk)
        ts = np.linspace(0, 3 * r, 30001)
        vals = [submodel_eval(params, -t * u, np.zeros((n, 1)), gk, Hk, 0.0)[0] for t in ts]
        assert ts[int(np.argmin(vals))] == pytest.approx(r, abs=3 * r / 30000)


def test_cauchy_radius_unbounded_ray():
    gk = np.array([[1.0], [0.0]])
    Hk = np.array([[[-1.0]], [[1.0]]])
    assert outer.cauchy_radius(gk, Hk, True, np.zeros(2), np.zeros(2)) == np.inf


def test_gradient_baseline_consensus_fixed_point():
    g = graph.complete_graph(2)
    gk = np.array([[1.0], [-3.0]])
    params = SubmodelParams(kind="gradient", eta_g=2.0)
    opts = SubsolverOptions(tol=0.0, t_max=50_000)
    res = outer.dgd_subsolve(params, np.zeros((2, 1)), g, gk, np.zeros((2, 1, 1)), opts)
    # consensus minimizer of sum_i g_i xi + eta/2 xi^2: xi = -mean(g) / eta
    np.testing.assert_allclose(res.x, 0.5, atol=2e-3)


def test_dgd_agreement_residual_decreases():
    for seed in range(10):
        g = graph.random_connected_graph(10, 20, seed)
        sc = problem.make_ev_tou_scenario(10, 60, seed, p_ref=16.0)
        x = np.zeros((10, 1))
        batch = outer.assemble_batch(x, 2, 0.1, sc, g, seed)
        gk, Hk = outer.empirical_derivatives(batch, x, sc)
        params = SubmodelParams(kind="cubic", rho=0.1)
        res = [outer.agreement_residual(outer.dgd_subsolve(
            params, x, g, gk, Hk, SubsolverOptions(tol=0.0, t_max=T)).x, g)
            for T in (100, 1000, 10_000, 50_000)]
        assert all(b < a for a, b in zip(res, res[1:]))
        assert res[-1] <= 1e-4


def test_subsolver_divergence_raises():
    g, sc, x, batch = nonconvex_setup(7)
    gk, Hk, _ = derivs(batch, x, sc)
    with pytest.raises(SubsolverDiverged):
        outer.dgd_subsolve(SubmodelParams(), x, g, gk, Hk, SubsolverOptions(blowup=1e-6))


def test_unknown_radius_rule():
    g, sc, x, batch = nonconvex_setup(7)
    gk, Hk, _ = derivs(batch, x, sc)
    with pytest.raises(ValueError):
        outer.dgd_subsolve(SubmodelParams(), x, g, gk, Hk, SubsolverOptions(radius="huge"))


@pytest.mark.parametrize("backend", ["python", "cython"])
def test_planar_subsolve_backends(backend):
    if backend == "cython" and kernels.compiled is None:
        pytest.skip("extension not built")
    sc = planar_scenario(8)
    g = graph.random_connected_graph(sc.n, 8, 8)
    x = np.zeros((sc.n, 2))
    batch = outer.assemble_batch(x, 2, 0.1, sc, g, 8)
    gk, Hk = outer.empirical_derivatives(batch, x, sc)
    opts = SubsolverOptions(t_max=3000)
    a = outer.dgd_subsolve(SubmodelParams(), x, g, gk, Hk, opts, backend=backend)
    b = outer.dgd_subsolve(SubmodelParams(), x, g, gk, Hk, opts, backend="python")
    np.testing.assert_allclose(a.x, b.x, atol=1e-10)


# -- condition 1 -------------------------------------------------------------------

def test_condition1_zero_step_fails():
    g = graph.complete_graph(2)
    x = np.zeros((2, 1))
    rep = outer.check_condition1(x, x, 1.0, 1.0, SubmodelParams(), g)
    assert rep.residual_ok and not rep.decrease_ok and rep.margin == 0.0
    assert not rep.ok


def test_condition1_residual_k2():
    g = graph.complete_graph(2)
    v = np.array([[1.0], [-1.0]]) / np.sqrt(2)
    rep = outer.check_condition1(np.zeros((2, 1)), v, -1.0, 0.0, SubmodelParams(), g)
    assert rep.residual == pytest.approx(np.linalg.norm(g.L @ v[:, 0]))
    assert rep.residual == pytest.approx(2.0)
    assert not rep.residual_ok


def test_condition1_margin_formula():
    g = graph.complete_graph(3)
    x_k = np.zeros((3, 1))
    x_next = np.full((3, 1), 0.2)
    p = SubmodelParams(rho=50, c=0.1, epsilon=0.5)
    rep = outer.check_condition1(x_k, x_next, -0.3, 0.0, p, g)
    s = np.sqrt(3 * 0.04)
    assert rep.margin == pytest.approx(-0.3 + 0.1 * 0.5 * s + 0.1 * np.sqrt(25) * s * s)
    assert rep.residual == pytest.approx(0.0, abs=1e-15) and rep.ok


def test_agreement_tolerance():
    assert outer.agreement_tolerance(40, 1) == pytest.approx(1e-4 * np.sqrt(40))


@pytest.mark.parametrize("x,expected", [([1, 1, 1], 0.0), ([1, -1], np.sqrt(2)),
                                        ([1, 1, 1, 5], np.sqrt(12))])
def test_disagreement(x, expected):
    assert outer.disagreement(np.array(x, float)[:, None]) == pytest.approx(expected)


def test_disagreement_blockwise():
    x = np.array([[1.0, 10.0], [-1.0, 10.0]])
    assert outer.disagreement(x) == pytest.approx(np.sqrt(2))


# -- batches ---------------------------------------------------------------------

def test_parallel_batch_bit_identical():
    g, sc, x, _ = nonconvex_setup(9)
    a = outer.assemble_batch(x, 8, 0.1, sc, g, 9, k=3, threads=1)
    b = outer.assemble_batch(x, 8, 0.1, sc, g, 9, k=3, threads=4)
    assert np.array_equal(a.p_tilde, b.p_tilde) and np.array_equal(a.iterations, b.iterations)


def test_batch_accuracy_against_oracle():
    g, sc, x, batch = nonconvex_setup(10, S=6)
    for s in range(batch.S):
        p_star = inner.kkt_oracle(x, batch.chi[s, 0], sc.p_ref, sc.models[0])
        assert np.linalg.norm(batch.p_tilde[s, 0] - p_star) <= 0.1


def test_dirac_batch_repeatable(two_driver):
    g = graph.complete_graph(2)
    a = outer.assemble_batch(np.zeros((2, 1)), 1, 0.1, two_driver, g, 0, k=0)
    b = outer.assemble_batch(np.zeros((2, 1)), 1, 0.1, two_driver, g, 5, k=7)
    np.testing.assert_array_equal(a.p_tilde, b.p_tilde)


def test_common_x_mode_uses_average():
    g, sc, x, _ = nonconvex_setup(11)
    a = outer.assemble_batch(x, 2, 0.1, sc, g, 11, common_x=True)
    b = outer.assemble_batch(np.full_like(x, x.mean()), 2, 0.1, sc, g, 11)
    np.testing.assert_array_equal(a.p_tilde, b.p_tilde)


def test_batch_size_formula_is_advisory():
    c = outer.AnalysisConstants(sigma1=1, sigma2=1, M1=1, M2=1)
    assert c.batch_size(50, 1e-2) > 0


# -- full iterations --------------------------------------------------------------

def test_run_outer_callbacks_and_history():
    g, sc, x, _ = nonconvex_setup(12)
    seen = []
    cfg = OuterConfig(S=2, K_outer=3, seed=12, max_cond1_fail_fraction=1.0)
    state = outer.run_outer(sc, g, SubmodelParams(), cfg, lambda s, r: seen.append(r))
    assert seen[0] is None and len(seen) == 4
    assert [r.k for r in state.history] == [1, 2, 3]
    assert state.k == 3


def test_planar_run_decreases_objective():
    sc = planar_scenario(13)
    sc.dist = DistributionSpec.dirac(np.full(sc.n, 0.5))
    g = graph.random_connected_graph(sc.n, 8, 13)
    ev = harness.Evaluator(sc, 1, 0)
    F = []
    cfg = OuterConfig(S=1, K_outer=4, x0=1.0, max_cond1_fail_fraction=1.0)
    outer.run_outer(sc, g, SubmodelParams(rho=1.0), cfg, lambda s, r: F.append(ev(s.x)))
    assert F[-1] < F[0]


def test_condition1_abort():
    # at the optimum of the sunny example the step is zero and (ii) cannot hold
    sc = problem.make_two_driver_example("sunny")
    cfg = OuterConfig(S=1, K_outer=2, max_cond1_fail_fraction=0.0)
    with pytest.raises(Condition1Failure):
        outer.run_outer(sc, graph.complete_graph(2), SubmodelParams(), cfg)


def deterministic_descent(sc, g, x0, K, opts):
    ev = harness.Evaluator(sc, 1, 0)
    F, steps = [], []

    def cb(state, rec):
        F.append(ev(state.x))
        steps.append(np.inf if rec is None else rec.step_norm)

    cfg = OuterConfig(S=1, K_outer=K, x0=x0, max_cond1_fail_fraction=1.0, subsolver=opts)
    outer.run_outer(sc, g, SubmodelParams(rho=0.1), cfg, cb)
    return np.array(F), np.array(steps)


def test_two_driver_deterministic_descent():
    sc = problem.make_two_driver_example("sunny")
    F, steps = deterministic_descent(sc, graph.complete_graph(2), 1.0, 12,
                                     SubsolverOptions(tol=1e-12, r_min=0.0))
    k = 1
    while k < len(F) and steps[k] >= 1e-8:
        assert F[k] < F[k - 1]
        k += 1
    assert k < len(F)
    assert F[-1] <= 1e-12


def test_deterministic_final_window_is_flat():
    n = 10
    g = graph.random_connected_graph(n, 20, 3)
    sc = problem.make_ev_tou_scenario(n, 60, 3, p_ref=16.0)
    sc.dist = DistributionSpec.dirac(np.ones(n))
    F, _ = deterministic_descent(sc, g, 0.0, 12, SubsolverOptions())
    assert np.ptp(F[-3:]) <= 1e-6


@pytest.mark.xfail(strict=True, reason="with S=20 the batch noise dominates once the plateau is "
                   "reached, so only about half of the later iterations decrease")
def test_stochastic_descent_fraction():
    decreases = total = 0
    for seed in range(10):
        g = graph.random_connected_graph(40, 120, seed)
        sc = problem.make_nonconvex_scenario(40, seed)
        ev = harness.Evaluator(sc, 500, seed)
        F = []
        cfg = OuterConfig(S=20, K_outer=100, seed=seed)
        outer.run_outer(sc, g, SubmodelParams(kind="cubic"), cfg, lambda s, r: F.append(ev(s.x)))
        steps = np.diff(F)
        decreases += int(np.sum(steps < 0))
        total += steps.size
    assert decreases / total >= 0.9, f"{decreases}/{total} iterations decrease"
