"""Outer loop: batch assembly, empirical derivatives, submodels and DGD.

The stacked decision ``x`` is stored as an ``(n, d)`` array whose row ``i``
is agent ``i``'s local copy.  One outer iteration

1. solves ``S`` sampled inner problems (per time step, for horizon
   scenarios) at the current local copies,
2. averages the local gradients and Hessians over the batch,
3. minimizes the chosen regularized submodel over the agreement subspace
   with decentralized gradient descent, and
4. checks the subsolver output against the consensus/decrease contract.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels, streams
from .errors import Condition1Failure, MaxItersExceeded, SubsolverDiverged
from .inner import DEFAULT_MAX_ITERS, solve_inner
from .problem import sample_chi

log = logging.getLogger(__name__)

KINDS = ("cubic", "gradient", "newton")


@dataclass
class SubmodelParams:
    """Regularization of the outer submodel.

    ``kind="cubic"`` adds ``sum_i rho_i/6 |x_i - x_i^k|^3`` to the
    second-order model; ``"gradient"`` drops the Hessian term and adds
    ``eta_g/2 |x_i - x_i^k|^2``; ``"newton"`` keeps the Hessian and adds
    ``eta_H/2 |x_i - x_i^k|^2``.
    """

    kind: str = "cubic"
    rho: object = 50.0
    eta_g: float = 100.0
    eta_H: float = 50.0
    c: float = 1e-6
    epsilon: float = 1e-2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if np.any(np.asarray(self.rho) <= 0) or self.eta_g <= 0 or self.eta_H <= 0:
            raise ValueError("rho, eta_g and eta_H must be positive")
        if self.c <= 0 or self.epsilon <= 0:
            raise ValueError("c and epsilon must be positive")

    def rho_vector(self, n):
        return np.broadcast_to(np.asarray(self.rho, dtype=np.float64), (n,)).copy()

    @property
    def rho_max(self):
        return float(np.max(self.rho))

    def coefficients(self, n):
        """``(use_hessian, cubic, quadratic)`` per-agent coefficients for the DGD kernel."""
        zero = np.zeros(n)
        if self.kind == "cubic":
            return True, self.rho_vector(n), zero
        if self.kind == "gradient":
            return False, zero, np.full(n, float(self.eta_g))
        return True, zero, np.full(n, float(self.eta_H))

    @property
    def reg_scale(self):
        return {"cubic": self.rho_max, "gradient": self.eta_g, "newton": self.eta_H}[self.kind]


@dataclass
class AnalysisConstants:
    """Constants entering the batch-size guarantee; reporting only."""

    sigma1: float = 0.0
    sigma2: float = 0.0
    M1: float = 0.0
    M2: float = 0.0
    c_bar: float = 1.0
    zeta: float = 0.1
    kappa: float = 0.0
    psi_g: float = 0.0
    psi_H: float = 0.0

    def batch_size(self, rho, epsilon):
        """Leading factor of the sufficient batch size, log term with unit constant."""
        cb = self.c_bar
        lead = max(self.M1 / (cb * epsilon), self.sigma1**2 / (cb**2 * epsilon**2),
                   self.M2 / (cb * math.sqrt(rho * epsilon)), self.sigma2**2 / (cb**2 * rho * epsilon))
        return lead * max(1.0, math.log(1.0 / (epsilon**1.5 * self.zeta * cb)))


@dataclass
class Batch:
    """Inner solutions for ``S`` samples and ``L`` time steps.

    ``chi`` and ``p_tilde`` have shape ``(S, L, n)``; ``iterations`` is
    ``(S, L)``.
    """

    chi: np.ndarray
    p_tilde: np.ndarray
    iterations: np.ndarray
    delta: float

    @property
    def S(self):
        return self.chi.shape[0]


@dataclass
class Condition1Report:
    residual: float
    residual_ok: bool
    margin: float
    decrease_ok: bool
    step_norm: float

    @property
    def ok(self):
        return self.residual_ok and self.decrease_ok


@dataclass
class SubsolveResult:
    x: np.ndarray
    iterations: int
    converged: bool


@dataclass
class OuterRecord:
    k: int
    F_S: float
    disagreement: float
    subsolver_iters: int
    inner_iters_mean: float
    cond1: Condition1Report
    step_norm: float
    wall_ms: float


@dataclass
class OuterState:
    x: np.ndarray
    k: int = 0
    history: list = field(default_factory=list)


def batch_chi(seed, k, S, scenario):
    """Realizations for outer iteration ``k``, identical for every method."""
    L, n = scenario.horizon, scenario.n
    out = np.empty((S, L, n))
    for s in range(S):
        for l in range(L):
            out[s, l] = sample_chi(scenario.dist, streams.stream(seed, streams.BATCH, k, s, l))
    return out


def assemble_batch(x, S, delta, scenario, g, seed, k=0, threads=1,
                   max_iters=DEFAULT_MAX_ITERS, chi=None, common_x=False):
    """Sample and solve ``S`` (times horizon) inner problems at the local copies ``x``.

    Each (sample, time step) pair draws from its own stream so the result
    does not depend on ``threads``.  With ``common_x`` every agent uses the
    agent average instead of its own copy.
    """
    x = np.asarray(x, dtype=np.float64).reshape(scenario.n, scenario.d)
    if common_x:
        x = np.broadcast_to(x.mean(axis=0), x.shape).copy()
    if chi is None:
        chi = batch_chi(seed, k, S, scenario)
    L = scenario.horizon
    jobs = [(s, l) for s in range(S) for l in range(L)]

    def work(job):
        s, l = job
        try:
            return solve_inner(x, chi[s, l], delta, scenario.models[l], g, scenario.p_ref,
                               max_iters=max_iters)
        except MaxItersExceeded as exc:
            exc.sample = job
            raise

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    p = np.empty_like(chi)
    iters = np.empty((S, L), dtype=np.int64)
    for (s, l), res in zip(jobs, results):
        p[s, l] = res.p_tilde
        iters[s, l] = res.iterations
    return Batch(chi, p, iters, delta)


def frozen_objective(batch, x, scenario):
    """``F^S(x)``: batch average of ``sum_i f_i(x_i, p_tilde_i)`` with ``p_tilde`` held fixed."""
    x = np.asarray(x, dtype=np.float64).reshape(scenario.n, scenario.d)
    L = scenario.horizon
    total = 0.0
    for l, model in enumerate(scenario.models):
        total += np.sum(model.value(x, batch.p_tilde[:, l, :]))
    return total / (batch.S * L)


def empirical_derivatives(batch, x, scenario):
    """Gradient ``(n, d)`` and block-diagonal Hessian ``(n, d, d)`` of ``F^S`` at ``x``."""
    x = np.asarray(x, dtype=np.float64).reshape(scenario.n, scenario.d)
    n, d, L = scenario.n, scenario.d, scenario.horizon
    gk = np.zeros((n, d))
    Hk = np.zeros((n, d, d))
    for l, model in enumerate(scenario.models):
        p = batch.p_tilde[:, l, :]
        gk += model.grad_x(x, p).sum(axis=0)
        Hk += model.hess_x(x, p).sum(axis=0)
    scale = 1.0 / (batch.S * L)
    return gk * scale, Hk * scale


def dense_hessian(Hk):
    """Assemble the full ``nd x nd`` block-diagonal matrix."""
    n, d, _ = Hk.shape
    H = np.zeros((n * d, n * d))
    for i in range(n):
        H[i * d:(i + 1) * d, i * d:(i + 1) * d] = Hk[i]
    return H


def submodel_eval(params, x, x_k, gk, Hk, F_Sk):
    """Value and gradient of the chosen submodel at ``x`` (both ``(n, d)``)."""
    x = np.asarray(x, dtype=np.float64)
    xi = x - x_k
    n = xi.shape[0]
    use_h, cubic, quad = params.coefficients(n)
    nrm = np.linalg.norm(xi, axis=1)
    value = F_Sk + float(np.sum(gk * xi))
    grad = gk.copy()
    if use_h:
        Hxi = np.einsum("icj,ij->ic", Hk, xi)
        value += 0.5 * float(np.sum(xi * Hxi))
        grad += Hxi
    value += float(np.sum(cubic / 6.0 * nrm**3 + quad / 2.0 * nrm**2))
    grad += (0.5 * cubic * nrm + quad)[:, None] * xi
    return value, grad


@dataclass
class SubsolverOptions:
    tol: float = 1e-6
    t_max: int = 50_000
    r_min: float = 1e-3
    r_max: float = 10.0
    blowup: float = 1e8
    # also require the consensus residual to fall below this fraction of the
    # agreement tolerance before stopping; None keeps the update-size rule only
    agreement_factor: float = None
    # "cauchy": exact minimizer of the submodel along -g; "scaled": |g| / reg
    radius: str = "cauchy"


def cauchy_radius(gk, Hk, use_h, cubic, quad):
    """Step length minimizing the separable submodel along ``-gk / |gk|``.

    Along that ray the model is ``-r|g| + r^2 (kappa + q) / 2 + r^3 c / 6``
    with ``kappa = u^T H u``, ``q = sum_i quad_i |u_i|^2`` and
    ``c = sum_i cubic_i |u_i|^3`` for the unit direction ``u``.  Returns
    ``inf`` when the ray is unbounded below.
    """
    gnorm = float(np.linalg.norm(gk))
    u = gk / gnorm
    un = np.linalg.norm(u, axis=1)
    curv = float(np.sum(quad * un**2))
    if use_h:
        curv += float(np.einsum("ic,icj,ij->", u, Hk, u))
    c3 = float(np.sum(cubic * un**3))
    if c3 > 0:
        return 2.0 * gnorm / (curv + math.sqrt(curv * curv + 2.0 * c3 * gnorm))
    return gnorm / curv if curv > 0 else math.inf


def dgd_subsolve(params, x_k, g, gk, Hk, options=None, backend=None):
    """Minimize the submodel over the agreement subspace by decentralized gradient descent.

    Starts from ``x_k - r gk / |gk|`` with ``r`` clipped to ``[r_min, r_max]``:
    by default the Cauchy radius (see :func:`cauchy_radius`), or
    ``|gk| / reg`` (``reg`` is rho, eta_g or eta_H by kind) with
    ``radius="scaled"``.  Steps are ``alpha0 / t`` with
    ``alpha0 = 1 / (|H|_2 + rho r + eta)``.
    """
    opts = options or SubsolverOptions()
    x_k = np.ascontiguousarray(x_k, dtype=np.float64)
    n, d = x_k.shape
    use_h, cubic, quad = params.coefficients(n)
    gnorm = float(np.linalg.norm(gk))
    if gnorm > 0:
        if opts.radius == "cauchy":
            r = cauchy_radius(gk, Hk, use_h, cubic, quad)
        elif opts.radius == "scaled":
            r = gnorm / params.reg_scale
        else:
            raise ValueError(f"unknown radius rule {opts.radius!r}")
        r = min(max(r, opts.r_min), opts.r_max)
        x0 = x_k - r * gk / gnorm
    else:
        r = 0.0
        x0 = x_k.copy()
    h_norm = float(np.max(np.linalg.norm(Hk, ord=2, axis=(1, 2)))) if use_h else 0.0
    denom = h_norm + float(np.max(cubic)) * r + float(np.max(quad))
    alpha0 = 1.0 / denom if denom > 0 else 1.0
    agree = math.inf if opts.agreement_factor is None else \
        opts.agreement_factor * agreement_tolerance(n, d)
    kern = kernels.get(backend)
    x, it, status = kern.dgd_solve(g.indptr, g.indices, g.lambdaN, np.ascontiguousarray(x0), x_k,
                                   np.ascontiguousarray(gk, dtype=np.float64),
                                   np.ascontiguousarray(Hk, dtype=np.float64), use_h,
                                   cubic, quad, alpha0, opts.tol, int(opts.t_max), opts.blowup, agree)
    if status == 2:
        raise SubsolverDiverged(f"DGD iterate norm exceeded {opts.blowup:g} at t={it}")
    return SubsolveResult(x, int(it), status == 0)


def agreement_residual(x, g):
    """``||(L kron I_d) x||``."""
    return float(np.linalg.norm(g.L @ np.asarray(x).reshape(g.n, -1)))


def agreement_tolerance(n, d):
    return 1e-4 * math.sqrt(n * d)


def check_condition1(x_k, x_next, m_next, m_k, params, g, tol=None):
    """Consensus residual and decrease margin of a subsolver output."""
    x_next = np.asarray(x_next)
    n, d = x_next.reshape(g.n, -1).shape
    tol = agreement_tolerance(n, d) if tol is None else tol
    res = agreement_residual(x_next, g)
    step = float(np.linalg.norm(x_next - x_k))
    c, eps = params.c, params.epsilon
    margin = m_next - m_k + c * eps * step + c * math.sqrt(params.rho_max * eps) * step**2
    return Condition1Report(res, res <= tol, float(margin), margin < 0, step)


def disagreement(x):
    """Norm of ``x`` minus its agent average, coordinate by coordinate."""
    x = np.asarray(x, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    return float(np.linalg.norm(x - x.mean(axis=0, keepdims=True)))


@dataclass
class OuterConfig:
    S: int = 20
    delta: float = 0.1
    K_outer: int = 100
    x0: float = 0.0
    seed: int = 0
    threads: int = 1
    max_inner_iters: int = DEFAULT_MAX_ITERS
    subsolver: SubsolverOptions = field(default_factory=SubsolverOptions)
    max_cond1_fail_fraction: float = 0.75
    record_wall_time: bool = False
    # solve inner problems at the agent average rather than each local copy
    common_x: bool = False


def run_outer(scenario, g, params, config, callback=None):
    """Run ``K_outer`` outer iterations and return the final :class:`OuterState`.

    ``callback(state, record)`` is invoked after every iteration (and once
    at ``k = 0`` with ``record=None``) so the harness can evaluate metrics
    without this module depending on them.
    """
    n, d = scenario.n, scenario.d
    state = OuterState(np.full((n, d), float(config.x0)))
    if callback:
        callback(state, None)
    failures = 0
    for k in range(config.K_outer):
        t0 = time.perf_counter()
        batch = assemble_batch(state.x, config.S, config.delta, scenario, g, config.seed, k,
                               config.threads, config.max_inner_iters,
                               common_x=config.common_x)
        gk, Hk = empirical_derivatives(batch, state.x, scenario)
        F_Sk = frozen_objective(batch, state.x, scenario)
        sub = dgd_subsolve(params, state.x, g, gk, Hk, config.subsolver)
        m_next, _ = submodel_eval(params, sub.x, state.x, gk, Hk, F_Sk)
        report = check_condition1(state.x, sub.x, m_next, F_Sk, params, g)
        if not report.decrease_ok:
            failures += 1
            log.info("k=%d: decrease condition failed (margin %.3e)", k, report.margin)
        step_norm = report.step_norm
        state.x = sub.x
        state.k = k + 1
        wall = (time.perf_counter() - t0) * 1e3 if config.record_wall_time else 0.0
        rec = OuterRecord(k + 1, F_Sk, disagreement(state.x), sub.iterations,
                          float(batch.iterations.mean()), report, step_norm, wall)
        state.history.append(rec)
        if callback:
            callback(state, rec)
    if config.K_outer and failures / config.K_outer > config.max_cond1_fail_fraction:
        raise Condition1Failure(f"decrease condition failed in {failures}/{config.K_outer} "
                                "iterations; check c, epsilon or the subsolver budget")
    return state
