"""Distributed solver for the inner resource-allocation problem.

For a fixed outer variable ``x`` and realization ``chi_hat`` the agents
minimize ``sum_i f_i(x_i, p_i)`` subject to ``sum_i p_i = p_ref +
sum_i chi_hat_i`` by running the Laplacian flow

    p+ = p - eta * L grad_p f(x, p)

from a feasible start.  Because ``1^T L = 0`` the budget never moves.  Each
agent stops once its own step satisfies
``|p_i+ - p_i| <= delta * eta * lambda2 * omega / sqrt(n)``, which certifies
``||p+ - p*|| <= delta``.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (BisectionBracketFailure, InvalidConstants, MaxItersExceeded,
                     NonFiniteGradient)

log = logging.getLogger(__name__)

DEFAULT_MAX_ITERS = 10**6


@dataclass
class InnerState:
    p: np.ndarray
    chi_hat: np.ndarray
    p_ref: float
    x: np.ndarray
    iter: int = 0

    @property
    def budget(self):
        return self.p_ref + float(np.sum(self.chi_hat))


@dataclass
class InnerResult:
    p_tilde: np.ndarray
    iterations: int
    final_step_norms: np.ndarray
    eta_used: float
    delta: float
    tol: float
    iteration_bound: float = math.inf
    trace: list = field(default=None, repr=False)


def feasible_init(chi_hat, p_ref, designated=0):
    """Feasible start: the designated agent also carries ``p_ref``."""
    p = np.array(chi_hat, dtype=np.float64, copy=True)
    p[designated] += p_ref
    return p


def inner_step_size(omega, theta, lambda2, lambdaN, mode="exponential"):
    """Flow step size.

    ``"asymptotic"`` gives ``1 / (theta lambdaN)``, half the largest step for
    which the flow is a descent method; ``"exponential"`` gives
    ``omega lambda2 / (theta^2 lambdaN^2)``, the step with the best
    guaranteed contraction of ``||p - p*||``.
    """
    if not (0 < omega <= theta) or not (0 < lambda2 <= lambdaN):
        raise InvalidConstants(f"need 0 < omega <= theta and 0 < lambda2 <= lambdaN, got "
                               f"omega={omega}, theta={theta}, lambda2={lambda2}, lambdaN={lambdaN}")
    if mode == "asymptotic":
        return 1.0 / (theta * lambdaN)
    if mode == "exponential":
        return omega * lambda2 / (theta**2 * lambdaN**2)
    raise ValueError(f"unknown step-size mode {mode!r}")


def contraction_rate(omega, theta, lambda2, lambdaN):
    """Guaranteed per-step contraction of ``||p - p*||`` at the exponential step size."""
    r = (omega * lambda2) / (lambdaN * theta)
    return math.sqrt(max(0.0, 1.0 - r * r))


def iteration_bound(delta, initial_error, rate):
    """Iterations after which ``||p^K - p*|| <= delta`` is guaranteed."""
    if initial_error <= delta:
        return 0
    if rate <= 0.0:
        return 1
    if rate >= 1.0:
        return math.inf
    return math.ceil(math.log(delta / initial_error) / math.log(rate))


def stopping_tolerance(delta, eta, lambda2, omega, n):
    return delta * eta * lambda2 * omega / math.sqrt(n)


def laplacian_flow_step(state, eta, model, g):
    """One flow step; agent ``i`` uses only its own and its neighbors' gradients."""
    grad = model.grad_p(state.x, state.p)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient(f"non-finite gradient at iteration {state.iter}")
    return state.p - eta * kernels.backend.laplacian_apply(g.indptr, g.indices, grad)


def _instance_constants(model, x):
    omega = float(np.min(model.omega(x)))
    theta = float(np.max(model.theta(x)))
    return omega, theta


def solve_inner(x, chi_hat, delta, model, g, p_ref, max_iters=DEFAULT_MAX_ITERS,
                trace=False, p_star=None, designated=0, backend=None):
    """Run the flow from the feasible start until the local stopping test passes.

    Returns the post-criterion iterate in an :class:`InnerResult`.  With
    ``trace=True`` the loop runs step by step in Python and records
    ``(iteration, f(x, p), ||p - p_star||, max_i |p_i+ - p_i|)`` rows; the
    error column is ``nan`` unless ``p_star`` is supplied.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    x = model.as_x(x)
    chi_hat = np.asarray(chi_hat, dtype=np.float64)
    n = model.n
    omega, theta = _instance_constants(model, x)
    eta = inner_step_size(omega, theta, g.lambda2, g.lambdaN, "exponential")
    tol = stopping_tolerance(delta, eta, g.lambda2, omega, n)
    p0 = feasible_init(chi_hat, p_ref, designated)
    kern = kernels.get(backend)

    bound = math.inf
    if log.isEnabledFor(logging.DEBUG) or p_star is not None:
        ref = p_star if p_star is not None else kkt_oracle(x, chi_hat, p_ref, model)
        rate = contraction_rate(omega, theta, g.lambda2, g.lambdaN)
        bound = iteration_bound(delta, float(np.linalg.norm(p0 - ref)), rate)
        log.debug("inner solve: eta=%.3e tol=%.3e iteration bound=%s", eta, tol, bound)

    coeffs = None if trace else model.p_coefficients(x)
    if coeffs is not None:
        curv, lin = (np.ascontiguousarray(np.broadcast_to(c, (n,)), dtype=np.float64) for c in coeffs)
        p, it, status, step = kern.flow_solve(g.indptr, g.indices, curv, lin, p0,
                                              eta, tol, int(max_iters))
        if status == 2:
            raise NonFiniteGradient(f"non-finite gradient at iteration {it}")
        if status == 1:
            raise MaxItersExceeded(f"stopping criterion not met in {max_iters} iterations "
                                   f"(max step {step.max():.3e} > {tol:.3e})", p=p, step_norms=step)
        return InnerResult(p, int(it), step, eta, delta, tol, bound)

    state = InnerState(p0, chi_hat, p_ref, x)
    rows = [] if trace else None
    step = np.zeros(n)
    while state.iter < max_iters:
        p_next = laplacian_flow_step(state, eta, model, g)
        step = np.abs(p_next - state.p)
        state.p = p_next
        state.iter += 1
        if rows is not None:
            err = float(np.linalg.norm(state.p - p_star)) if p_star is not None else math.nan
            rows.append((state.iter, float(np.sum(model.value(x, state.p))), err, float(step.max())))
        if step.max() <= tol:
            return InnerResult(state.p, state.iter, step, eta, delta, tol, bound, rows)
    raise MaxItersExceeded(f"stopping criterion not met in {max_iters} iterations",
                           p=state.p, step_norms=step)


# -- independent optimality oracle -----------------------------------------

def _p_of_nu(model, x, nu):
    """Solve ``df_i/dp_i(x, p_i) = nu`` for every agent (broadcast over ``nu``'s leading axes)."""
    coeffs = model.p_coefficients(x)
    if coeffs is not None:
        curv, lin = coeffs
        return (nu - lin) / curv
    # Safeguarded Newton: the root lies within |r(0)| / omega_i of zero.
    omega = model.omega(x)
    r0 = model.grad_p(x, np.zeros_like(nu)) - nu
    lo = -np.abs(r0) / omega
    hi = np.abs(r0) / omega
    p = np.zeros_like(nu)
    for _ in range(200):
        r = model.grad_p(x, p) - nu
        lo = np.where(r < 0, p, lo)
        hi = np.where(r > 0, p, hi)
        cand = p - r / model.hess_p(x, p)
        bad = (cand <= lo) | (cand >= hi) | ~np.isfinite(cand)
        cand = np.where(bad, 0.5 * (lo + hi), cand)
        if np.all(np.abs(cand - p) <= 1e-15 * (1 + np.abs(p))):
            return cand
        p = cand
    return p


def kkt_oracle_batch(x, chis, p_ref, model, tol=1e-10, max_bisections=400):
    """Exact allocations for many realizations at once.

    Bisects the shared multiplier ``nu`` (``sum_i p_i(nu)`` is increasing)
    independently per row of ``chis`` until the budget residual is below
    ``tol``.  Returns ``(p_star, nu)`` with shapes ``(M, n)`` and ``(M,)``.
    """
    x = model.as_x(x)
    chis = np.atleast_2d(np.asarray(chis, dtype=np.float64))
    M, n = chis.shape
    budget = p_ref + chis.sum(axis=1)

    def excess(nu):
        return _p_of_nu(model, x, np.broadcast_to(nu[:, None], (M, n)).copy()).sum(axis=1) - budget

    lo = np.full(M, -1.0)
    hi = np.full(M, 1.0)
    while True:
        need_lo = excess(lo) > 0
        need_hi = excess(hi) < 0
        if not (need_lo.any() or need_hi.any()):
            break
        lo = np.where(need_lo, 2 * lo, lo)
        hi = np.where(need_hi, 2 * hi, hi)
        if np.any(lo < -1e12) or np.any(hi > 1e12):
            raise BisectionBracketFailure("no multiplier bracket within [-1e12, 1e12]")

    nu = 0.5 * (lo + hi)
    for _ in range(max_bisections):
        r = excess(nu)
        done = (np.abs(r) <= tol) | (hi - lo <= 4 * np.finfo(float).eps * np.maximum(1, np.abs(nu)))
        if np.all(done):
            break
        lo = np.where(~done & (r < 0), nu, lo)
        hi = np.where(~done & (r > 0), nu, hi)
        nu = np.where(done, nu, 0.5 * (lo + hi))
    p = _p_of_nu(model, x, np.broadcast_to(nu[:, None], (M, n)).copy())
    return p, nu


def kkt_oracle(x, chi_hat, p_ref, model, tol=1e-10, return_nu=False):
    """Exact minimizer of the inner problem by bisection on the multiplier."""
    chi_hat = np.asarray(chi_hat, dtype=np.float64)
    if model.n == 1:
        p = np.array([p_ref + chi_hat[0]])
        return (p, float(model.grad_p(model.as_x(x), p)[0])) if return_nu else p
    p, nu = kkt_oracle_batch(x, chi_hat[None, :], p_ref, model, tol)
    return (p[0], float(nu[0])) if return_nu else p[0]
