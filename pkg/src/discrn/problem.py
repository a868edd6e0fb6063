"""Local cost models, sampling distributions and the experiment scenarios.

A cost model evaluates every agent at once.  ``x`` is the stacked outer
variable with shape ``(n, d)`` (row ``i`` is agent ``i``'s local copy) and
``p`` has shape ``(..., n)``; leading axes of ``p`` index independent
samples and broadcast through every evaluator.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import streams

SCENARIOS = ("nonconvex", "ev_tou", "two_driver")
_SCENARIO_IDS = {"nonconvex": 0, "ev_tou": 1, "two_driver": 2}

DERIVATIVES = ("f", "dp", "dpp", "dx", "dxx")


class CostModel:
    """Separable cost ``sum_i f_i(x_i, p_i)`` with analytic derivatives.

    Subclasses implement the five evaluators.  ``p_coefficients`` returns
    ``(curv, lin)`` with ``df_i/dp_i = curv_i * p_i + lin_i`` when every
    ``f_i`` is quadratic in ``p_i``, and ``None`` otherwise; the inner solver
    uses it to hand the whole flow to the compiled kernel.
    """

    n: int
    d: int
    omega_bounds: np.ndarray   # global lower bounds on d2f_i/dp_i2
    rho_bounds: np.ndarray     # Hessian-Lipschitz constants in x (inf if none exists)

    def value(self, x, p):
        raise NotImplementedError

    def grad_p(self, x, p):
        raise NotImplementedError

    def hess_p(self, x, p):
        raise NotImplementedError

    def grad_x(self, x, p):
        raise NotImplementedError

    def hess_x(self, x, p):
        raise NotImplementedError

    def p_coefficients(self, x):
        return None

    def omega(self, x):
        """Per-agent strong-convexity bound in ``p_i`` at fixed ``x``."""
        raise NotImplementedError

    def theta(self, x):
        """Per-agent upper curvature bound in ``p_i`` at fixed ``x``."""
        raise NotImplementedError

    def as_x(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 0:
            x = np.full((self.n, self.d), float(x))
        elif x.ndim == 1 and x.shape[0] == self.d and self.d != self.n:
            x = np.broadcast_to(x, (self.n, self.d))
        return x.reshape(self.n, self.d)


class ScalarQuadraticCost(CostModel):
    """Costs ``f_i = A_i(x) p^2 / 2 + B_i(x) p + C_i(x)`` with scalar ``x``.

    Subclasses return the three coefficient functions and their first two
    derivatives from ``_coeffs``; all evaluators follow from those.
    """

    d = 1

    def _coeffs(self, x):
        """Return ``(A, dA, d2A, B, dB, d2B, C, dC, d2C)``, each shaped like ``x``."""
        raise NotImplementedError

    def _eval(self, x):
        return self._coeffs(self.as_x(x)[:, 0])

    def value(self, x, p):
        A, _, _, B, _, _, C, _, _ = self._eval(x)
        return 0.5 * A * p * p + B * p + C

    def grad_p(self, x, p):
        A, _, _, B, _, _, _, _, _ = self._eval(x)
        return A * p + B

    def hess_p(self, x, p):
        A = self._eval(x)[0]
        return np.broadcast_to(A, np.shape(p)).copy()

    def grad_x(self, x, p):
        _, dA, _, _, dB, _, _, dC, _ = self._eval(x)
        return (0.5 * dA * p * p + dB * p + dC)[..., None]

    def hess_x(self, x, p):
        _, _, d2A, _, _, d2B, _, _, d2C = self._eval(x)
        return (0.5 * d2A * p * p + d2B * p + d2C)[..., None, None]

    def p_coefficients(self, x):
        A, _, _, B, _, _, _, _, _ = self._eval(x)
        return A, B

    def omega(self, x):
        return self._eval(x)[0]

    theta = omega


def _horner(coef, x):
    """Evaluate per-agent polynomials; ``coef`` is ``(n, k)``, highest degree first."""
    out = np.zeros_like(x) + coef[:, 0]
    for k in range(1, coef.shape[1]):
        out = out * x + coef[:, k]
    return out


class TwoDriverCost(ScalarQuadraticCost):
    """``f_i = (k_i x + p_i - r_i)^2``; the two EV drivers with PV panels."""

    def __init__(self, k=(2.0, 1.0), r=(1.0, 2.0)):
        self.k = np.asarray(k, dtype=np.float64)
        self.r = np.asarray(r, dtype=np.float64)
        self.n = len(self.k)
        self.omega_bounds = np.full(self.n, 2.0)
        self.rho_bounds = np.zeros(self.n)

    def _coeffs(self, x):
        k, r = self.k, self.r
        u = k * x - r
        z = np.zeros_like(u)
        A = np.full_like(u, 2.0)
        return A, z, z, 2 * u, 2 * k + z, z, u * u, 2 * k * u, 2 * k * k + z


class NonconvexCost(ScalarQuadraticCost):
    """``f_i = alpha_i(x) p^2 / 2 + beta_i(x) p`` with quartic ``alpha_i``.

    ``alpha_i(x) = a1 (x - z1)(x - z2)(x - z3)(x - z4) + a2`` and
    ``beta_i(x) = b1 (x - z5)(x - z6)``; ``a2`` is set so that the global
    minimum of ``alpha_i`` over the real line equals ``omega_i``.
    """

    def __init__(self, a1, z, b1, z5, z6, omega):
        self.a1 = np.asarray(a1, dtype=np.float64)
        self.z = np.asarray(z, dtype=np.float64).reshape(-1, 4)
        self.b1 = np.asarray(b1, dtype=np.float64)
        self.z5 = np.asarray(z5, dtype=np.float64)
        self.z6 = np.asarray(z6, dtype=np.float64)
        self.omega_bounds = np.asarray(omega, dtype=np.float64)
        self.n = len(self.a1)
        self.rho_bounds = np.full(self.n, np.inf)

        quart = np.array([self.a1[i] * np.poly(self.z[i]) for i in range(self.n)])
        self.a2 = np.array([w - quartic_minimum(q) for q, w in zip(quart, self.omega_bounds)])
        alpha = quart.copy()
        alpha[:, -1] += self.a2
        beta = np.stack([self.b1, -self.b1 * (self.z5 + self.z6), self.b1 * self.z5 * self.z6], axis=1)
        self.alpha_coef = alpha
        self.beta_coef = beta
        self._dalpha = np.array([np.polyder(c) for c in alpha])
        self._d2alpha = np.array([np.polyder(c, 2) for c in alpha])
        self._dbeta = np.array([np.polyder(c) for c in beta])

    def alpha(self, x):
        return _horner(self.alpha_coef, np.asarray(x, dtype=np.float64))

    def _coeffs(self, x):
        z = np.zeros_like(x)
        return (_horner(self.alpha_coef, x), _horner(self._dalpha, x), _horner(self._d2alpha, x),
                _horner(self.beta_coef, x), _horner(self._dbeta, x), 2 * self.b1 + z,
                z, z, z)


def quartic_minimum(coef):
    """Global minimum over the reals of a quartic with positive leading coefficient."""
    crit = np.roots(np.polyder(coef))
    crit = crit[np.abs(crit.imag) < 1e-9].real
    return float(np.min(np.polyval(coef, crit)))


class TimeOfUseCost(ScalarQuadraticCost):
    """One time step of the EV charging cost under a time-of-use price.

    ``f_i = a_i P p^2 + b_i P p + c_i (p - p_low_i - d_i x)^2``.
    """

    def __init__(self, price, a, b, c, d, p_low):
        self.price = float(price)
        self.a, self.b, self.c, self.dd, self.p_low = (np.asarray(v, dtype=np.float64)
                                                      for v in (a, b, c, d, p_low))
        self.n = len(self.a)
        self.omega_bounds = 2 * (self.a * self.price + self.c)
        self.rho_bounds = np.zeros(self.n)

    def _coeffs(self, x):
        P, a, b, c, dd, pl = self.price, self.a, self.b, self.c, self.dd, self.p_low
        z = np.zeros_like(x)
        shift = pl + dd * x
        A = 2 * (a * P + c) + z
        return (A, z, z,
                b * P - 2 * c * shift, -2 * c * dd + z, z,
                c * shift * shift, 2 * c * dd * shift, 2 * c * dd * dd + z)


def cost_derivatives(model, i, x_i, p_i, which):
    """Evaluate one quantity for a single agent ``i``.

    ``which`` is one of ``"f"``, ``"dp"``, ``"dpp"``, ``"dx"``, ``"dxx"``.
    Returns a float for the first three, a ``(d,)`` vector for ``"dx"`` and a
    ``(d, d)`` matrix for ``"dxx"``.
    """
    if which not in DERIVATIVES:
        raise ValueError(f"unknown derivative selector {which!r}")
    x = np.zeros((model.n, model.d))
    x[i] = np.asarray(x_i, dtype=np.float64).reshape(model.d)
    p = np.zeros(model.n)
    p[i] = float(p_i)
    fn = {"f": model.value, "dp": model.grad_p, "dpp": model.hess_p,
          "dx": model.grad_x, "dxx": model.hess_x}[which]
    out = fn(x, p)[i]
    return float(out) if which in ("f", "dp", "dpp") else np.array(out)


# -- distributions ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DistributionSpec:
    """Product of independent per-agent marginals, each Dirac or Uniform.

    A Dirac marginal at ``a`` is stored as ``low = high = a``.
    """

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        low = np.asarray(self.low, dtype=np.float64)
        high = np.asarray(self.high, dtype=np.float64)
        if low.shape != high.shape or low.ndim != 1:
            raise ValueError("low/high must be 1-D arrays of equal length")
        if np.any(high < low):
            raise ValueError("uniform marginals need low < high")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @classmethod
    def dirac(cls, values):
        v = np.asarray(values, dtype=np.float64)
        return cls(v, v.copy())

    @classmethod
    def uniform(cls, n, a, b):
        if not a < b:
            raise ValueError("uniform marginals need a < b")
        return cls(np.full(n, float(a)), np.full(n, float(b)))

    @property
    def n(self):
        return len(self.low)

    @property
    def is_deterministic(self):
        return bool(np.all(self.low == self.high))

    @property
    def mean(self):
        return 0.5 * (self.low + self.high)


def sample_chi(spec, rng, size=None):
    """Draw realizations; ``size`` prepends sample axes to the ``(n,)`` shape.

    Always consumes one uniform per component so Dirac and Uniform
    marginals use the stream identically.
    """
    shape = (spec.n,) if size is None else tuple(np.atleast_1d(size)) + (spec.n,)
    u = rng.random(shape)
    return spec.low + (spec.high - spec.low) * u


# -- scenarios -------------------------------------------------------------

@dataclass(eq=False)
class Scenario:
    """A complete outer/inner problem instance.

    ``models`` has one cost model per time step; static scenarios have a
    single step.  The outer objective averages over the steps.
    """

    name: str
    models: list
    dist: DistributionSpec
    p_ref: float
    params: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.models[0].n

    @property
    def d(self):
        return self.models[0].d

    @property
    def horizon(self):
        return len(self.models)

    def save(self, path):
        save_params(self.params, path)


def make_two_driver_example(weather="sunny"):
    """Two EV drivers with PV generation; ``weather`` is sunny or cloudy."""
    if weather == "sunny":
        dist = DistributionSpec.dirac([1.5, 1.5])
    elif weather == "cloudy":
        dist = DistributionSpec.uniform(2, 0.0, 1.5)
    else:
        raise ValueError(f"weather must be 'sunny' or 'cloudy', got {weather!r}")
    params = {"scenario": "two_driver", "weather": weather, "n": 2, "p_ref": 0.0,
              "agents": [{"agent": 1, "k": 2.0, "r": 1.0}, {"agent": 2, "k": 1.0, "r": 2.0}]}
    return Scenario("two_driver", [TwoDriverCost()], dist, 0.0, params)


_NONCONVEX_RANGES = (
    ("a1", 0.5, 1.5), ("z1", -2.0, -1.0), ("z2", -1.0, 0.0), ("z3", 0.0, 1.0), ("z4", 1.0, 2.0),
    ("b1", -1.0, 1.0), ("z5", -2.0, 0.0), ("z6", 0.0, 2.0), ("omega", 1.0, 5.0),
)
_EV_RANGES = (("a", 1.0, 3.0), ("b", 1.0, 3.0), ("c", 1.0, 3.0), ("d", 1.0, 3.0), ("p_low", 0.0, 2.0))


def _draw_agents(seed, scenario, n, ranges):
    sid = _SCENARIO_IDS[scenario]
    agents = []
    for i in range(n):
        rec = {"agent": i + 1}
        for j, (key, lo, hi) in enumerate(ranges):
            rec[key] = float(streams.stream(seed, streams.SCENARIO, sid, i, j).uniform(lo, hi))
        agents.append(rec)
    return agents


def make_nonconvex_scenario(n, seed, p_ref=None):
    """Synthetic nonconvex scenario with quartic curvature and quadratic tilt.

    ``p_ref`` defaults to ``n`` (40 for the 40-agent configuration).
    """
    if n < 2:
        raise ValueError("need n >= 2")
    params = {"scenario": "nonconvex", "n": int(n), "seed": int(seed),
              "p_ref": float(n if p_ref is None else p_ref),
              "chi_low": 0.0, "chi_high": 1.5,
              "agents": _draw_agents(seed, "nonconvex", n, _NONCONVEX_RANGES)}
    return scenario_from_params(params)


def time_of_use_prices(horizon=60):
    """Price ``P_l`` for ``l = 1 .. horizon``: 2, then 4, then 1, in thirds of 60."""
    l = np.arange(1, horizon + 1)
    return np.where(l <= 20, 2.0, np.where(l <= 40, 4.0, 1.0))


def make_ev_tou_scenario(n, horizon=60, seed=0, p_ref=40.0):
    """EV charging over a time-of-use price horizon."""
    if n < 2:
        raise ValueError("need n >= 2")
    params = {"scenario": "ev_tou", "n": int(n), "seed": int(seed), "horizon": int(horizon),
              "p_ref": float(p_ref), "chi_low": 0.5, "chi_high": 1.5,
              "prices": [float(v) for v in time_of_use_prices(horizon)],
              "agents": _draw_agents(seed, "ev_tou", n, _EV_RANGES)}
    return scenario_from_params(params)


def scenario_from_params(params):
    """Rebuild a :class:`Scenario` from its serialized parameter record."""
    name = params["scenario"]
    if name == "two_driver":
        return make_two_driver_example(params.get("weather", "sunny"))
    agents = params["agents"]
    n = len(agents)
    col = {k: np.array([a[k] for a in agents]) for k in agents[0] if k != "agent"}
    dist = DistributionSpec.uniform(n, params["chi_low"], params["chi_high"])
    if name == "nonconvex":
        z = np.stack([col["z1"], col["z2"], col["z3"], col["z4"]], axis=1)
        model = NonconvexCost(col["a1"], z, col["b1"], col["z5"], col["z6"], col["omega"])
        for rec, a2 in zip(agents, model.a2):
            rec["a2"] = float(a2)
        models = [model]
    elif name == "ev_tou":
        models = [TimeOfUseCost(P, col["a"], col["b"], col["c"], col["d"], col["p_low"])
                  for P in params["prices"]]
    else:
        raise ValueError(f"unknown scenario {name!r}")
    return Scenario(name, models, dist, float(params["p_ref"]), params)


def save_params(params, path):
    Path(path).write_text(yaml.safe_dump(params, sort_keys=False))


def load_params(path):
    return yaml.safe_load(Path(path).read_text())


def load_scenario(path):
    return scenario_from_params(load_params(path))
