"""Experiment driver: configuration, evaluation metrics and CSV output.

A run executes every requested method on one scenario, one graph and one
stream of batch realizations (so methods see common random numbers), and
evaluates each outer iterate with the exact inner minimizer over a fixed
set of ``M`` evaluation realizations.

Configuration is YAML with five sections; every key is optional except
``scenario.name``::

    scenario:   {name: nonconvex, n: 40, seed: 0, p_ref: null, horizon: 60,
                 weather: sunny, params_file: null, chi: {low: 0, high: 1.5}}
    graph:      {m: 120, seed: 0}            # or {file: edges.txt}
    outer:      {S: 20, delta: 0.1, K_outer: 100, x0: 0.0, rho: 50,
                 eta_g: 100, eta_H: 50, c: 1.0e-6, epsilon: 1.0e-2,
                 max_cond1_fail_fraction: 0.75, max_inner_iters: 1000000,
                 common_x: false}
    subsolver:  {tol: 1.0e-6, t_max: 50000, r_min: 1.0e-3, r_max: 10,
                 radius: cauchy, agreement_factor: null}
    experiment: {methods: [discrn, gradient, newton], eval_samples: 500,
                 seed: 0, out: runs/nonconvex, threads: 1, tau: 0.05,
                 record_wall_time: false}
"""

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import graph as graphs
from . import streams
from .errors import ConfigError, DiscrnError, PlateauUndetected
from .inner import kkt_oracle, kkt_oracle_batch, solve_inner
from .outer import (OuterConfig, SubmodelParams, SubsolverOptions, batch_chi, disagreement,
                    run_outer)
from .problem import (DistributionSpec, load_params, make_ev_tou_scenario,
                      make_nonconvex_scenario, make_two_driver_example, sample_chi,
                      scenario_from_params)

log = logging.getLogger(__name__)

CSV_COLUMNS = ("k", "F_hat", "disagreement", "subsolver_iters", "inner_iters_mean",
               "cond1_margin", "wall_ms")
TRACE_COLUMNS = ("iteration", "f", "err_to_oracle", "max_step")
METHOD_KINDS = {"discrn": "cubic", "gradient": "gradient", "newton": "newton"}
SCENARIOS = ("nonconvex", "ev_tou", "two_driver")


def fmt(v):
    """Floats with 17 significant digits, integers verbatim."""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return "%.17g" % float(v)


# -- configuration ----------------------------------------------------------

@dataclass
class ScenarioSection:
    name: str = None
    n: int = None
    seed: int = None
    p_ref: float = None
    horizon: int = 60
    weather: str = "sunny"
    params_file: str = None
    chi: dict = None


@dataclass
class GraphSection:
    file: str = None
    m: int = None
    seed: int = None


@dataclass
class OuterSection:
    S: int = 20
    delta: float = 0.1
    K_outer: int = 100
    x0: float = 0.0
    rho: float = 50.0
    eta_g: float = 100.0
    eta_H: float = 50.0
    c: float = 1e-6
    epsilon: float = 1e-2
    max_cond1_fail_fraction: float = 0.75
    max_inner_iters: int = 10**6
    common_x: bool = False


@dataclass
class SubsolverSection:
    tol: float = 1e-6
    t_max: int = 50_000
    r_min: float = 1e-3
    r_max: float = 10.0
    radius: str = "cauchy"
    agreement_factor: float = None


@dataclass
class ExperimentSection:
    methods: list = field(default_factory=lambda: ["discrn", "gradient", "newton"])
    eval_samples: int = 500
    seed: int = 0
    out: str = "runs/experiment"
    threads: int = 1
    tau: float = 0.05
    record_wall_time: bool = False


@dataclass
class ExperimentConfig:
    scenario: ScenarioSection
    graph: GraphSection = field(default_factory=GraphSection)
    outer: OuterSection = field(default_factory=OuterSection)
    subsolver: SubsolverSection = field(default_factory=SubsolverSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    base_dir: Path = field(default=Path("."), repr=False)

    def to_dict(self):
        d = asdict(self)
        d.pop("base_dir")
        return d

    def resolve(self, path):
        """Paths in the config are relative to the config file."""
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


_SECTIONS = {"scenario": ScenarioSection, "graph": GraphSection, "outer": OuterSection,
             "subsolver": SubsolverSection, "experiment": ExperimentSection}


def _section(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError("expected a mapping", field=name)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}", field=name)
    return cls(**raw)


def config_from_dict(raw, base_dir="."):
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s) {unknown}")
    if "scenario" not in raw:
        raise ConfigError("missing section", field="scenario")
    cfg = ExperimentConfig(**{k: _section(cls, raw.get(k), k) for k, cls in _SECTIONS.items()},
                           base_dir=Path(base_dir))
    validate_config(cfg)
    return cfg


def load_config(path, seed=None, out=None, threads=None):
    """Read a YAML config; command-line overrides replace the file's values."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML: {e}") from e
    cfg = config_from_dict(raw, path.parent)
    if seed is not None:
        cfg.experiment.seed = int(seed)
    if out is not None:
        cfg.experiment.out = str(out)
    if threads is not None:
        cfg.experiment.threads = int(threads)
    validate_config(cfg)
    return cfg


def _positive(value, name, integer=False, allow_zero=False):
    ok_type = isinstance(value, (int, np.integer)) if integer else \
        isinstance(value, (int, float, np.integer, np.floating))
    if isinstance(value, bool) or not ok_type:
        raise ConfigError(f"expected {'an integer' if integer else 'a number'}, got {value!r}",
                          field=name)
    if not math.isfinite(value) or value < 0 or (value == 0 and not allow_zero):
        raise ConfigError(f"must be {'non-negative' if allow_zero else 'positive'}, got {value!r}",
                          field=name)


def validate_config(cfg):
    sc, gr, ou, su, ex = cfg.scenario, cfg.graph, cfg.outer, cfg.subsolver, cfg.experiment
    if sc.name not in SCENARIOS:
        raise ConfigError(f"must be one of {SCENARIOS}, got {sc.name!r}", field="scenario.name")
    if sc.name != "two_driver" and sc.params_file is None:
        if sc.n is None:
            raise ConfigError("required unless params_file is given", field="scenario.n")
        _positive(sc.n, "scenario.n", integer=True)
        if sc.n < 2:
            raise ConfigError("need at least two agents", field="scenario.n")
    _positive(sc.horizon, "scenario.horizon", integer=True)
    if sc.p_ref is not None:
        _positive(sc.p_ref, "scenario.p_ref", allow_zero=True)
    if sc.weather not in ("sunny", "cloudy"):
        raise ConfigError(f"must be sunny or cloudy, got {sc.weather!r}", field="scenario.weather")
    if sc.chi is not None:
        if not isinstance(sc.chi, dict) or set(sc.chi) - {"low", "high"}:
            raise ConfigError("expected a mapping with keys low/high", field="scenario.chi")
        lo, hi = sc.chi.get("low", 0.0), sc.chi.get("high", sc.chi.get("low", 0.0))
        if not lo <= hi:
            raise ConfigError("low must not exceed high", field="scenario.chi")
    if gr.file is None and sc.name != "two_driver" and gr.m is None:
        raise ConfigError("give either file or m", field="graph")
    if gr.m is not None:
        _positive(gr.m, "graph.m", integer=True)
    for name in ("S", "K_outer", "max_inner_iters"):
        _positive(getattr(ou, name), f"outer.{name}", integer=True, allow_zero=name == "K_outer")
    for name in ("delta", "rho", "eta_g", "eta_H", "c", "epsilon"):
        _positive(getattr(ou, name), f"outer.{name}")
    if not isinstance(ou.x0, (int, float)):
        raise ConfigError(f"expected a number, got {ou.x0!r}", field="outer.x0")
    _positive(ou.max_cond1_fail_fraction, "outer.max_cond1_fail_fraction", allow_zero=True)
    _positive(su.tol, "subsolver.tol", allow_zero=True)
    _positive(su.t_max, "subsolver.t_max", integer=True)
    _positive(su.r_min, "subsolver.r_min", allow_zero=True)
    _positive(su.r_max, "subsolver.r_max")
    if su.radius not in ("cauchy", "scaled"):
        raise ConfigError(f"must be cauchy or scaled, got {su.radius!r}", field="subsolver.radius")
    if su.agreement_factor is not None:
        _positive(su.agreement_factor, "subsolver.agreement_factor")
    if not isinstance(ex.methods, list) or not ex.methods:
        raise ConfigError("must be a nonempty list", field="experiment.methods")
    bad = [m for m in ex.methods if m not in METHOD_KINDS]
    if bad or len(set(ex.methods)) != len(ex.methods):
        raise ConfigError(f"unknown or repeated methods {ex.methods}; choose from "
                          f"{list(METHOD_KINDS)}", field="experiment.methods")
    _positive(ex.eval_samples, "experiment.eval_samples", integer=True)
    _positive(ex.seed, "experiment.seed", integer=True, allow_zero=True)
    _positive(ex.threads, "experiment.threads", integer=True)
    _positive(ex.tau, "experiment.tau")


# -- building blocks from a config ------------------------------------------

def build_scenario(cfg):
    sc = cfg.scenario
    seed = cfg.experiment.seed if sc.seed is None else sc.seed
    if sc.params_file is not None:
        try:
            scenario = scenario_from_params(load_params(cfg.resolve(sc.params_file)))
        except (OSError, KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"cannot load scenario parameters: {e}",
                              field="scenario.params_file") from e
        if scenario.name != sc.name:
            raise ConfigError(f"file holds a {scenario.name!r} scenario",
                              field="scenario.params_file")
    elif sc.name == "two_driver":
        scenario = make_two_driver_example(sc.weather)
    elif sc.name == "nonconvex":
        scenario = make_nonconvex_scenario(sc.n, seed, p_ref=sc.p_ref)
    else:
        p_ref = 40.0 if sc.p_ref is None else sc.p_ref
        scenario = make_ev_tou_scenario(sc.n, sc.horizon, seed, p_ref=p_ref)
    if sc.p_ref is not None:
        scenario.p_ref = float(sc.p_ref)
    if sc.chi is not None:
        lo = float(sc.chi.get("low", 0.0))
        hi = float(sc.chi.get("high", lo))
        scenario.dist = (DistributionSpec.dirac(np.full(scenario.n, lo)) if lo == hi
                         else DistributionSpec.uniform(scenario.n, lo, hi))
    return scenario


def build_graph_from_config(cfg, n):
    gr = cfg.graph
    try:
        if gr.file is not None:
            g = graphs.read_edge_list(cfg.resolve(gr.file))
        elif gr.m is None:
            g = graphs.complete_graph(n)
        else:
            seed = cfg.experiment.seed if gr.seed is None else gr.seed
            g = graphs.random_connected_graph(n, gr.m, seed)
    except OSError as e:
        raise ConfigError(f"cannot read edge list: {e}", field="graph.file") from e
    except (DiscrnError, ValueError) as e:
        raise ConfigError(str(e), field="graph") from e
    if g.n != n:
        raise ConfigError(f"graph has {g.n} agents, scenario has {n}", field="graph")
    return g


def outer_config(cfg):
    ou, su, ex = cfg.outer, cfg.subsolver, cfg.experiment
    opts = SubsolverOptions(tol=su.tol, t_max=su.t_max, r_min=su.r_min, r_max=su.r_max,
                            radius=su.radius, agreement_factor=su.agreement_factor)
    return OuterConfig(S=ou.S, delta=ou.delta, K_outer=ou.K_outer, x0=ou.x0, seed=ex.seed,
                       threads=ex.threads, max_inner_iters=ou.max_inner_iters, subsolver=opts,
                       max_cond1_fail_fraction=ou.max_cond1_fail_fraction,
                       record_wall_time=ex.record_wall_time, common_x=bool(ou.common_x))


def submodel_params(cfg, method):
    ou = cfg.outer
    return SubmodelParams(kind=METHOD_KINDS[method], rho=ou.rho, eta_g=ou.eta_g, eta_H=ou.eta_H,
                          c=ou.c, epsilon=ou.epsilon)


# -- metrics ----------------------------------------------------------------

class Evaluator:
    """Empirical objective on a fixed set of realizations.

    Realization ``m`` of time step ``l`` comes from the evaluation stream
    ``(seed, EVALUATION, l)``, so every method and every iterate is scored
    on the same draws.
    """

    def __init__(self, scenario, M, seed):
        if M < 1:
            raise ValueError("M must be at least 1")
        self.scenario = scenario
        self.M = int(M)
        self.chis = [sample_chi(scenario.dist, streams.stream(seed, streams.EVALUATION, l),
                                size=self.M)
                     for l in range(scenario.horizon)]

    def __call__(self, x):
        total = 0.0
        for model, chis in zip(self.scenario.models, self.chis):
            xx = model.as_x(x)
            p, _ = kkt_oracle_batch(xx, chis, self.scenario.p_ref, model)
            total += float(np.mean(np.sum(model.value(xx, p), axis=1)))
        return total / self.scenario.horizon


def empirical_F(x, M, scenario, seed):
    """``(1/M) sum_m sum_i f_i(x_i, p*_i)`` averaged over the horizon."""
    return Evaluator(scenario, M, seed)(x)


# -- comparison --------------------------------------------------------------

@dataclass
class PlateauReport:
    method: str
    plateau: float
    iterations: int
    detected: bool
    ratio: float = 1.0


def plateau_iterations(F, tau=0.05, window=0.1):
    """Iterations until ``F`` first comes within ``tau`` of its final plateau.

    The plateau is the mean of the final ``window`` fraction of the
    trajectory, and closeness is relative to the total descent
    ``|F_0 - plateau|``.  Returns ``(plateau, iterations, detected)`` where
    ``detected`` is false when the final window itself still varies by
    more than the tolerance.
    """
    F = np.asarray(F, dtype=np.float64)
    if F.size == 0:
        raise ValueError("empty trajectory")
    w = max(1, int(math.ceil(window * F.size)))
    plateau = float(F[-w:].mean())
    band = tau * abs(F[0] - plateau)
    inside = np.abs(F - plateau) <= band
    detected = bool(np.all(inside[-w:]))
    return plateau, int(np.argmax(inside)) if inside.any() else F.size - 1, detected


def compare_methods(records, tau=0.05, reference="discrn", strict=False):
    """Iterations-to-plateau per method and ratios against ``reference``.

    ``records`` maps method name to its F_hat trajectory.  With
    ``strict=True`` a trajectory that has not flattened raises
    :class:`PlateauUndetected`; otherwise it is flagged in the report.
    """
    lengths = {len(v) for v in records.values()}
    if len(lengths) > 1:
        raise ValueError(f"trajectories have different lengths {sorted(lengths)}")
    out = {}
    for method, F in records.items():
        plateau, its, ok = plateau_iterations(F, tau)
        if strict and not ok:
            raise PlateauUndetected(f"{method}: trajectory has not flattened")
        out[method] = PlateauReport(method, plateau, its, ok)
    ref = out.get(reference) or next(iter(out.values()))
    for rep in out.values():
        if rep.iterations == ref.iterations:
            rep.ratio = 1.0
        else:
            rep.ratio = rep.iterations / ref.iterations if ref.iterations else math.inf
    return out


def read_run_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) for r in rows]) for c in CSV_COLUMNS}


def compare_dir(directory, tau=0.05):
    """Compare every ``<method>.csv`` in a run directory."""
    directory = Path(directory)
    records = {}
    for m in METHOD_KINDS:
        p = directory / f"{m}.csv"
        if p.exists():
            records[m] = read_run_csv(p)
    if not records:
        raise FileNotFoundError(f"no method CSVs in {directory}")
    rep = compare_methods({m: r["F_hat"] for m, r in records.items()}, tau)
    return rep, records


# -- runs ------------------------------------------------------------------

@dataclass
class RunResult:
    out: Path
    F_hat: dict
    disagreement: dict
    comparison: dict
    status: str = "ok"


def trace_inner(scenario, g, x, delta, seed, max_iters=10**6):
    """Trace one inner solve: the first batch sample of iteration 0 at ``x``."""
    model = scenario.models[0]
    chi = batch_chi(seed, 0, 1, scenario)[0, 0]
    xx = model.as_x(x)
    p_star = kkt_oracle(xx, chi, scenario.p_ref, model)
    res = solve_inner(xx, chi, delta, model, g, scenario.p_ref, max_iters=max_iters,
                      trace=True, p_star=p_star)
    return res.trace


def write_trace(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def run_experiment(config, trace=False):
    """Run every configured method and write ``<out>/<method>.csv`` plus ``summary.yaml``.

    ``config`` is an :class:`ExperimentConfig` or a path to a YAML file.
    Rows are flushed as they are produced; if a method aborts on a
    numerical failure the summary records it and the error propagates.
    """
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    scenario = build_scenario(cfg)
    g = build_graph_from_config(cfg, scenario.n)
    ocfg = outer_config(cfg)
    out = Path(cfg.experiment.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluate = Evaluator(scenario, cfg.experiment.eval_samples, cfg.experiment.seed)
    if trace:
        x0 = np.full((scenario.n, scenario.d), float(cfg.outer.x0))
        write_trace(trace_inner(scenario, g, x0, cfg.outer.delta, cfg.experiment.seed,
                                cfg.outer.max_inner_iters), out / "inner_trace.csv")

    F_hat, dis, status, extra = {}, {}, "ok", {}
    error = None
    for method in cfg.experiment.methods:
        F_hat[method], dis[method] = [], []
        path = out / f"{method}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)

            def record(state, rec, w=w, fh=fh, method=method):
                F = evaluate(state.x)
                D = disagreement(state.x)
                F_hat[method].append(F)
                dis[method].append(D)
                if rec is None:
                    row = (0, F, D, 0, math.nan, math.nan, 0.0)
                else:
                    row = (rec.k, F, D, rec.subsolver_iters, rec.inner_iters_mean,
                           rec.cond1.margin, rec.wall_ms)
                w.writerow([fmt(v) for v in row])
                fh.flush()

            try:
                state = run_outer(scenario, g, submodel_params(cfg, method), ocfg, record)
            except DiscrnError as e:
                status = f"{method}: {type(e).__name__}: {e}"
                error = e
                break
        extra[method] = {"decrease_failures":
                         int(sum(not r.cond1.decrease_ok for r in state.history)),
                         "agreement_failures":
                         int(sum(not r.cond1.residual_ok for r in state.history))}

    comparison = compare_methods(F_hat, cfg.experiment.tau) if error is None else {}
    write_summary(out / "summary.yaml", cfg, scenario, g, F_hat, dis, comparison, extra, status)
    if error is not None:
        raise error
    return RunResult(out, F_hat, dis, comparison, status)


def write_summary(path, cfg, scenario, g, F_hat, dis, comparison, extra, status):
    methods = {}
    for m in F_hat:
        entry = {"final_F_hat": float(F_hat[m][-1]) if F_hat[m] else None,
                 "final_disagreement": float(dis[m][-1]) if dis[m] else None,
                 "iterations_recorded": len(F_hat[m]) - 1}
        if m in comparison:
            c = comparison[m]
            entry.update(plateau=c.plateau, iterations_to_plateau=c.iterations,
                         ratio_to_discrn=c.ratio, plateau_detected=c.detected)
        entry.update(extra.get(m, {}))
        methods[m] = entry
    doc = {"status": status,
           "scenario": {"name": scenario.name, "n": scenario.n, "d": scenario.d,
                        "horizon": scenario.horizon, "p_ref": float(scenario.p_ref)},
           "graph": {"n": g.n, "m": g.m, "lambda2": float(g.lambda2),
                     "lambdaN": float(g.lambdaN)},
           "K_outer": cfg.outer.K_outer, "x0": cfg.outer.x0,
           "methods": methods, "config": cfg.to_dict()}
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


# -- oracle check ----------------------------------------------------------------

@dataclass
class OracleCheck:
    solves: int
    max_error: float
    delta: float
    max_feasibility_gap: float
    bound_violations: int

    @property
    def ok(self):
        return (self.max_error <= self.delta and self.max_feasibility_gap <= 1e-9
                and self.bound_violations == 0)


def oracle_check(cfg, solves=20, spread=2.0):
    """Compare inner solves with the exact oracle at random points.

    Each solve uses a point ``x`` uniform in ``x0 +- spread`` and one
    realization, both from the oracle-check stream.
    """
    scenario = build_scenario(cfg)
    g = build_graph_from_config(cfg, scenario.n)
    delta = cfg.outer.delta
    worst = gap = 0.0
    violations = 0
    for j in range(solves):
        rng = streams.stream(cfg.experiment.seed, streams.ORACLE_CHECK, j)
        model = scenario.models[j % scenario.horizon]
        x = cfg.outer.x0 + rng.uniform(-spread, spread, size=(scenario.n, scenario.d))
        chi = sample_chi(scenario.dist, rng)
        p_star = kkt_oracle(x, chi, scenario.p_ref, model)
        res = solve_inner(x, chi, delta, model, g, scenario.p_ref,
                          max_iters=cfg.outer.max_inner_iters, p_star=p_star)
        worst = max(worst, float(np.linalg.norm(res.p_tilde - p_star)))
        gap = max(gap, abs(float(res.p_tilde.sum()) - (scenario.p_ref + float(chi.sum()))))
        violations += res.iterations > res.iteration_bound
    return OracleCheck(solves, worst, delta, gap, violations)
