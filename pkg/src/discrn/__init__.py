"""Distributed stochastic cubic-regularized Newton method with nested resource allocation."""

from . import graph, harness, inner, kernels, outer, problem, streams
from .errors import (BisectionBracketFailure, Condition1Failure, ConfigError, DisconnectedGraph,
                     DiscrnError, InfeasibleEdgeCount, InvalidConstants, InvalidEdge,
                     MaxItersExceeded, NonFiniteGradient, NumericalError, PlateauUndetected,
                     SubsolverDiverged)
from .graph import Graph, build_graph, random_connected_graph
from .harness import compare_methods, empirical_F, run_experiment
from .inner import kkt_oracle, solve_inner
from .outer import OuterConfig, SubmodelParams, SubsolverOptions, disagreement, run_outer
from .problem import (Scenario, make_ev_tou_scenario, make_nonconvex_scenario,
                      make_two_driver_example)

__version__ = "0.1.0"
