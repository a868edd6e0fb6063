"""Undirected communication graphs, their Laplacians and mixing matrices.

Agents are indexed ``0 .. n-1`` everywhere in the Python API.  The edge-list
text format used on disk is 1-based: a header line ``"n m"`` followed by
``m`` lines ``"i j"``.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DisconnectedGraph, InfeasibleEdgeCount, InvalidEdge
from . import streams

SPECTRAL_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class Graph:
    """Connected undirected graph with unit edge weights.

    Attributes:
      n: number of agents.
      edges: sorted tuple of ``(i, j)`` pairs with ``i < j``.
      L: dense ``n x n`` combinatorial Laplacian (float64, integer valued).
      lambda2: algebraic connectivity (second-smallest eigenvalue of ``L``).
      lambdaN: largest eigenvalue of ``L``.
      indptr, indices: CSR neighbor lists; neighbors of ``i`` are
        ``indices[indptr[i]:indptr[i + 1]]``.
      degree: node degrees.
    """

    n: int
    edges: tuple
    L: np.ndarray = field(repr=False)
    lambda2: float
    lambdaN: float
    indptr: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)
    degree: np.ndarray = field(repr=False)

    @property
    def m(self):
        return len(self.edges)

    def neighbors(self, i):
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def eigenvalues(self):
        return np.linalg.eigvalsh(self.L)


def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


def _is_connected(n, edges):
    parent = list(range(n))
    components = n
    for i, j in edges:
        ri, rj = _find(parent, i), _find(parent, j)
        if ri != rj:
            parent[ri] = rj
            components -= 1
    return components == 1


def build_graph(n, edge_list):
    """Build a validated :class:`Graph` from 0-based agent pairs.

    Duplicate edges (in either orientation) are merged.  Raises
    :class:`InvalidEdge` for self-loops or out-of-range endpoints and
    :class:`DisconnectedGraph` when the graph is not connected.
    """
    n = int(n)
    if n < 2:
        raise InvalidEdge(f"need at least two agents, got n={n}")
    edges = set()
    for pair in edge_list:
        i, j = (int(v) for v in pair)
        if not (0 <= i < n and 0 <= j < n):
            raise InvalidEdge(f"edge ({i}, {j}) out of range for n={n}")
        if i == j:
            raise InvalidEdge(f"self-loop at agent {i}")
        edges.add((min(i, j), max(i, j)))
    edges = tuple(sorted(edges))

    # integer construction keeps row sums exactly zero
    Li = np.zeros((n, n), dtype=np.int64)
    for i, j in edges:
        Li[i, j] = Li[j, i] = -1
        Li[i, i] += 1
        Li[j, j] += 1
    L = Li.astype(np.float64)
    eig = np.linalg.eigvalsh(L)
    lambda2, lambdaN = float(eig[1]), float(eig[-1])

    if not _is_connected(n, edges) or lambda2 <= SPECTRAL_TOL:
        raise DisconnectedGraph(f"graph with n={n}, m={len(edges)} is not connected "
                                f"(lambda2={lambda2:.3e})")

    degree = np.diag(Li).astype(np.int64)
    indptr = np.zeros(n + 1, dtype=np.int64)
    indptr[1:] = np.cumsum(degree)
    indices = np.empty(indptr[-1], dtype=np.int64)
    fill = indptr[:-1].copy()
    for i, j in edges:
        indices[fill[i]] = j
        fill[i] += 1
        indices[fill[j]] = i
        fill[j] += 1
    for i in range(n):
        indices[indptr[i]:indptr[i + 1]].sort()

    for arr in (L, indptr, indices, degree):
        arr.setflags(write=False)
    return Graph(n=n, edges=edges, L=L, lambda2=lambda2, lambdaN=lambdaN,
                 indptr=indptr, indices=indices, degree=degree)


def _prufer_tree(n, rng):
    if n == 2:
        return [(0, 1)]
    seq = rng.integers(0, n, size=n - 2)
    degree = np.ones(n, dtype=np.int64)
    for v in seq:
        degree[v] += 1
    edges = []
    for v in seq:
        leaf = int(np.flatnonzero(degree == 1)[0])
        edges.append((leaf, int(v)))
        degree[leaf] -= 1
        degree[v] -= 1
    u, w = np.flatnonzero(degree == 1)
    edges.append((int(u), int(w)))
    return edges


def random_connected_graph(n, m, seed):
    """Random connected graph with exactly ``m`` edges.

    A uniformly random spanning tree is decoded from a Prüfer sequence, then
    ``m - (n - 1)`` extra edges are drawn uniformly without replacement from
    the remaining vertex pairs.  Deterministic in ``(n, m, seed)``.
    """
    n, m = int(n), int(m)
    if n < 2 or m < n - 1 or m > n * (n - 1) // 2:
        raise InfeasibleEdgeCount(f"m={m} edges impossible for a connected graph on n={n}")
    rng = streams.stream(seed, streams.GRAPH, n, m)
    tree = {(min(i, j), max(i, j)) for i, j in _prufer_tree(n, rng)}
    extra = m - len(tree)
    if extra:
        rest = [(i, j) for i in range(n) for j in range(i + 1, n) if (i, j) not in tree]
        pick = rng.choice(len(rest), size=extra, replace=False)
        tree.update(rest[k] for k in sorted(pick))
    return build_graph(n, tree)


def complete_graph(n):
    return build_graph(n, [(i, j) for i in range(n) for j in range(i + 1, n)])


def path_graph(n):
    return build_graph(n, [(i, i + 1) for i in range(n - 1)])


def mixing_matrix(g, d=1):
    """DGD mixing matrix ``I_{nd} - (L kron I_d) / lambdaN``."""
    d = int(d)
    if d < 1:
        raise ValueError("d must be >= 1")
    return np.eye(g.n * d) - np.kron(g.L, np.eye(d)) / g.lambdaN


def write_edge_list(g, path):
    lines = [f"{g.n} {g.m}"] + [f"{i + 1} {j + 1}" for i, j in g.edges]
    Path(path).write_text("\n".join(lines) + "\n")


def read_edge_list(path):
    lines = (ln.split("#", 1)[0] for ln in Path(path).read_text().splitlines())
    rows = [ln.split() for ln in lines if ln.strip()]
    if not rows or len(rows[0]) != 2:
        raise InvalidEdge(f"{path}: header must be 'n m'")
    n, m = int(rows[0][0]), int(rows[0][1])
    body = rows[1:]
    if len(body) != m:
        raise InvalidEdge(f"{path}: header declares {m} edges, found {len(body)}")
    return build_graph(n, [(int(i) - 1, int(j) - 1) for i, j in body])
