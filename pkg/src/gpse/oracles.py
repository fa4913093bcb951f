"""Slow, independent reference evaluators.

Each one reaches its answer by a different route from the production code
(enumeration instead of matrix powers, Taylor series instead of
eigenvectors, trace identities instead of DFS) so agreement is evidence
rather than tautology. Only for small graphs.
"""

from __future__ import annotations

import math
from fractions import Fraction
from itertools import permutations

import numpy as np

from .graph import Graph, connected_components, degree_vector


def rwse_by_walks(g: Graph, kmax: int) -> np.ndarray:
    """Return probabilities by enumerating every walk of length <= kmax."""
    nbrs = [sorted(s) for s in g.neighbors()]
    out = np.zeros((g.num_nodes, kmax))

    def walk(start, node, depth, prob):
        if depth and node == start:
            out[start, depth - 1] += prob
        if depth == kmax or not nbrs[node]:
            return
        step = prob / len(nbrs[node])
        for w in nbrs[node]:
            walk(start, w, depth + 1, step)

    for s in range(g.num_nodes):
        walk(s, s, 0, 1.0)
    return out


def _expm_taylor(a: np.ndarray, terms: int = 30) -> np.ndarray:
    # scaling and squaring keeps the series argument below 1/2
    norm = float(np.abs(a).sum(axis=1).max()) if a.size else 0.0
    s = max(0, int(math.ceil(math.log2(norm))) + 1) if norm > 0.5 else 0
    b = a / 2.0**s
    out = np.eye(a.shape[0])
    term = np.eye(a.shape[0])
    for t in range(1, terms + 1):
        term = term @ b / t
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


def heat_kernel_diag_by_series(g: Graph, kmax: int) -> np.ndarray:
    """diag(exp(-kL)) minus the zero-eigenspace part, for k = 1..kmax.

    The zero eigenspace of L is spanned by component indicators, so its
    diagonal contribution at node v is 1/|component(v)|.
    """
    from .graph import laplacian

    n = g.num_nodes
    base = _expm_taylor(-laplacian(g))
    trivial = np.zeros(n)
    for comp in connected_components(g):
        trivial[list(comp)] = 1.0 / len(comp)
    out = np.zeros((n, kmax))
    power = np.eye(n)
    for k in range(kmax):
        power = power @ base
        out[:, k] = np.diag(power) - trivial
    return out


def cycles_by_trace(g: Graph) -> tuple[int, int]:
    """(#triangles, #4-cycles) from closed-walk counts."""
    a = g.adjacency()
    a2 = a @ a
    t3 = int(round(np.trace(a2 @ a)))
    t4 = int(round(np.trace(a2 @ a2)))
    d = degree_vector(g).astype(np.int64)
    c4 = (t4 - 2 * int((d * d).sum()) + 2 * g.num_edges) // 8
    return t3 // 6, c4


def curvature_brute(g: Graph, i: int, j: int) -> Fraction:
    """Curvature of edge (i, j) by enumerating node tuples over the whole graph."""
    a = g.adjacency().astype(bool)
    n = g.num_nodes
    if not a[i, j]:
        raise ValueError("not an edge")
    di, dj = int(a[i].sum()), int(a[j].sum())
    tri = sum(1 for k in range(n) if a[i, k] and a[j, k])
    others = [v for v in range(n) if v not in (i, j)]
    ks, ws, through = set(), set(), {}
    for w, k in permutations(others, 2):
        # cycle i - j - w - k - i without the diagonals i-w and j-k
        if a[j, w] and a[w, k] and a[k, i] and not a[i, w] and not a[j, k]:
            ks.add(k)
            ws.add(w)
            through[k] = through.get(k, 0) + 1
            through[w] = through.get(w, 0) + 1
    gamma = max(through.values(), default=0)
    dmax, dmin = max(di, dj), min(di, dj)
    return (Fraction(2, di) + Fraction(2, dj) - 2
            + tri * (Fraction(2, dmax) + Fraction(1, dmin))
            + Fraction(gamma, dmax) * (len(ks) + len(ws)))


def eigen_residual(a: np.ndarray, vals: np.ndarray, vecs: np.ndarray) -> float:
    """max |A U - U diag(lambda)|."""
    if a.size == 0:
        return 0.0
    return float(np.abs(a @ vecs - vecs * vals).max())
