"""Positional and structural encoding targets.

Node-level families: LapPE (4), ElstaticPE (7), RWSE (20), HKdiagSE (20).
Graph-level families: EigValSE (4), CycleSE (7, cycle lengths 2..8).
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import Graph, degree_vector, laplacian, random_walk_matrix
from .numerics import ZERO_EIG_TOL, EigenDecomposition, matpow, pinv_from_eig, sym_eig

NODE_FAMILIES = (("LapPE", 4), ("ElstaticPE", 7), ("RWSE", 20), ("HKdiagSE", 20))
GRAPH_FAMILIES = (("EigValSE", 4), ("CycleSE", 7))
FAMILY_NAMES = tuple(n for n, _ in NODE_FAMILIES + GRAPH_FAMILIES)
CYCLE_LENGTHS = tuple(range(2, 9))
STD_FLOOR = 1e-12


def _blocks(families) -> dict[str, slice]:
    out, start = {}, 0
    for name, width in families:
        out[name] = slice(start, start + width)
        start += width
    return out


NODE_BLOCKS = _blocks(NODE_FAMILIES)
GRAPH_BLOCKS = _blocks(GRAPH_FAMILIES)
NODE_DIM = sum(w for _, w in NODE_FAMILIES)
GRAPH_DIM = sum(w for _, w in GRAPH_FAMILIES)


def node_column_names() -> list[str]:
    return [f"{name}_{i + 1}" for name, w in NODE_FAMILIES for i in range(w)]


def graph_column_names() -> list[str]:
    names = [f"EigValSE_{i + 1}" for i in range(4)]
    return names + [f"CycleSE_{k}" for k in CYCLE_LENGTHS]


class TargetError(ValueError):
    pass


@dataclass(frozen=True)
class TargetBundle:
    node_targets: np.ndarray  # n x 51
    graph_targets: np.ndarray  # 11
    normalized: bool = False

    def family(self, name: str) -> np.ndarray:
        if name in NODE_BLOCKS:
            return self.node_targets[:, NODE_BLOCKS[name]]
        return self.graph_targets[GRAPH_BLOCKS[name]]


def laplacian_eig(g: Graph) -> EigenDecomposition:
    return sym_eig(laplacian(g))


def lap_pe(g: Graph, dims: int = 4, dec: EigenDecomposition | None = None) -> np.ndarray:
    dec = dec or laplacian_eig(g)
    _, vecs = dec.nontrivial()
    out = np.zeros((g.num_nodes, dims))
    take = min(dims, vecs.shape[1])
    if take:
        sel = vecs[:, :take]
        out[:, :take] = np.abs(sel / np.linalg.norm(sel, axis=0))
    return out


def eigval_se(g: Graph, dims: int = 4, dec: EigenDecomposition | None = None) -> np.ndarray:
    dec = dec or laplacian_eig(g)
    vals, _ = dec.nontrivial()
    out = np.zeros(dims)
    take = min(dims, vals.size)
    out[:take] = vals[:take]
    return out


def elstatic_pe(g: Graph, dec: EigenDecomposition | None = None) -> np.ndarray:
    n = g.num_nodes
    if n == 0:
        return np.zeros((0, 7))
    dec = dec or laplacian_eig(g)
    lp = pinv_from_eig(dec)
    q = lp - np.diag(lp)[None, :]  # ground each column at its own node
    mq = g.adjacency() @ q
    return np.stack(
        [
            q.min(axis=0),
            q.mean(axis=0),
            q.std(axis=0),
            q.min(axis=1),
            q.std(axis=1),
            mq.mean(axis=0),
            mq.mean(axis=1),
        ],
        axis=1,
    )


def rwse(g: Graph, kmax: int = 20) -> np.ndarray:
    p = random_walk_matrix(g)
    out = np.zeros((g.num_nodes, kmax))
    pk = np.eye(g.num_nodes)
    for k in range(kmax):
        pk = p @ pk
        out[:, k] = np.diag(pk)
    return out


def rwse_matpow(g: Graph, kmax: int = 20) -> np.ndarray:
    """Same quantity via independent matrix powers (slow, for cross-checks)."""
    p = random_walk_matrix(g)
    return np.stack([np.diag(matpow(p, k)) for k in range(1, kmax + 1)], axis=1)


def hk_diag_se(g: Graph, kmax: int = 20, dec: EigenDecomposition | None = None) -> np.ndarray:
    dec = dec or laplacian_eig(g)
    vals, vecs = dec.nontrivial()
    sq = vecs**2
    ks = np.arange(1, kmax + 1)
    return sq @ np.exp(-np.outer(vals, ks))


def count_cycles(g: Graph, lengths: Sequence[int] = CYCLE_LENGTHS) -> np.ndarray:
    """Number of simple cycles of each length; length 2 is the edge count.

    Each cycle is enumerated once from its smallest vertex ``s`` over vertices
    greater than ``s``, with orientation fixed by requiring the first step to
    be smaller than the closing vertex.
    """
    lengths = list(lengths)
    kmax = max(lengths) if lengths else 0
    counts = dict.fromkeys(range(3, kmax + 1), 0)
    nbrs = [sorted(s) for s in g.neighbors()]
    for s in range(g.num_nodes):
        higher = [w for w in nbrs[s] if w > s]
        if len(higher) < 2:
            continue
        closing = set(higher)
        on_path = [False] * g.num_nodes
        on_path[s] = True
        for first in higher:
            on_path[first] = True
            # stack of (vertex, depth, iterator over its neighbours)
            stack = [(first, 1, iter(nbrs[first]))]
            while stack:
                u, depth, it = stack[-1]
                w = next(it, None)
                if w is None:
                    stack.pop()
                    on_path[u] = False
                    continue
                if w <= s or on_path[w]:
                    continue
                # path s -> first -> ... -> u -> w has depth+1 edges
                if w in closing and w > first and depth + 2 <= kmax:
                    counts[depth + 2] += 1
                if depth + 2 < kmax:
                    on_path[w] = True
                    stack.append((w, depth + 1, iter(nbrs[w])))
    return np.array([g.num_edges if k == 2 else counts.get(k, 0) for k in lengths],
                    dtype=np.float64)


def cycle_se(g: Graph, ks: Sequence[int] = CYCLE_LENGTHS) -> np.ndarray:
    return count_cycles(g, ks)


def normalize_targets(bundle: TargetBundle) -> TargetBundle:
    """Per-graph z-score of every node-level column (population std)."""
    if bundle.normalized:
        raise TargetError("targets are already normalized")
    x = bundle.node_targets
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    ok = std >= STD_FLOOR
    z = np.zeros_like(x)
    z[:, ok] = (x[:, ok] - mean[ok]) / std[ok]
    return replace(bundle, node_targets=z, normalized=True)


def compute_all_targets(g: Graph, normalize: bool = True) -> TargetBundle:
    dec = laplacian_eig(g)
    node = np.concatenate(
        [lap_pe(g, 4, dec), elstatic_pe(g, dec), rwse(g, 20), hk_diag_se(g, 20, dec)], axis=1
    )
    graph = np.concatenate([eigval_se(g, 4, dec), cycle_se(g)])
    bundle = TargetBundle(node, graph, normalized=False)
    return normalize_targets(bundle) if normalize else bundle


def _raw(g):
    return compute_all_targets(g, normalize=False)


def _norm(g):
    return compute_all_targets(g, normalize=True)


def compute_corpus_targets(graphs: Sequence[Graph], normalize: bool = True,
                           jobs: int = 1) -> list[TargetBundle]:
    """Targets for many graphs; results keep input order for any ``jobs``."""
    fn = _norm if normalize else _raw
    if jobs <= 1:
        return [fn(g) for g in graphs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, graphs, chunksize=16))


def write_targets_csv(graphs: Sequence[Graph], bundles: Sequence[TargetBundle],
                      path: str | Path) -> Path:
    """Node-level CSV at ``path`` plus graph-level ``<stem>.graph.csv`` next to it."""
    path = Path(path)
    graph_path = path.with_name(path.stem + ".graph" + path.suffix)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["graph_id", "node_id", *node_column_names()])
        for g, b in zip(graphs, bundles):
            for v in range(g.num_nodes):
                w.writerow([g.id, v, *(repr(float(x)) for x in b.node_targets[v])])
    with open(graph_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["graph_id", *graph_column_names()])
        for g, b in zip(graphs, bundles):
            w.writerow([g.id, *(repr(float(x)) for x in b.graph_targets)])
    return graph_path
