"""Curvature, smoothing/squashing probes, 1-WL refinement and the
random-feature separation experiment.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import GPSEModel, derive_seed, encode_with_features, random_features
from .graph import Graph, add_virtual_node, disjoint_union
from .nn import autodiff as ad
from .nn.layers import make_batch

# ------------------------------------------------------------------ curvature


@dataclass(frozen=True)
class EdgeCurvature:
    i: int
    j: int
    deg_i: int
    deg_j: int
    triangles: int
    squares_i: int
    squares_j: int
    gamma_max: int
    ric: float


def _square_sides(nbrs: list[set[int]], i: int, j: int):
    """Chordless 4-cycles i-j-w-k-i through edge (i, j).

    Returns the i-side nodes k, the j-side nodes w, and the number of such
    cycles through each node.
    """
    through: dict[int, int] = {}
    ks, ws = set(), set()
    for k in nbrs[i]:
        if k == j or k in nbrs[j]:
            continue
        for w in nbrs[k] & nbrs[j]:
            if w == i or w in nbrs[i]:
                continue
            ks.add(k)
            ws.add(w)
            through[k] = through.get(k, 0) + 1
            through[w] = through.get(w, 0) + 1
    return ks, ws, through


def curvature_terms(g: Graph, i: int, j: int, nbrs: list[set[int]] | None = None) -> EdgeCurvature:
    nbrs = nbrs if nbrs is not None else g.neighbors()
    if j not in nbrs[i]:
        raise ValueError(f"({i}, {j}) is not an edge")
    di, dj = len(nbrs[i]), len(nbrs[j])
    tri = len(nbrs[i] & nbrs[j])
    ks, ws, through = _square_sides(nbrs, i, j)
    gamma = max(through.values(), default=0)
    dmax, dmin = max(di, dj), min(di, dj)
    ric = (2.0 / di + 2.0 / dj - 2.0 + tri * (2.0 / dmax + 1.0 / dmin)
           + gamma / dmax * (len(ks) + len(ws)))
    return EdgeCurvature(i, j, di, dj, tri, len(ks), len(ws), gamma, ric)


def balanced_forman_curvature(g: Graph, i: int, j: int) -> float:
    """Balanced Forman curvature of edge (i, j), with the 4-cycle term scaled
    by ``gamma_max / max(d_i, d_j)``."""
    return curvature_terms(g, i, j).ric


def prop1_bound(d_i: int, d_j: int) -> float:
    """Upper bound on Ric - Ric(+VN) with d the larger degree and delta the gap."""
    d = max(d_i, d_j)
    delta = d - min(d_i, d_j)
    return 1.0 / ((d - delta) ** 2 + d - delta) - 2.0 * delta / (d * d + d)


@dataclass(frozen=True)
class Prop1Result:
    ric: float
    ric_vn: float
    lhs: float
    bound: float
    holds: bool


def prop1_check(g: Graph, i: int, j: int, vn: Graph | None = None) -> Prop1Result:
    vn = vn if vn is not None else add_virtual_node(g)
    before = curvature_terms(g, i, j)
    after = curvature_terms(vn, i, j)
    lhs = before.ric - after.ric
    bound = prop1_bound(before.deg_i, before.deg_j)
    return Prop1Result(before.ric, after.ric, lhs, bound, lhs <= bound + 1e-12)


CURVATURE_FIELDS = ["graph_id", "i", "j", "deg_i", "deg_j", "triangles", "squares_i",
                    "squares_j", "gamma_max", "ric", "ric_vn", "prop1_bound", "prop1_holds"]


def curvature_report(g: Graph) -> list[dict]:
    """One record per edge, with the virtual-node comparison."""
    nbrs = g.neighbors()
    vn = add_virtual_node(g) if g.num_nodes else None
    vn_nbrs = vn.neighbors() if vn else None
    rows = []
    for i, j in g.edges:
        t = curvature_terms(g, i, j, nbrs)
        after = curvature_terms(vn, i, j, vn_nbrs)
        bound = prop1_bound(t.deg_i, t.deg_j)
        rows.append({
            "graph_id": g.id, "i": i, "j": j, "deg_i": t.deg_i, "deg_j": t.deg_j,
            "triangles": t.triangles, "squares_i": t.squares_i, "squares_j": t.squares_j,
            "gamma_max": t.gamma_max, "ric": t.ric, "ric_vn": after.ric,
            "prop1_bound": bound, "prop1_holds": (t.ric - after.ric) <= bound + 1e-12,
        })
    return rows


def write_curvature_csv(graphs: Sequence[Graph], path: str | Path, jobs: int = 1) -> None:
    if jobs > 1 and len(graphs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            reports = list(ex.map(curvature_report, graphs, chunksize=8))
    else:
        reports = [curvature_report(g) for g in graphs]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVATURE_FIELDS)
        w.writeheader()
        for rows in reports:
            for row in rows:
                row = dict(row)
                row["ric"] = repr(row["ric"])
                row["ric_vn"] = repr(row["ric_vn"])
                row["prop1_bound"] = repr(row["prop1_bound"])
                row["prop1_holds"] = str(row["prop1_holds"]).lower()
                w.writerow(row)


# ------------------------------------------------------ smoothing/squashing


def smoothness_metric(states: np.ndarray, g: Graph) -> float:
    """Sum over edges of the l1 distance between endpoint states."""
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 1:
        states = states[:, None]
    e = g.edge_array()
    if e.size == 0:
        return 0.0
    return float(np.abs(states[e[:, 0]] - states[e[:, 1]]).sum())


def mean_aggregation_smoothness(g: Graph, x: np.ndarray, depth: int) -> list[float]:
    """Smoothness after 1..depth rounds of parameter-free mean aggregation over
    each node's closed neighbourhood."""
    a = g.adjacency() + np.eye(g.num_nodes)
    p = a / a.sum(axis=1, keepdims=True)
    h = np.asarray(x, dtype=np.float64)
    out = []
    for _ in range(depth):
        h = p @ h
        out.append(smoothness_metric(h, g))
    return out


def layer_states(model: GPSEModel, g: Graph, x: np.ndarray) -> list[np.ndarray]:
    """Node states after 0..N layers for explicit input features."""
    _, _, states = model.trunk(make_batch([g]), ad.Tensor(x), keep_states=True)
    return [s.data.copy() for s in states]


def influence_probe(model: GPSEModel, g: Graph, source: int, target: int, layer: int,
                    seed: int = 0, x: np.ndarray | None = None) -> float:
    """l1 norm of the Jacobian block d h_target^(layer) / d x_source."""
    if not 0 <= layer <= model.cfg.num_layers:
        raise ValueError(f"layer {layer} outside 0..{model.cfg.num_layers}")
    if x is None:
        x = random_features(g, model.cfg.rand_feat_dim, seed)
    xt = ad.Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    _, _, states = model.trunk(make_batch([g]), xt, keep_states=True)
    out = states[layer]
    if not out.requires_grad:
        return 0.0
    total = 0.0
    params = model.parameters()
    for c in range(out.shape[1]):
        seed_grad = np.zeros(out.shape)
        seed_grad[target, c] = 1.0
        xt.grad = None
        out.backward(seed_grad)
        if xt.grad is not None:
            total += float(np.abs(xt.grad[source]).sum())
    for p in params:
        p.grad = None
    return total


# ------------------------------------------------------------------- 1-WL


@dataclass(frozen=True)
class WLColoring:
    colors: tuple[int, ...]
    rounds: int
    histogram: tuple[tuple[int, int], ...]


def _refine_once(colors: list[int], nbrs: list[set[int]], palette: dict) -> list[int]:
    out = []
    for v in range(len(colors)):
        sig = (colors[v], tuple(sorted(colors[w] for w in nbrs[v])))
        if sig not in palette:
            palette[sig] = len(palette)
        out.append(palette[sig])
    return out


def _num_classes(colors) -> int:
    return len(set(colors))


def _histogram(colors) -> tuple[tuple[int, int], ...]:
    vals, counts = np.unique(np.asarray(colors, dtype=np.int64), return_counts=True)
    return tuple(zip(vals.tolist(), counts.tolist()))


def wl_refine(g: Graph, max_rounds: int | None = None, palette: dict | None = None) -> WLColoring:
    """Colour refinement from uniform colours until the partition stops splitting.

    Signatures ``(colour, sorted neighbour colours)`` are mapped to integers
    through an exact dictionary, so distinct signatures never merge.
    """
    palette = {} if palette is None else palette
    nbrs = g.neighbors()
    colors = [0] * g.num_nodes
    limit = g.num_nodes if max_rounds is None else max_rounds
    rounds = 0
    while rounds < limit:
        new = _refine_once(colors, nbrs, palette)
        rounds += 1
        stable = _num_classes(new) == _num_classes(colors)
        colors = new
        if stable:
            break
    return WLColoring(tuple(colors), rounds, _histogram(colors))


def wl_distinguish(g1: Graph, g2: Graph, max_rounds: int | None = None) -> tuple[bool, int]:
    """(distinguished, rounds): refine both graphs with one shared palette and
    compare colour histograms after every round."""
    if g1.num_nodes != g2.num_nodes:
        return True, 0
    union = disjoint_union(g1, g2)
    nbrs = union.neighbors()
    n1 = g1.num_nodes
    palette: dict = {}
    colors = [0] * union.num_nodes
    limit = union.num_nodes if max_rounds is None else max_rounds
    for r in range(1, limit + 1):
        new = _refine_once(colors, nbrs, palette)
        if _histogram(new[:n1]) != _histogram(new[n1:]):
            return True, r
        stable = _num_classes(new) == _num_classes(colors)
        colors = new
        if stable:
            return False, r
    return False, limit


# ------------------------------------------------------------- separation


def _pooled(model, g, x) -> np.ndarray:
    return encode_with_features(model, g, x).mean(axis=0)


def separation_experiment(model: GPSEModel, pair: tuple[Graph, Graph], draws: int = 20,
                          seed: int = 0) -> dict:
    """Mean-pooled encodings of both graphs under ``draws`` random feature draws
    and under all-ones features.

    ``intra_max`` is the largest distance of any draw's pooled encoding from
    its own class centroid; ``cross`` is the distance between the centroids.
    """
    k = model.cfg.rand_feat_dim
    pooled = []
    for c, g in enumerate(pair):
        pooled.append(np.stack([
            _pooled(model, g, random_features(g, k, derive_seed(seed, c, r)))
            for r in range(draws)
        ]))
    centroids = [p.mean(axis=0) for p in pooled]
    intra = max(float(np.linalg.norm(p - c, axis=1).max()) for p, c in zip(pooled, centroids))
    cross = float(np.linalg.norm(centroids[0] - centroids[1]))
    ones = [_pooled(model, g, np.ones((g.num_nodes, k))) for g in pair]
    cross_ones = float(np.linalg.norm(ones[0] - ones[1]))

    allp = np.concatenate(pooled + [np.stack(ones)])
    centred = allp - allp.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    coords = centred @ vt[:2].T
    labels = [pair[0].id] * draws + [pair[1].id] * draws + [pair[0].id, pair[1].id]
    modes = ["random"] * (2 * draws) + ["ones", "ones"]
    return {
        "graphs": [pair[0].id, pair[1].id],
        "draws": draws,
        "random": {"cross": cross, "intra_max": intra, "separated": cross > intra},
        "ones": {"cross": cross_ones},
        "pca": [{"graph": lab, "mode": m, "pc1": float(a), "pc2": float(b)}
                for lab, m, (a, b) in zip(labels, modes, coords)],
    }
