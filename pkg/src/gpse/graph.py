"""Graph representation, corpus I/O and synthetic generators.

Graphs are simple, undirected and unweighted. Edges are stored as canonical
``(u, v)`` pairs with ``u < v`` in lexicographic order, which makes every
serialization deterministic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class GraphError(ValueError):
    """Invalid graph structure or malformed corpus input."""


@dataclass(frozen=True)
class Graph:
    num_nodes: int
    edges: tuple[tuple[int, int], ...]
    id: str = ""

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def __post_init__(self):
        if self.num_nodes < 0:
            raise GraphError(f"negative node count {self.num_nodes}")

    def edge_array(self) -> np.ndarray:
        """Canonical edges as an ``m x 2`` int array."""
        if not self.edges:
            return np.zeros((0, 2), dtype=np.int64)
        return np.asarray(self.edges, dtype=np.int64)

    def directed_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Both orientations of every edge as ``(src, dst)`` arrays of length 2m."""
        e = self.edge_array()
        src = np.concatenate([e[:, 0], e[:, 1]])
        dst = np.concatenate([e[:, 1], e[:, 0]])
        return src, dst

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        e = self.edge_array()
        a[e[:, 0], e[:, 1]] = 1.0
        a[e[:, 1], e[:, 0]] = 1.0
        return a

    def neighbors(self) -> list[set[int]]:
        nbrs: list[set[int]] = [set() for _ in range(self.num_nodes)]
        for u, v in self.edges:
            nbrs[u].add(v)
            nbrs[v].add(u)
        return nbrs

    def has_edge(self, u: int, v: int) -> bool:
        return (min(u, v), max(u, v)) in self._edge_set

    @property
    def _edge_set(self) -> frozenset:
        # cached lazily; dataclass is frozen so bypass __setattr__
        cached = self.__dict__.get("_edges_cache")
        if cached is None:
            cached = frozenset(self.edges)
            object.__setattr__(self, "_edges_cache", cached)
        return cached

    def relabel(self, perm: Sequence[int], id: str | None = None) -> "Graph":
        """Graph with node ``v`` renamed to ``perm[v]``."""
        perm = list(perm)
        if sorted(perm) != list(range(self.num_nodes)):
            raise GraphError("relabel needs a permutation of range(n)")
        pairs = [(perm[u], perm[v]) for u, v in self.edges]
        return from_edge_list(self.num_nodes, pairs, id=self.id if id is None else id)

    def to_json(self) -> dict:
        return {"id": self.id, "num_nodes": self.num_nodes, "edges": [list(e) for e in self.edges]}


def from_edge_list(n: int, pairs: Iterable[Sequence[int]], id: str = "") -> Graph:
    """Build a canonical graph, dropping duplicate pairs in either orientation.

    Raises GraphError on out-of-range indices or self-loops.
    """
    canon = set()
    for pair in pairs:
        if len(pair) != 2:
            raise GraphError(f"edge {pair!r} is not a pair")
        u, v = int(pair[0]), int(pair[1])
        if not (0 <= u < n and 0 <= v < n):
            raise GraphError(f"edge ({u}, {v}) out of range for n={n}")
        if u == v:
            raise GraphError(f"self-loop ({u}, {v})")
        canon.add((u, v) if u < v else (v, u))
    return Graph(int(n), tuple(sorted(canon)), id)


def degree_vector(g: Graph) -> np.ndarray:
    deg = np.zeros(g.num_nodes, dtype=np.int64)
    e = g.edge_array()
    np.add.at(deg, e[:, 0], 1)
    np.add.at(deg, e[:, 1], 1)
    return deg


def laplacian(g: Graph) -> np.ndarray:
    a = g.adjacency()
    return np.diag(a.sum(axis=1)) - a


def random_walk_matrix(g: Graph) -> np.ndarray:
    """Row-normalised adjacency. Rows of isolated nodes stay all-zero."""
    a = g.adjacency()
    deg = a.sum(axis=1)
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return a * inv[:, None]


def add_virtual_node(g: Graph) -> Graph:
    n = g.num_nodes
    if n < 1:
        raise GraphError("virtual node needs at least one node")
    return from_edge_list(n + 1, list(g.edges) + [(v, n) for v in range(n)], id=g.id)


def connected_components(g: Graph) -> list[list[int]]:
    nbrs = g.neighbors()
    seen = [False] * g.num_nodes
    comps = []
    for s in range(g.num_nodes):
        if seen[s]:
            continue
        seen[s] = True
        stack, comp = [s], []
        while stack:
            u = stack.pop()
            comp.append(u)
            for w in nbrs[u]:
                if not seen[w]:
                    seen[w] = True
                    stack.append(w)
        comps.append(sorted(comp))
    return comps


def diameter(g: Graph) -> float:
    """Longest shortest path; ``inf`` for disconnected graphs."""
    nbrs = g.neighbors()
    best = 0
    for s in range(g.num_nodes):
        dist = {s: 0}
        frontier = [s]
        while frontier:
            nxt = []
            for u in frontier:
                for w in nbrs[u]:
                    if w not in dist:
                        dist[w] = dist[u] + 1
                        nxt.append(w)
            frontier = nxt
        if len(dist) < g.num_nodes:
            return math.inf
        best = max(best, max(dist.values()))
    return best


def disjoint_union(*graphs: Graph, id: str = "") -> Graph:
    pairs, offset = [], 0
    for h in graphs:
        pairs.extend((u + offset, v + offset) for u, v in h.edges)
        offset += h.num_nodes
    return from_edge_list(offset, pairs, id=id)


# ---------------------------------------------------------------- generators


def gen_er(n: int, p: float, seed: int, id: str = "") -> Graph:
    """Erdos-Renyi G(n, p): each pair kept independently with probability p."""
    if not 0.0 <= p <= 1.0:
        raise GraphError(f"edge probability {p} outside [0, 1]")
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < p
    return from_edge_list(n, zip(iu[keep].tolist(), ju[keep].tolist()), id=id)


def gen_path(n: int, id: str = "") -> Graph:
    return from_edge_list(n, [(i, i + 1) for i in range(n - 1)], id=id)


def gen_cycle(n: int, id: str = "") -> Graph:
    if n < 3:
        raise GraphError("cycle needs n >= 3")
    return from_edge_list(n, [(i, (i + 1) % n) for i in range(n)], id=id)


def gen_complete(n: int, id: str = "") -> Graph:
    return from_edge_list(n, [(i, j) for i in range(n) for j in range(i + 1, n)], id=id)


def gen_star(leaves: int, id: str = "") -> Graph:
    return from_edge_list(leaves + 1, [(0, i) for i in range(1, leaves + 1)], id=id)


def gen_csl(n: int, skip: int, id: str = "") -> Graph:
    """Circular skip-link graph: ring ``(i, i+1)`` plus chords ``(i, i+skip)``."""
    if not 2 <= skip <= n - 2:
        raise GraphError(f"skip {skip} must lie in [2, n-2] for n={n}")
    pairs = [(i, (i + 1) % n) for i in range(n)] + [(i, (i + skip) % n) for i in range(n)]
    return from_edge_list(n, pairs, id=id)


CSL_SKIPS = (2, 3, 4, 5, 6, 9, 11, 12, 13, 16)


def gen_csl_dataset(n: int = 41, skips: Sequence[int] = CSL_SKIPS, per_class: int = 15,
                    seed: int = 0) -> list[tuple[Graph, int]]:
    """CSL benchmark: ``per_class`` random relabelings of each skip class."""
    rng = np.random.default_rng(seed)
    out = []
    for label, skip in enumerate(skips):
        base = gen_csl(n, skip)
        for r in range(per_class):
            perm = rng.permutation(n)
            out.append((base.relabel(perm, id=f"csl_s{skip}_{r}"), label))
    return out


def gen_wl_pair(kind: str) -> tuple[Graph, Graph]:
    """Classic 1-WL indistinguishable, non-isomorphic pairs.

    ``hex_pent``: two hexagons sharing an edge vs two pentagons joined by an edge.
    ``tri_hex``: two disjoint triangles vs the 6-cycle.
    """
    if kind == "hex_pent":
        # fused hexagons: outer 10-ring plus the shared edge (0, 5)
        hexagon = from_edge_list(10, [(i, (i + 1) % 10) for i in range(10)] + [(0, 5)],
                                 id="hexagon")
        pentagon = from_edge_list(
            10,
            [(i, (i + 1) % 5) for i in range(5)]
            + [(5 + i, 5 + (i + 1) % 5) for i in range(5)]
            + [(0, 5)],
            id="pentagon",
        )
        return hexagon, pentagon
    if kind == "tri_hex":
        two_tri = disjoint_union(gen_complete(3), gen_complete(3), id="two_triangles")
        return two_tri, gen_cycle(6, id="hexagon6")
    raise GraphError(f"unknown wl pair kind {kind!r}")


def gen_random_tree(n: int, seed: int, id: str = "") -> Graph:
    rng = np.random.default_rng(seed)
    pairs = [(i, int(rng.integers(0, i))) for i in range(1, n)]
    return from_edge_list(n, pairs, id=id)


def gen_triangle_tree(n_tree: int, n_tri: int, seed: int, id: str = "") -> Graph:
    """Random tree with triangles glued onto ``n_tri`` distinct tree edges.

    Each chosen edge ``(u, v)`` gets a fresh apex adjacent to both endpoints, so
    the result has no chordless 4-cycles.
    """
    tree = gen_random_tree(n_tree, seed)
    rng = np.random.default_rng(seed + 1)
    chosen = rng.choice(len(tree.edges), size=min(n_tri, len(tree.edges)), replace=False)
    pairs = list(tree.edges)
    n = n_tree
    for idx in sorted(chosen.tolist()):
        u, v = tree.edges[idx]
        pairs += [(u, n), (v, n)]
        n += 1
    return from_edge_list(n, pairs, id=id)


def gen_quad_free_family(count: int, seed: int) -> list[Graph]:
    """Trees, cycles of length >= 5 and triangle-decorated trees, round robin."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        kind = i % 3
        s = int(rng.integers(0, 2**31 - 1))
        if kind == 0:
            out.append(gen_random_tree(int(rng.integers(2, 16)), s, id=f"tree_{i}"))
        elif kind == 1:
            out.append(gen_cycle(int(rng.integers(5, 16)), id=f"cycle_{i}"))
        else:
            nt = int(rng.integers(3, 12))
            out.append(gen_triangle_tree(nt, int(rng.integers(1, nt)), s, id=f"tritree_{i}"))
    return out


# -------------------------------------------------------------------- corpus

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class GraphCorpus:
    graphs: tuple[Graph, ...]
    splits: tuple[str, ...] | None = None
    labels: tuple[int, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        ids = [g.id for g in self.graphs]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise GraphError(f"duplicate graph id {dup!r}")
        if self.splits is not None:
            if len(self.splits) != len(self.graphs):
                raise GraphError("split assignment length differs from graph count")
            bad = set(self.splits) - set(SPLITS)
            if bad:
                raise GraphError(f"unknown split names {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.graphs)

    def __iter__(self):
        return iter(self.graphs)

    def split(self, name: str) -> list[Graph]:
        if self.splits is None:
            raise GraphError("corpus has no split assignment")
        return [g for g, s in zip(self.graphs, self.splits) if s == name]

    def split_indices(self, name: str) -> list[int]:
        if self.splits is None:
            raise GraphError("corpus has no split assignment")
        return [i for i, s in enumerate(self.splits) if s == name]

    def with_splits(self, val_frac: float = 0.05, test_frac: float = 0.05,
                    seed: int = 0) -> "GraphCorpus":
        """Random split assignment with the given validation/test fractions."""
        if val_frac < 0 or test_frac < 0 or val_frac + test_frac >= 1:
            raise GraphError("split fractions must be non-negative and leave a train split")
        n = len(self.graphs)
        order = np.random.default_rng(seed).permutation(n)
        n_val = int(round(val_frac * n))
        n_test = int(round(test_frac * n))
        splits = ["train"] * n
        for i in order[:n_val]:
            splits[i] = "val"
        for i in order[n_val:n_val + n_test]:
            splits[i] = "test"
        return GraphCorpus(self.graphs, tuple(splits), self.labels)


def _all_or_none(values, name):
    if all(v is None for v in values):
        return None
    if any(v is None for v in values):
        raise GraphError(f"{name} field present on some lines only")
    return tuple(values)


def corpus_read(path: str | Path) -> GraphCorpus:
    """JSON-Lines corpus; optional per-line ``split`` and integer ``label``."""
    graphs, splits, labels = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                g = from_edge_list(int(rec["num_nodes"]), rec["edges"], id=str(rec["id"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise GraphError(f"line {lineno}: {exc}") from exc
            graphs.append(g)
            splits.append(rec.get("split"))
            labels.append(rec.get("label"))
    try:
        return GraphCorpus(tuple(graphs), _all_or_none(splits, "split"),
                           _all_or_none(labels, "label"))
    except GraphError as exc:
        raise GraphError(f"{path}: {exc}") from exc


def corpus_write(corpus: GraphCorpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, g in enumerate(corpus.graphs):
            rec = g.to_json()
            if corpus.splits is not None:
                rec["split"] = corpus.splits[i]
            if corpus.labels is not None:
                rec["label"] = int(corpus.labels[i])
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
