"""Neural building blocks: linear/MLP, normalisation, message-passing layers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..graph import Graph
from . import autodiff as ad
from .autodiff import Index, Parameter, Tensor

GATE_EPS = 1e-6


class Module:
    """Parameter container; attributes that are Parameters or Modules are walked."""

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                val.name = name
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
            elif isinstance(val, dict):
                for k in sorted(val):
                    if isinstance(val[k], Module):
                        out.update(val[k].named_parameters(f"{name}.{k}."))
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(_uniform(rng, d_in, (d_in, d_out)))
        self.bias = Parameter(_uniform(rng, d_in, (d_out,))) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ad.ShapeError(f"linear expects width {self.weight.shape[0]}, got {x.shape[-1]}")
        out = ad.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    """Affine/ReLU stack whose last layer is affine.

    ``norm=True`` inserts a LayerNorm before every hidden activation.
    """

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator,
                 depth: int = 2, norm: bool = False):
        widths = [d_in] + [d_hidden] * (depth - 1) + [d_out]
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.norms = [LayerNorm(w) for w in widths[1:-1]] if norm else []

    def __call__(self, x: Tensor) -> Tensor:
        for i, lin in enumerate(self.layers):
            x = lin(x)
            if i < len(self.layers) - 1:
                if self.norms:
                    x = self.norms[i](x)
                x = ad.relu(x)
        return x


# --------------------------------------------------------------- batching


@dataclass
class GraphBatch:
    """Disjoint union of graphs with cached index operators.

    ``src``/``dst`` hold both orientations of every edge; messages flow from
    ``src`` to ``dst``.
    """

    num_nodes: int
    num_graphs: int
    src: Index
    dst: Index
    node_graph: Index
    sizes: np.ndarray
    offsets: np.ndarray
    gcn_adj: sp.csr_matrix | None = None

    @property
    def num_directed_edges(self) -> int:
        return self.src.idx.size

    def normalized_adjacency(self) -> sp.csr_matrix:
        """``D^-1/2 (A + I) D^-1/2`` over the whole batch."""
        if self.gcn_adj is None:
            n = self.num_nodes
            deg = np.bincount(self.dst.idx, minlength=n) + 1.0
            w = 1.0 / np.sqrt(deg[self.src.idx] * deg[self.dst.idx])
            rows = np.concatenate([self.dst.idx, np.arange(n)])
            cols = np.concatenate([self.src.idx, np.arange(n)])
            vals = np.concatenate([w, 1.0 / deg])
            self.gcn_adj = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        return self.gcn_adj


def make_batch(graphs: list[Graph]) -> GraphBatch:
    sizes = np.array([g.num_nodes for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    srcs, dsts = [], []
    for g, off in zip(graphs, offsets):
        s, d = g.directed_edges()
        srcs.append(s + off)
        dsts.append(d + off)
    n = int(sizes.sum())
    src = np.concatenate(srcs) if srcs else np.zeros(0, dtype=np.int64)
    dst = np.concatenate(dsts) if dsts else np.zeros(0, dtype=np.int64)
    node_graph = np.repeat(np.arange(len(graphs)), sizes)
    return GraphBatch(n, len(graphs), Index(src, n), Index(dst, n),
                      Index(node_graph, len(graphs)), sizes, offsets)


# ----------------------------------------------------------- conv layers


class GatedGCNLayer(Module):
    """Residual gated graph convolution.

    For a directed edge j -> i:
        e_hat = e + relu(norm_e(W3 h_i + W4 h_j + W5 e))
        eta   = sigmoid(e_hat) / (sum over i's in-edges of sigmoid(e_hat) + eps)
        h_i'  = h_i + relu(norm_h(W1 h_i + sum_j eta * W2 h_j))
    """

    def __init__(self, d: int, rng: np.random.Generator):
        self.w1 = Linear(d, d, rng)
        self.w2 = Linear(d, d, rng)
        self.w3 = Linear(d, d, rng)
        self.w4 = Linear(d, d, rng)
        self.w5 = Linear(d, d, rng)
        self.norm_h = LayerNorm(d)
        self.norm_e = LayerNorm(d)

    def __call__(self, h: Tensor, e: Tensor, batch: GraphBatch) -> tuple[Tensor, Tensor]:
        pre = ad.gather(self.w3(h), batch.dst) + ad.gather(self.w4(h), batch.src) + self.w5(e)
        e_hat = e + ad.relu(self.norm_e(pre))
        gate = ad.sigmoid(e_hat)
        num = ad.segment_sum(gate * ad.gather(self.w2(h), batch.src), batch.dst)
        den = ad.segment_sum(gate, batch.dst) + GATE_EPS
        h_new = h + ad.relu(self.norm_h(self.w1(h) + num / den))
        return h_new, e_hat


class GINLayer(Module):
    """h_i' = relu(norm(MLP(h_i + sum_j h_j))).

    Ablation baseline; no residual path, unlike the gated layer.
    """

    def __init__(self, d: int, rng: np.random.Generator):
        self.mlp = MLP(d, d, d, rng)
        self.norm = LayerNorm(d)

    def __call__(self, h: Tensor, e: Tensor, batch: GraphBatch) -> tuple[Tensor, Tensor]:
        agg = h + ad.segment_sum(ad.gather(h, batch.src), batch.dst)
        return ad.relu(self.norm(self.mlp(agg))), e


class GCNLayer(Module):
    """h' = relu(norm(D^-1/2 (A + I) D^-1/2 h W + b)), no residual."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.lin = Linear(d, d, rng)
        self.norm = LayerNorm(d)

    def __call__(self, h: Tensor, e: Tensor, batch: GraphBatch) -> tuple[Tensor, Tensor]:
        adj = batch.normalized_adjacency()
        agg = ad.spmm(adj, ad.matmul(h, self.lin.weight), adj.T.tocsr()) + self.lin.bias
        return ad.relu(self.norm(agg)), e


CONV_TYPES = {"gatedgcn": GatedGCNLayer, "gin": GINLayer, "gcn": GCNLayer}


class VirtualNode(Module):
    """v' = v + MLP(v + sum_i h_i); every node then receives v'."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.mlp = MLP(d, d, d, rng, depth=2, norm=True)

    def __call__(self, h: Tensor, v: Tensor, batch: GraphBatch) -> tuple[Tensor, Tensor]:
        if h.shape[1] != v.shape[1]:
            raise ad.ShapeError(f"virtual node width {v.shape[1]} != node width {h.shape[1]}")
        v_new = v + self.mlp(v + ad.segment_sum(h, batch.node_graph))
        return h + ad.gather(v_new, batch.node_graph), v_new
