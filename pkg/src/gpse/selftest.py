"""Built-in self checks: gradients, oracle agreement and invariants.

``run_selftest`` returns per-suite (passed, total) counts and the names of
failed checks; the CLI exits nonzero when anything fails.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import analysis, graph as gr, numerics as nm, oracles, pse
from .encoder import GPSEConfig, _batch_targets, _features_for, init_model
from .nn import autodiff as ad
from .nn.gradcheck import grad_check_detail, random_projection
from .nn.layers import GatedGCNLayer, GCNLayer, GINLayer, MLP, VirtualNode, LayerNorm, make_batch
from .nn.loss import l1_cosine_loss

GRAD_TOL = 1e-4


def _p(rng, *shape, low=None):
    x = rng.standard_normal(shape)
    if low is not None:
        x = np.abs(x) + low
    return ad.Tensor(x, requires_grad=True)


def _scalar(out: ad.Tensor, w: np.ndarray) -> ad.Tensor:
    return ad.sum_(out * w)


def gradient_cases(seed: int) -> list[tuple[str, Callable[[], ad.Tensor], list]]:
    """(name, scalar-valued closure, tensors to check) for every primitive and
    the assembled layers."""
    rng = np.random.default_rng(seed)
    cases = []

    def unary(name, op, low=None):
        x = _p(rng, 4, 3, low=low)
        w = random_projection(op(x), seed)
        cases.append((name, lambda: _scalar(op(x), w), [x]))

    def binary(name, op, low=None):
        a, b = _p(rng, 4, 3), _p(rng, 4, 3, low=low)
        w = random_projection(op(a, b), seed)
        cases.append((name, lambda: _scalar(op(a, b), w), [a, b]))

    binary("add", ad.add)
    binary("sub", ad.sub)
    binary("mul", ad.mul)
    binary("div", ad.div, low=0.5)
    unary("relu", ad.relu)
    unary("sigmoid", ad.sigmoid)
    unary("abs", ad.abs_)
    unary("sqrt", ad.sqrt, low=0.5)
    unary("sum", lambda x: ad.sum_(x, axis=0))
    unary("mean", lambda x: ad.mean(x, axis=1, keepdims=True))
    unary("getitem", lambda x: x[np.array([0, 2, 2])])
    unary("l2_normalize", lambda x: ad.l2_normalize(x, axis=0))
    seg = ad.Index([0, 0, 1, 1], 2)
    unary("l2_normalize_segments", lambda x: ad.l2_normalize(x, segments=seg))

    a, b = _p(rng, 4, 3), _p(rng, 3, 5)
    wm = random_projection(ad.matmul(a, b), seed)
    cases.append(("matmul", lambda: _scalar(ad.matmul(a, b), wm), [a, b]))
    c1, c2 = _p(rng, 4, 2), _p(rng, 4, 3)
    wc = random_projection(ad.concat([c1, c2]), seed)
    cases.append(("concat", lambda: _scalar(ad.concat([c1, c2]), wc), [c1, c2]))

    idx = ad.Index([0, 2, 2, 1, 3], 4)
    xg = _p(rng, 4, 3)
    wg = random_projection(ad.gather(xg, idx), seed)
    cases.append(("gather", lambda: _scalar(ad.gather(xg, idx), wg), [xg]))
    y = _p(rng, 5, 3)
    ws = random_projection(ad.segment_sum(y, idx), seed)
    cases.append(("segment_sum", lambda: _scalar(ad.segment_sum(y, idx), ws), [y]))

    xl = _p(rng, 4, 6)
    ln = LayerNorm(6)
    ln.gamma.data[:] = rng.uniform(0.5, 1.5, 6)
    ln.beta.data[:] = rng.standard_normal(6)
    wl = random_projection(ln(xl), seed)
    cases.append(("layer_norm", lambda: _scalar(ln(xl), wl), [xl, ln.gamma, ln.beta]))

    mlp = MLP(3, 5, 2, rng, norm=True)
    x = _p(rng, 4, 3)
    wp = random_projection(mlp(x), seed)
    cases.append(("mlp", lambda: _scalar(mlp(x), wp), [x] + mlp.parameters()))

    g = gr.gen_er(7, 0.5, seed)
    batch = make_batch([g, gr.gen_cycle(5)])
    d = 6
    h0 = _p(rng, batch.num_nodes, d)
    e0 = _p(rng, batch.num_directed_edges, d)
    for name, cls in (("gatedgcn", GatedGCNLayer), ("gin", GINLayer), ("gcn", GCNLayer)):
        layer = cls(d, rng)
        wh = random_projection(layer(h0, e0, batch)[0], seed)
        cases.append((name, lambda layer=layer, wh=wh: _scalar(layer(h0, e0, batch)[0], wh),
                      [h0] + layer.parameters()))
    vn = VirtualNode(d, rng)
    v0 = _p(rng, batch.num_graphs, d)
    wv = random_projection(vn(h0, v0, batch)[0], seed)
    cases.append(("virtual_node", lambda: _scalar(vn(h0, v0, batch)[0], wv),
                  [h0, v0] + vn.parameters()))

    # loss against fixed targets, including an all-zero column
    npred = _p(rng, batch.num_nodes, 3)
    ntgt = rng.standard_normal((batch.num_nodes, 3))
    ntgt[:, 2] = 0.0
    gpred = _p(rng, 2, 4)
    gtgt = rng.standard_normal((2, 4))
    blocks = {"a": slice(0, 1), "b": slice(1, 4)}
    cases.append(("l1_cosine_loss",
                  lambda: l1_cosine_loss(npred, ntgt, gpred, gtgt, batch.node_graph, blocks),
                  [npred, gpred]))

    cases.append(encoder_case(seed))
    return cases


def encoder_case(seed: int, layers: int = 2):
    """Full encoder (projection, gated layers, virtual node, heads) and loss."""
    cfg = GPSEConfig(rand_feat_dim=4, hidden_dim=8, num_layers=layers, seed=seed)
    model = init_model(cfg)
    graphs = [gr.gen_er(6, 0.5, seed), gr.gen_cycle(5, id="c5")]
    bundles = [pse.compute_all_targets(g) for g in graphs]
    batch = make_batch(graphs)
    x = _features_for(graphs, cfg.rand_feat_dim, [seed, seed + 1])
    x.requires_grad = True
    node_t, graph_t = _batch_targets(model, bundles)

    def fn():
        npred, gpred, _ = model.forward(batch, x)
        return l1_cosine_loss(npred, node_t, gpred, graph_t, batch.node_graph,
                              pse.GRAPH_BLOCKS)

    return (f"encoder_{layers}layer", fn, [x] + model.parameters())


def _gradient_suite(seeds=range(5)):
    out = []
    for seed in seeds:
        for name, fn, tensors in gradient_cases(seed):
            r = grad_check_detail(fn, tensors, samples=8, seed=seed)
            ok = r.max_rel_error <= GRAD_TOL and r.kinks <= max(1, r.checked // 10)
            out.append((f"grad/{name}/seed{seed}", ok))
    return out


def _oracle_suite():
    out = []
    for s in range(10):
        g = gr.gen_er(8, 0.4, s)
        err = np.abs(oracles.rwse_by_walks(g, 6) - pse.rwse(g, 6)).max()
        out.append((f"rwse_walks/{s}", err <= 1e-12))
        g = gr.gen_er(10, 0.4, s)
        err = np.abs(oracles.heat_kernel_diag_by_series(g, 20) - pse.hk_diag_se(g, 20)).max()
        out.append((f"heat_series/{s}", err <= 1e-8))
        g = gr.gen_er(12, 0.35, s)
        c = pse.count_cycles(g)
        out.append((f"cycle_trace/{s}", (int(c[1]), int(c[2])) == oracles.cycles_by_trace(g)))
        ok = all(abs(float(oracles.curvature_brute(g, i, j))
                     - analysis.balanced_forman_curvature(g, i, j)) <= 1e-12 for i, j in g.edges)
        out.append((f"curvature_brute/{s}", ok))
        lap = gr.laplacian(g)
        dec = nm.sym_eig(lap)
        out.append((f"eigen_residual/{s}",
                    oracles.eigen_residual(lap, dec.eigenvalues, dec.eigenvectors) <= 1e-8))
    return out


def _invariant_suite():
    out = []
    rng = np.random.default_rng(0)
    for s in range(10):
        g = gr.gen_er(int(rng.integers(3, 15)), 0.3, s)
        out.append((f"laplacian_rows/{s}", bool(np.all(gr.laplacian(g).sum(axis=1) == 0))))
        out.append((f"vn_diameter/{s}", gr.diameter(gr.add_virtual_node(g)) <= 2))
        perm = rng.permutation(g.num_nodes)
        out.append((f"wl_relabel/{s}", not analysis.wl_distinguish(g, g.relabel(perm))[0]))
    for kind in ("hex_pent", "tri_hex"):
        out.append((f"wl_pair/{kind}", not analysis.wl_distinguish(*gr.gen_wl_pair(kind))[0]))
    k3 = gr.gen_complete(3)
    out.append(("k3_rwse", np.allclose(pse.rwse(k3, 4)[0], [0, 0.5, 0.25, 0.375], atol=1e-12)))
    out.append(("c6_cycles", list(pse.cycle_se(gr.gen_cycle(6))) == [6, 0, 0, 0, 1, 0, 0]))
    r = analysis.prop1_check(k3, 0, 1)
    out.append(("k3_prop1", abs(r.lhs - 1 / 6) <= 1e-12 and abs(r.bound - 1 / 6) <= 1e-12))
    return out


SUITES = {"gradients": _gradient_suite, "oracles": _oracle_suite, "invariants": _invariant_suite}


def run_selftest(force_fail: bool = False) -> dict:
    report = {}
    for name, suite in SUITES.items():
        t0 = time.perf_counter()
        checks = suite()
        if force_fail and name == "invariants":
            checks.append(("forced_failure", False))
        failed = [c for c, ok in checks if not ok]
        report[name] = {"passed": len(checks) - len(failed), "total": len(checks),
                        "failed": failed, "seconds": round(time.perf_counter() - t0, 2)}
    return report
