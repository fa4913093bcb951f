import csv
import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gpse import analysis as an
from gpse import pse
from gpse.encoder import GPSEConfig, init_model
from gpse.graph import (CSL_SKIPS, add_virtual_node, connected_components, disjoint_union,
                        from_edge_list, gen_complete, gen_csl, gen_cycle, gen_er, gen_path,
                        gen_quad_free_family, gen_star, gen_wl_pair)
from gpse.oracles import curvature_brute

from conftest import graphs


def test_curvature_examples():
    assert an.balanced_forman_curvature(gen_complete(3), 0, 1) == pytest.approx(1.5, abs=1e-15)
    assert an.balanced_forman_curvature(gen_path(2), 0, 1) == 2.0
    assert an.balanced_forman_curvature(gen_star(3), 0, 1) == pytest.approx(2 / 3, abs=1e-15)
    with pytest.raises(ValueError):
        an.balanced_forman_curvature(gen_path(3), 0, 2)


def test_square_terms_on_c4():
    t = an.curvature_terms(gen_cycle(4), 0, 1)
    assert (t.triangles, t.squares_i, t.squares_j, t.gamma_max) == (0, 1, 1, 1)
    # 1 + 1 - 2 + (1/2)(1 + 1)
    assert t.ric == pytest.approx(1.0)
    # the diagonal chord kills the square on K4 minus an edge
    chorded = from_edge_list(4, [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)])
    assert an.curvature_terms(chorded, 0, 1).squares_i == 0


def test_curvature_matches_brute_force():
    for s in range(100):
        rng = np.random.default_rng(s)
        g = gen_er(int(rng.integers(3, 13)), float(rng.uniform(0.2, 0.6)), s)
        for i, j in g.edges:
            exact = curvature_brute(g, i, j)
            assert isinstance(exact, Fraction)
            assert abs(an.balanced_forman_curvature(g, i, j) - float(exact)) <= 1e-12, (s, i, j)


def test_prop1_examples():
    assert an.prop1_bound(2, 2) == pytest.approx(1 / 6)
    r = an.prop1_check(gen_complete(3), 0, 1)
    assert r.ric == pytest.approx(1.5) and r.ric_vn == pytest.approx(4 / 3)
    assert r.lhs == pytest.approx(1 / 6, abs=1e-12) and r.bound == pytest.approx(1 / 6)
    assert r.holds
    for d in range(2, 12):
        assert an.prop1_bound(d, 1) > 0


def test_prop1_on_quad_free_family():
    fam = gen_quad_free_family(200, seed=0)
    assert len(fam) == 200
    checked = 0
    for g in fam:
        vn = add_virtual_node(g)
        for i, j in g.edges:
            r = an.prop1_check(g, i, j, vn)
            assert r.lhs <= r.bound + 1e-12, (g.id, i, j, r)
            checked += 1
    assert checked > 1000


@given(graphs(min_n=2, max_n=10))
def test_triangles_bounded_by_degree(g):
    for i, j in g.edges:
        t = an.curvature_terms(g, i, j)
        assert t.triangles <= min(t.deg_i, t.deg_j) - 1
        assert t.squares_i <= t.deg_i - 1 - t.triangles


def test_curvature_csv(tmp_path):
    gs = [gen_complete(3, id="k3"), gen_cycle(5, id="c5")]
    an.write_curvature_csv(gs, tmp_path / "a.csv")
    an.write_curvature_csv(gs, tmp_path / "b.csv", jobs=2)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = list(csv.DictReader((tmp_path / "a.csv").open()))
    assert list(rows[0]) == an.CURVATURE_FIELDS
    assert len(rows) == 3 + 5
    assert float(rows[0]["ric"]) == 1.5 and rows[0]["prop1_holds"] == "true"


def test_smoothness_examples():
    p2 = gen_path(2)
    assert an.smoothness_metric(np.ones((2, 3)), p2) == 0.0
    assert an.smoothness_metric(np.array([[0.0], [1.0]]), p2) == 1.0
    x = np.random.default_rng(0).standard_normal((6, 4))
    c6 = gen_cycle(6)
    assert an.smoothness_metric(2.5 * x, c6) == pytest.approx(2.5 * an.smoothness_metric(x, c6))


def test_mean_aggregation_oversmooths():
    used = 0
    for s in range(10):
        g = gen_er(15, 0.35, s)
        if len(connected_components(g)) != 1 or not any(pse.count_cycles(g)[1:2]):
            continue
        used += 1
        x = np.random.default_rng(s).standard_normal((15, 8))
        vals = an.mean_aggregation_smoothness(g, x, 20)
        assert all(b < a for a, b in zip(vals, vals[1:])), s
    assert used >= 5
    assert an.mean_aggregation_smoothness(gen_complete(5), np.eye(5), 1)[0] == pytest.approx(0)


@pytest.fixture(scope="module")
def small_model():
    return init_model(GPSEConfig(rand_feat_dim=4, hidden_dim=8, num_layers=3), seed=1)


@pytest.fixture(scope="module")
def small_model_no_vn():
    return init_model(GPSEConfig(rand_feat_dim=4, hidden_dim=8, num_layers=3,
                                 virtual_node=False), seed=1)


def test_influence_input_layer(small_model):
    g = gen_cycle(5)
    assert an.influence_probe(small_model, g, 2, 2, 0) > 0
    assert an.influence_probe(small_model, g, 0, 2, 0) == 0.0


def test_influence_path_reach(small_model, small_model_no_vn):
    p10 = gen_path(10)
    assert an.influence_probe(small_model_no_vn, p10, 0, 9, 3) == 0.0
    assert an.influence_probe(small_model_no_vn, p10, 0, 2, 3) > 0
    assert an.influence_probe(small_model, p10, 0, 9, 3) > 0
    with pytest.raises(ValueError):
        an.influence_probe(small_model, p10, 0, 9, 4)


def test_influence_matches_finite_difference(small_model):
    g = gen_path(4)
    x = np.random.default_rng(0).standard_normal((4, 4))
    got = an.influence_probe(small_model, g, 0, 1, 2, x=x)
    jac = np.zeros((8, 4))
    for c in range(4):
        for sgn in (1, -1):
            xp = x.copy()
            xp[0, c] += sgn * 1e-6
            jac[:, c] += sgn * an.layer_states(small_model, g, xp)[2][1] / 2e-6
    assert got == pytest.approx(np.abs(jac).sum(), rel=1e-5)


def test_wl_examples():
    assert an.wl_distinguish(*gen_wl_pair("tri_hex")) == (False, 1)
    assert not an.wl_distinguish(*gen_wl_pair("hex_pent"))[0]
    assert an.wl_distinguish(gen_path(3), gen_complete(3)) == (True, 1)
    assert an.wl_distinguish(gen_path(3), gen_path(4))[0]


def test_wl_csl_classes_indistinguishable():
    csl = [gen_csl(41, s) for s in CSL_SKIPS]
    for a, b in itertools.combinations(csl, 2):
        assert not an.wl_distinguish(a, b)[0]


def test_wl_refine_single_colour_on_regular():
    c = an.wl_refine(disjoint_union(gen_complete(3), gen_complete(3)))
    assert set(c.colors) == {0} and c.rounds == 1


@given(graphs(min_n=1, max_n=12), st.randoms(use_true_random=False))
def test_wl_relabel_and_stabilisation(g, r):
    perm = list(range(g.num_nodes))
    r.shuffle(perm)
    assert not an.wl_distinguish(g, g.relabel(perm))[0]
    assert an.wl_refine(g).rounds <= g.num_nodes


def test_separation_report_shape(small_model):
    rep = an.separation_experiment(small_model, gen_wl_pair("tri_hex"), draws=5, seed=3)
    assert rep["ones"]["cross"] <= 1e-6
    assert rep["draws"] == 5 and len(rep["pca"]) == 12
    assert set(rep["random"]) == {"cross", "intra_max", "separated"}
    again = an.separation_experiment(small_model, gen_wl_pair("tri_hex"), draws=5, seed=3)
    assert again == rep
