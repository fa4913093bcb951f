import struct
from dataclasses import replace

import numpy as np
import pytest

from gpse import encoder as enc
from gpse.encoder import ConfigError, GPSEConfig, TrainingError
from gpse.graph import GraphCorpus, gen_cycle, gen_er
from gpse.pse import compute_corpus_targets


@pytest.fixture(scope="module")
def small_corpus():
    rng = np.random.default_rng(3)
    graphs = tuple(gen_er(int(rng.integers(6, 14)), 0.3, s, id=f"g{s}") for s in range(40))
    corpus = GraphCorpus(graphs).with_splits(0.15, 0.15, seed=0)
    return corpus, compute_corpus_targets(corpus.graphs)


def tiny_cfg(**kw):
    base = dict(rand_feat_dim=4, hidden_dim=16, num_layers=2, epochs=3, batch_size=8)
    base.update(kw)
    return GPSEConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        GPSEConfig(rand_feat_dim=64, hidden_dim=32)
    with pytest.raises(ConfigError):
        GPSEConfig(num_layers=0)
    with pytest.raises(ConfigError):
        GPSEConfig(conv="transformer")
    with pytest.raises(ConfigError):
        GPSEConfig.from_dict({"hidden": 3})
    cfg = GPSEConfig(hidden_dim=32)
    assert GPSEConfig.from_dict(cfg.to_dict()) == cfg


def test_init_deterministic():
    a = enc.init_model(tiny_cfg(), seed=5).state_dict()
    b = enc.init_model(tiny_cfg(), seed=5).state_dict()
    c = enc.init_model(tiny_cfg(), seed=6).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_large_config_parameter_count():
    model = enc.init_model(GPSEConfig(hidden_dim=512, num_layers=20))
    assert model.parameter_count() > 10**6


def test_encode_deterministic_and_seed_sensitive():
    model = enc.init_model(tiny_cfg())
    g = gen_er(9, 0.4, 1)
    a = enc.encode(model, g, seed=3)
    assert a.shape == (9, 16)
    assert np.array_equal(a, enc.encode(model, g, seed=3))
    assert not np.allclose(a, enc.encode(model, g, seed=4))


def test_encode_draws_average():
    model = enc.init_model(tiny_cfg())
    g = gen_cycle(5)
    mean = enc.encode(model, g, seed=2, draws=3)
    parts = [enc.encode_with_features(model, g, enc.random_features(g, 4, enc.derive_seed(2, r)))
             for r in range(3)]
    assert np.allclose(mean, np.mean(parts, axis=0), atol=1e-14)


def test_encode_permutation_equivariant():
    model = enc.init_model(tiny_cfg(num_layers=3))
    g = gen_er(10, 0.35, 4)
    x = enc.random_features(g, 4, 9)
    perm = np.random.default_rng(0).permutation(10)
    x2 = np.empty_like(x)
    x2[perm] = x
    a = enc.encode_with_features(model, g, x)
    b = enc.encode_with_features(model, g.relabel(perm), x2)
    assert np.abs(b[perm] - a).max() <= 1e-9


def test_perfect_predictions_score_one(small_corpus):
    corpus, targets = small_corpus
    model = enc.init_model(tiny_cfg())
    model.graph_mean, model.graph_std = enc.graph_target_stats(targets)
    node_t = [b.node_targets for b in targets]
    graph_t = [(b.graph_targets - model.graph_mean) / model.graph_std for b in targets]
    r2 = enc.recovery_from_predictions(node_t, node_t, graph_t, graph_t)
    assert all(v == 1.0 for v in r2.values())
    assert enc.RecoveryReport(r2).overall == 1.0


def test_training_descends_and_selects_best(small_corpus):
    corpus, targets = small_corpus
    model, report = enc.train(corpus, tiny_cfg(epochs=6), targets)
    assert report.train_losses[-1] < report.train_losses[0]
    assert all(np.isfinite(report.train_losses))
    assert report.best_epoch == int(np.argmin(report.val_losses))
    assert set(report.to_dict()) >= {"Overall", "LapPE", "ElstaticPE", "RWSE", "HKdiagSE",
                                     "EigValSE", "CycleSE"}
    assert all(v <= 1.0 for v in report.r2.values())


def test_training_reproducible(small_corpus):
    corpus, targets = small_corpus
    _, a = enc.train(corpus, tiny_cfg(epochs=2), targets)
    _, b = enc.train(corpus, tiny_cfg(epochs=2), targets)
    assert a.train_losses == b.train_losses and a.val_losses == b.val_losses


def test_training_needs_splits(small_corpus):
    corpus, targets = small_corpus
    no_val = GraphCorpus(corpus.graphs, tuple("train" for _ in corpus.graphs))
    with pytest.raises(ConfigError):
        enc.train(no_val, tiny_cfg(), targets)


def test_nan_targets_abort(small_corpus):
    corpus, targets = small_corpus
    bad = list(targets)
    i = corpus.split_indices("train")[0]
    poisoned = bad[i].node_targets.copy()
    poisoned[0, 0] = np.nan
    bad[i] = replace(bad[i], node_targets=poisoned)
    with pytest.raises(TrainingError, match="non-finite"):
        enc.train(corpus, tiny_cfg(epochs=1), bad)


def test_checkpoint_round_trip(tmp_path, small_corpus):
    corpus, targets = small_corpus
    model = enc.init_model(tiny_cfg())
    model.graph_mean, model.graph_std = enc.graph_target_stats(targets)
    path = tmp_path / "m.ckpt"
    enc.save_checkpoint(model, path)
    back = enc.load_checkpoint(path)
    assert back.cfg == model.cfg
    assert np.array_equal(back.graph_std, model.graph_std)
    g = corpus.graphs[0]
    assert np.array_equal(enc.encode(back, g, 1), enc.encode(model, g, 1))


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    enc.save_checkpoint(enc.init_model(tiny_cfg()), path)
    data = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(data[:-9])
    with pytest.raises(enc.CheckpointError, match="truncated"):
        enc.load_checkpoint(tmp_path / "t.ckpt")
    bumped = data[:8] + struct.pack("<I", 2) + data[12:]
    (tmp_path / "v.ckpt").write_bytes(bumped)
    with pytest.raises(enc.CheckpointError, match="version"):
        enc.load_checkpoint(tmp_path / "v.ckpt")
    (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(enc.CheckpointError, match="magic"):
        enc.load_checkpoint(tmp_path / "x.ckpt")
    (tmp_path / "y.ckpt").write_bytes(data + b"\0")
    with pytest.raises(enc.CheckpointError, match="trailing"):
        enc.load_checkpoint(tmp_path / "y.ckpt")


def test_export_binary_and_csv(tmp_path):
    model = enc.init_model(GPSEConfig(num_layers=2))
    graphs = [gen_er(n, 0.4, n, id=f"g{n}") for n in (5, 7, 9)]
    p = tmp_path / "e.bin"
    enc.export_encodings(model, graphs, p, seed=1)
    raw = p.read_bytes()
    assert raw[:8] == b"GPSEENC1"
    assert struct.unpack("<III", raw[8:20]) == (1, 3, 128)
    recs = enc.read_encodings(p)
    assert [(gid, e.shape) for gid, e in recs] == [("g5", (5, 128)), ("g7", (7, 128)),
                                                   ("g9", (9, 128))]
    assert len(raw) == 20 + sum(4 + 2 + 4 + n * 128 * 4 for n in (5, 7, 9))
    enc.export_encodings(model, graphs, tmp_path / "f.bin", seed=1, jobs=2)
    assert (tmp_path / "f.bin").read_bytes() == raw
    enc.export_encodings(model, graphs, tmp_path / "e.csv", seed=1, fmt="csv")
    rows = (tmp_path / "e.csv").read_text().splitlines()
    assert len(rows) == 1 + 21 and len(rows[1].split(",")) == 2 + 128
    assert np.allclose([float(x) for x in rows[1].split(",")[2:]], recs[0][1][0])
