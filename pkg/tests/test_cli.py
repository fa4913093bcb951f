import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from gpse import graph as gr
from gpse.cli import main, resolve_seed
from gpse.encoder import read_encodings

TINY = {"rand_feat_dim": 4, "hidden_dim": 16, "num_layers": 2, "epochs": 2, "batch_size": 16}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def er_corpus(work):
    path = work / "er.jsonl"
    assert run("gen", "--kind", "er", "--count", 30, "--n", "8..14", "--seed", 1,
               "--val-frac", 0.2, "--test-frac", 0.2, "--out", path) == 0
    return path


@pytest.fixture(scope="module")
def trained(work, er_corpus):
    cfg = work / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    out = work / "run"
    assert run("train", "--in", er_corpus, "--out", out, "--config", cfg, "--seed", 0) == 0
    return out


def test_gen_csl(tmp_path, capsys):
    assert run("gen", "--kind", "csl", "--out", tmp_path / "csl.jsonl") == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["count"] == 150 and summary["classes"] == 10
    assert summary["n"]["mean"] == 41.0


def test_gen_wl_pair(tmp_path):
    assert run("gen", "--kind", "wl-pair", "--out", tmp_path / "p.jsonl") == 0
    assert len(gr.corpus_read(tmp_path / "p.jsonl")) == 4


def test_gen_er_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        assert run("gen", "--kind", "er", "--count", 2000, "--n", "8..30", "--p", 0.15,
                   "--seed", 1, "--out", tmp_path / f"{name}.jsonl") == 0
    a = (tmp_path / "a.jsonl").read_bytes()
    assert a == (tmp_path / "b.jsonl").read_bytes()
    corpus = gr.corpus_read(tmp_path / "a.jsonl")
    assert len(corpus) == 2000
    assert {g.num_nodes for g in corpus.graphs} <= set(range(8, 31))
    assert (tmp_path / "a.jsonl.run.json").exists()


def test_gen_bad_flags(tmp_path):
    with pytest.raises(SystemExit) as info:
        run("gen", "--kind", "bogus", "--out", tmp_path / "x")
    assert info.value.code == 1
    assert run("gen", "--kind", "er", "--n", "9..3", "--out", tmp_path / "x") == 1


def test_pse_k3_and_raw(tmp_path):
    gr.corpus_write(gr.GraphCorpus((gr.gen_complete(3, id="k3"),)), tmp_path / "k3.jsonl")
    assert run("pse", "--in", tmp_path / "k3.jsonl", "--out", tmp_path / "t.csv") == 0
    rows = list(csv.reader((tmp_path / "t.csv").open()))
    assert len(rows) == 1 + 3 and len(rows[0]) == 2 + 51
    assert run("pse", "--in", tmp_path / "k3.jsonl", "--out", tmp_path / "r.csv", "--raw") == 0
    rows = list(csv.DictReader((tmp_path / "r.csv").open()))
    rw = [float(v) for r in rows for k, v in r.items() if k.startswith("RWSE")]
    assert all(0 <= v <= 1 for v in rw)


def test_pse_corrupt_line(tmp_path, capsys):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"id":"a","num_nodes":2,"edges":[[0,1]]}\n{oops\n')
    assert run("pse", "--in", p, "--out", tmp_path / "t.csv") == 1
    assert "line 2" in capsys.readouterr().err


def test_train_outputs(trained):
    report = json.loads((trained / "report.json").read_text())
    assert {"Overall", "ElstaticPE", "LapPE", "RWSE", "HKdiagSE", "EigValSE",
            "CycleSE"} <= set(report)
    for name in ("config.json", "train.log", "model.ckpt", "losses.csv", "r2.csv"):
        assert (trained / name).exists(), name
    assert json.loads((trained / "config.json").read_text())["model"]["hidden_dim"] == 16


def test_train_rerun_byte_identical(work, er_corpus, trained):
    out = work / "run2"
    assert run("train", "--in", er_corpus, "--out", out, "--config", work / "tiny.json",
               "--seed", 0) == 0
    for name in ("config.json", "model.ckpt", "report.json", "losses.csv", "r2.csv"):
        assert (out / name).read_bytes() == (trained / name).read_bytes(), name


def test_train_unknown_config_key(tmp_path, er_corpus):
    (tmp_path / "c.json").write_text('{"hidden_dim": 16, "widht": 3}')
    assert run("train", "--in", er_corpus, "--out", tmp_path / "o",
               "--config", tmp_path / "c.json") == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_2(tmp_path, er_corpus, capsys):
    (tmp_path / "c.json").write_text(json.dumps({**TINY, "lr": 1e300}))
    code = run("train", "--in", er_corpus, "--out", tmp_path / "o",
               "--config", tmp_path / "c.json")
    assert code == 2
    assert "numerical failure" in capsys.readouterr().err


def test_eval_and_untrained(work, er_corpus, trained, tmp_path):
    assert run("eval", "--ckpt", trained / "model.ckpt", "--in", er_corpus,
               "--out", tmp_path / "e.json") == 0
    rep = json.loads((tmp_path / "e.json").read_text())
    assert set(rep) == {"Overall", "ElstaticPE", "LapPE", "RWSE", "HKdiagSE", "EigValSE",
                        "CycleSE"}
    assert run("eval", "--in", er_corpus, "--out", tmp_path / "f.json") == 1


def test_encode_deterministic(tmp_path, er_corpus, trained):
    for name in ("a.bin", "b.bin"):
        assert run("encode", "--ckpt", trained / "model.ckpt", "--in", er_corpus,
                   "--out", tmp_path / name, "--seed", 4) == 0
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    recs = read_encodings(tmp_path / "a.bin")
    assert len(recs) == 30 and recs[0][1].dtype == np.float32


def test_analyze_curvature_k3(tmp_path):
    gr.corpus_write(gr.GraphCorpus((gr.gen_complete(3, id="k3"),)), tmp_path / "k3.jsonl")
    assert run("analyze", "curvature", "--in", tmp_path / "k3.jsonl",
               "--out", tmp_path / "c.csv") == 0
    rows = list(csv.DictReader((tmp_path / "c.csv").open()))
    assert len(rows) == 3 and {float(r["ric"]) for r in rows} == {1.5}


def test_analyze_wl_pairs(tmp_path):
    run("gen", "--kind", "wl-pair", "--out", tmp_path / "p.jsonl")
    assert run("analyze", "wl", "--in", tmp_path / "p.jsonl", "--out", tmp_path / "w.json") == 0
    rows = json.loads((tmp_path / "w.json").read_text())
    assert [r["distinguished"] for r in rows] == [False, False]


def test_analyze_needs_ckpt(tmp_path, capsys):
    run("gen", "--kind", "wl-pair", "--out", tmp_path / "p.jsonl")
    for kind in ("separation", "influence"):
        assert run("analyze", kind, "--in", tmp_path / "p.jsonl", "--out", tmp_path / "s") == 1
        assert "--ckpt" in capsys.readouterr().err


def test_analyze_separation_and_influence(tmp_path, trained):
    run("gen", "--kind", "wl-pair", "--out", tmp_path / "p.jsonl")
    ckpt = trained / "model.ckpt"
    args = ("analyze", "separation", "--in", tmp_path / "p.jsonl", "--ckpt", ckpt,
            "--draws", 4, "--pair", 2, 3)
    assert run(*args, "--out", tmp_path / "s.json") == 0
    assert run(*args, "--out", tmp_path / "t.json") == 0
    assert (tmp_path / "s.json").read_bytes() == (tmp_path / "t.json").read_bytes()
    assert (tmp_path / "s.pca.csv").read_bytes() == (tmp_path / "t.pca.csv").read_bytes()
    assert json.loads((tmp_path / "s.json").read_text())["ones"]["cross"] <= 1e-6
    assert run("analyze", "influence", "--in", tmp_path / "p.jsonl", "--ckpt", ckpt,
               "--out", tmp_path / "i.json") == 0
    rows = json.loads((tmp_path / "i.json").read_text())
    assert len(rows) == 4 * 3 and rows[0]["influence"] == 0.0


def test_ablate_grid(tmp_path, er_corpus, work):
    assert run("ablate", "--in", er_corpus, "--out", tmp_path / "a", "--config",
               work / "tiny.json", "--depths", "1,2", "--epochs", 1) == 0
    rows = list(csv.DictReader((tmp_path / "a" / "ablation.csv").open()))
    assert [(r["layers"], r["virtual_node"]) for r in rows] == [
        ("1", "True"), ("1", "False"), ("2", "True"), ("2", "False")]


def test_seed_resolution(monkeypatch):
    monkeypatch.delenv("GPSE_SEED", raising=False)
    assert resolve_seed(None) == 0
    monkeypatch.setenv("GPSE_SEED", "17")
    assert resolve_seed(None) == 17
    assert resolve_seed(None, 5) == 5
    assert resolve_seed(3, 5) == 3


def test_env_seed_drives_gen(tmp_path, monkeypatch):
    monkeypatch.setenv("GPSE_SEED", "9")
    run("gen", "--kind", "er", "--count", 5, "--out", tmp_path / "a.jsonl")
    monkeypatch.delenv("GPSE_SEED")
    run("gen", "--kind", "er", "--count", 5, "--seed", 9, "--out", tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


@pytest.mark.slow
def test_selftest_entry_point():
    ok = subprocess.run([sys.executable, "-m", "gpse.cli", "selftest"], capture_output=True,
                        text=True, timeout=300)
    assert ok.returncode == 0, ok.stdout + ok.stderr
    assert "gradients:" in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "gpse.cli", "selftest", "--force-fail"],
                         capture_output=True, text=True, timeout=300)
    assert bad.returncode == 1
