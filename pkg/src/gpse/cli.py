"""``gpse`` command line: generation, targets, training, encoding, analyses.

Exit codes: 0 success, 1 input/validation error, 2 numerical failure.
Every command that writes ``--out`` also writes the resolved run settings
next to it (``<out>.run.json``, or ``config.json`` inside output
directories). Timings go only to log files, so re-runs are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import analysis, graph as gr, pse
from .encoder import (CheckpointError, ConfigError, GPSEConfig, derive_seed,
                      evaluate_recovery, export_encodings, init_model, load_checkpoint,
                      save_checkpoint, train)

# run settings beyond the model/optimiser config
RUN_KEYS = {"val_frac": 0.05, "test_frac": 0.05, "draws": 1, "jobs": 1}


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


# ------------------------------------------------------------------ helpers


def resolve_seed(flag: int | None, config_seed: int | None = None) -> int:
    """Flag, then config, then ``GPSE_SEED``, then 0."""
    if flag is not None:
        return flag
    if config_seed is not None:
        return config_seed
    env = os.environ.get("GPSE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"GPSE_SEED must be an integer, got {env!r}") from None
    return 0


def load_run_config(path: str | None) -> tuple[dict, dict]:
    """(model config dict, run settings) from a JSON file; unknown keys rejected."""
    raw = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError(f"{path}: config must be a JSON object")
    model_keys = {f.name for f in fields(GPSEConfig)}
    unknown = set(raw) - model_keys - set(RUN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    run = dict(RUN_KEYS)
    run.update({k: raw[k] for k in RUN_KEYS if k in raw})
    return {k: v for k, v in raw.items() if k in model_keys}, run


def _dump(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def echo_run(out: Path, settings: dict):
    target = out / "config.json" if out.is_dir() else out.with_name(out.name + ".run.json")
    _dump(settings, target)


def parse_range(text: str) -> tuple[int, int]:
    """``"8..30"`` -> (8, 30); ``"20"`` -> (20, 20)."""
    try:
        if ".." in text:
            lo, hi = (int(x) for x in text.split("..", 1))
        else:
            lo = hi = int(text)
    except ValueError:
        raise UsageError(f"bad node-count range {text!r}") from None
    if lo < 1 or hi < lo:
        raise UsageError(f"bad node-count range {text!r}")
    return lo, hi


def parse_int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise UsageError(f"bad integer list {text!r}") from None


def _file_logger(path: Path) -> logging.Handler:
    handler = logging.FileHandler(path, mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(message)s"))
    logger = logging.getLogger("gpse")
    logger.setLevel(logging.INFO)
    logger.addHandler(handler)
    return handler


def _corpus_summary(corpus: gr.GraphCorpus) -> dict:
    ns = np.array([g.num_nodes for g in corpus.graphs] or [0])
    ms = np.array([g.num_edges for g in corpus.graphs] or [0])
    out = {"count": len(corpus),
           "n": {"min": int(ns.min()), "mean": float(ns.mean()), "max": int(ns.max())},
           "m": {"min": int(ms.min()), "mean": float(ms.mean()), "max": int(ms.max())}}
    if corpus.labels is not None:
        out["classes"] = len(set(corpus.labels))
    if corpus.splits is not None:
        out["splits"] = {s: corpus.splits.count(s) for s in gr.SPLITS}
    return out


def _need_ckpt(args):
    if not args.ckpt:
        raise UsageError(f"--ckpt is required for {getattr(args, 'kind', args.cmd)}")
    return load_checkpoint(args.ckpt)


# ----------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    seed = resolve_seed(args.seed)
    if args.kind == "er":
        lo, hi = parse_range(args.n or "8..30")
        rng = np.random.default_rng(seed)
        sizes = rng.integers(lo, hi + 1, size=args.count)
        graphs = [gr.gen_er(int(n), args.p, derive_seed(seed, i), id=f"er_{i}")
                  for i, n in enumerate(sizes)]
        corpus = gr.GraphCorpus(tuple(graphs)).with_splits(args.val_frac, args.test_frac, seed)
    elif args.kind == "csl":
        n = parse_range(args.n)[0] if args.n else 41
        pairs = gr.gen_csl_dataset(n=n, seed=seed)
        corpus = gr.GraphCorpus(tuple(g for g, _ in pairs), labels=tuple(l for _, l in pairs))
    elif args.kind == "wl-pair":
        graphs = []
        for kind in ("hex_pent", "tri_hex"):
            graphs.extend(gr.gen_wl_pair(kind))
        corpus = gr.GraphCorpus(tuple(graphs))
    else:
        corpus = gr.GraphCorpus(tuple(gr.gen_quad_free_family(args.count, seed)))
    out = Path(args.out)
    gr.corpus_write(corpus, out)
    echo_run(out, {"command": "gen", "kind": args.kind, "n": args.n, "p": args.p,
                   "count": args.count, "seed": seed, "val_frac": args.val_frac,
                   "test_frac": args.test_frac})
    print(json.dumps(_corpus_summary(corpus), sort_keys=True))
    return 0


def cmd_pse(args) -> int:
    corpus = gr.corpus_read(args.input)
    bundles = pse.compute_corpus_targets(corpus.graphs, normalize=not args.raw, jobs=args.jobs)
    out = Path(args.out)
    graph_path = pse.write_targets_csv(corpus.graphs, bundles, out)
    echo_run(out, {"command": "pse", "input": args.input, "raw": args.raw})
    print(json.dumps({"graphs": len(corpus), "node_rows": sum(g.num_nodes for g in corpus),
                      "graph_file": str(graph_path)}))
    return 0


def _prepare_training(args):
    model_cfg, run = load_run_config(args.config)
    model_cfg["seed"] = resolve_seed(args.seed, model_cfg.get("seed"))
    if args.epochs is not None:
        model_cfg["epochs"] = args.epochs
    cfg = GPSEConfig.from_dict(model_cfg)
    if args.jobs is not None:
        run["jobs"] = args.jobs
    corpus = gr.corpus_read(args.input)
    if corpus.splits is None:
        corpus = corpus.with_splits(run["val_frac"], run["test_frac"], cfg.seed)
    return cfg, run, corpus


def _write_report(report, out_dir: Path, name: str = "report.json"):
    data = report.to_dict()
    _dump(data, out_dir / name)
    with open(out_dir / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for e, (a, b) in enumerate(zip(report.train_losses, report.val_losses)):
            w.writerow([e, repr(a), repr(b)])
    with open(out_dir / "r2.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Overall", *pse.FAMILY_NAMES])
        w.writerow([repr(report.overall), *(repr(report.r2[f]) for f in pse.FAMILY_NAMES)])


def cmd_train(args) -> int:
    cfg, run, corpus = _prepare_training(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump({"command": "train", "input": args.input, "model": cfg.to_dict(), "run": run},
          out / "config.json")
    handler = _file_logger(out / "train.log")
    try:
        targets = pse.compute_corpus_targets(corpus.graphs, jobs=run["jobs"])
        model, report = train(corpus, cfg, targets)
        logging.getLogger("gpse").info("finished in %.1f s", report.seconds)
    finally:
        logging.getLogger("gpse").removeHandler(handler)
        handler.close()
    save_checkpoint(model, out / "model.ckpt")
    _write_report(report, out)
    print(json.dumps({"Overall": report.overall, **report.r2}, sort_keys=True))
    return 0


def _select(corpus: gr.GraphCorpus, split: str) -> list[gr.Graph]:
    if split == "all" or corpus.splits is None:
        return list(corpus.graphs)
    return corpus.split(split)


def cmd_eval(args) -> int:
    model = _need_ckpt(args)
    corpus = gr.corpus_read(args.input)
    graphs = _select(corpus, args.split)
    if not graphs:
        raise UsageError(f"split {args.split!r} is empty")
    seed = resolve_seed(args.seed)
    bundles = pse.compute_corpus_targets(graphs, jobs=args.jobs)
    report = evaluate_recovery(model, graphs, bundles, seed=derive_seed(seed, 4))
    out = Path(args.out)
    data = {"Overall": report.overall, **report.r2}
    _dump(data, out)
    echo_run(out, {"command": "eval", "ckpt": args.ckpt, "input": args.input,
                   "split": args.split, "seed": seed})
    print(json.dumps(data, sort_keys=True))
    return 0


def cmd_encode(args) -> int:
    model = _need_ckpt(args)
    corpus = gr.corpus_read(args.input)
    seed = resolve_seed(args.seed)
    out = Path(args.out)
    export_encodings(model, corpus.graphs, out, seed, fmt=args.format, draws=args.draws,
                     jobs=args.jobs)
    echo_run(out, {"command": "encode", "ckpt": args.ckpt, "input": args.input,
                   "seed": seed, "format": args.format, "draws": args.draws})
    return 0


def cmd_analyze(args) -> int:
    corpus = gr.corpus_read(args.input)
    out = Path(args.out)
    seed = resolve_seed(args.seed)
    settings = {"command": "analyze", "kind": args.kind, "input": args.input, "seed": seed}
    if args.kind == "curvature":
        analysis.write_curvature_csv(corpus.graphs, out, jobs=args.jobs)
    elif args.kind == "wl":
        gs = corpus.graphs
        if len(gs) % 2:
            raise UsageError("wl analysis pairs consecutive graphs; corpus size must be even")
        rows = []
        for a, b in zip(gs[0::2], gs[1::2]):
            dist, rounds = analysis.wl_distinguish(a, b)
            rows.append({"graphs": [a.id, b.id], "distinguished": dist, "rounds": rounds})
        _dump(rows, out)
    elif args.kind == "separation":
        model = _need_ckpt(args)
        if len(corpus) < 2:
            raise UsageError("separation needs a corpus with at least two graphs")
        pair = (corpus.graphs[args.pair[0]], corpus.graphs[args.pair[1]])
        report = analysis.separation_experiment(model, pair, draws=args.draws, seed=seed)
        pca = report.pop("pca")
        _dump(report, out)
        with open(out.with_suffix(".pca.csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["graph", "mode", "pc1", "pc2"])
            w.writeheader()
            for row in pca:
                w.writerow({**row, "pc1": repr(row["pc1"]), "pc2": repr(row["pc2"])})
        settings.update({"ckpt": args.ckpt, "draws": args.draws, "pair": args.pair})
    else:
        model = _need_ckpt(args)
        rows = []
        for g in corpus.graphs:
            src = args.source if args.source is not None else 0
            tgt = args.target if args.target is not None else g.num_nodes - 1
            if not (0 <= src < g.num_nodes and 0 <= tgt < g.num_nodes):
                raise UsageError(f"{g.id}: source/target outside 0..{g.num_nodes - 1}")
            layers = [args.layer] if args.layer is not None else \
                list(range(model.cfg.num_layers + 1))
            x = analysis.random_features(g, model.cfg.rand_feat_dim, derive_seed(seed, 5))
            for r in layers:
                rows.append({"graph_id": g.id, "source": src, "target": tgt, "layer": r,
                             "influence": analysis.influence_probe(model, g, src, tgt, r, x=x)})
        _dump(rows, out)
        settings.update({"ckpt": args.ckpt, "source": args.source, "target": args.target,
                         "layer": args.layer})
    echo_run(out, settings)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    report = run_selftest(force_fail=args.force_fail)
    ok = True
    for name, r in report.items():
        status = "ok" if not r["failed"] else "FAIL"
        ok &= not r["failed"]
        print(f"{name}: {r['passed']}/{r['total']} passed [{status}]")
        for f in r["failed"]:
            print(f"  failed: {f}")
    return 0 if ok else 1


def cmd_ablate(args) -> int:
    """Train one model per (conv, depth, VN) cell on the same corpus and targets."""
    cfg, run, corpus = _prepare_training(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    depths = parse_int_list(args.depths) if args.depths else [cfg.num_layers]
    convs = args.convs.split(",") if args.convs else [cfg.conv]
    vns = {"both": [True, False], "on": [True], "off": [False]}[args.vn]
    _dump({"command": "ablate", "input": args.input, "model": cfg.to_dict(), "run": run,
           "depths": depths, "convs": convs, "vn": args.vn}, out / "config.json")
    targets = pse.compute_corpus_targets(corpus.graphs, jobs=run["jobs"])
    rows = []
    handler = _file_logger(out / "ablate.log")
    try:
        for conv in convs:
            for depth in depths:
                for vn in vns:
                    cell = GPSEConfig.from_dict({**cfg.to_dict(), "conv": conv,
                                                 "num_layers": depth, "virtual_node": vn})
                    _, report = train(corpus, cell, targets)
                    logging.getLogger("gpse").info("%s depth %d vn %s: %.4f (%.1f s)", conv,
                                                   depth, vn, report.overall, report.seconds)
                    rows.append({"conv": conv, "layers": depth, "virtual_node": vn,
                                 "Overall": report.overall, **report.r2})
                    print(json.dumps(rows[-1], sort_keys=True), flush=True)
    finally:
        logging.getLogger("gpse").removeHandler(handler)
        handler.close()
    cols = ["conv", "layers", "virtual_node", "Overall", *pse.FAMILY_NAMES]
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    _dump(rows, out / "ablation.json")
    return 0


# ------------------------------------------------------------------ parsing


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gpse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a graph corpus (JSON Lines)")
    g.add_argument("--kind", choices=["er", "csl", "wl-pair", "family"], required=True)
    g.add_argument("--n", help="node count or range lo..hi (er), ring size (csl)")
    g.add_argument("--p", type=float, default=0.15)
    g.add_argument("--count", type=int, default=2000)
    g.add_argument("--seed", type=int)
    g.add_argument("--val-frac", type=float, default=0.05)
    g.add_argument("--test-frac", type=float, default=0.05)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    s = sub.add_parser("pse", help="compute PSE targets to CSV")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--raw", action="store_true", help="skip per-graph normalisation")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(fn=cmd_pse)

    for name, fn, help_ in (("train", cmd_train, "train an encoder"),
                            ("ablate", cmd_ablate, "train a conv x depth x VN grid")):
        t = sub.add_parser(name, help=help_)
        t.add_argument("--in", dest="input", required=True)
        t.add_argument("--out", required=True, help="output directory")
        t.add_argument("--config", help="JSON run config")
        t.add_argument("--seed", type=int)
        t.add_argument("--epochs", type=int)
        t.add_argument("--jobs", type=int)
        if name == "ablate":
            t.add_argument("--depths", default="5,10,15,20")
            t.add_argument("--convs")
            t.add_argument("--vn", choices=["both", "on", "off"], default="both")
        t.set_defaults(fn=fn)

    e = sub.add_parser("eval", help="PSE recovery report for a checkpoint")
    e.add_argument("--ckpt")
    e.add_argument("--in", dest="input", required=True)
    e.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    e.add_argument("--seed", type=int)
    e.add_argument("--jobs", type=int, default=1)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("encode", help="export node encodings")
    c.add_argument("--ckpt")
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--format", choices=["bin", "csv"], default="bin")
    c.add_argument("--seed", type=int)
    c.add_argument("--draws", type=int, default=1)
    c.add_argument("--jobs", type=int, default=1)
    c.set_defaults(fn=cmd_encode)

    a = sub.add_parser("analyze", help="curvature, 1-WL, separation or influence reports")
    a.add_argument("kind", choices=["curvature", "wl", "separation", "influence"])
    a.add_argument("--in", dest="input", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--ckpt")
    a.add_argument("--seed", type=int)
    a.add_argument("--draws", type=int, default=20)
    a.add_argument("--pair", type=int, nargs=2, default=[0, 1], metavar=("I", "J"))
    a.add_argument("--source", type=int)
    a.add_argument("--target", type=int)
    a.add_argument("--layer", type=int)
    a.add_argument("--jobs", type=int, default=1)
    a.set_defaults(fn=cmd_analyze)

    st = sub.add_parser("selftest", help="gradient, oracle and invariant checks")
    st.add_argument("--force-fail", action="store_true", help=argparse.SUPPRESS)
    st.set_defaults(fn=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ArithmeticError as exc:  # non-finite loss, non-convergence
        print(f"gpse {args.cmd}: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError, CheckpointError) as exc:
        print(f"gpse {args.cmd}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
