"""The GPSE encoder: random node features -> projection -> deep message passing
with a virtual node -> independent per-family MLP heads.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .graph import Graph, GraphCorpus
from .numerics import gaussian_matrix, r2_score
from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .nn.layers import CONV_TYPES, MLP, GraphBatch, Linear, Module, VirtualNode, make_batch
from .nn.loss import l1_cosine_loss
from .nn.optim import Adam, clip_grad_norm, warmup_cosine
from .pse import (FAMILY_NAMES, GRAPH_BLOCKS, GRAPH_FAMILIES, NODE_BLOCKS, NODE_FAMILIES,
                  TargetBundle, compute_corpus_targets)

log = logging.getLogger(__name__)

CKPT_MAGIC = b"GPSECKPT"
CKPT_VERSION = 1
ENC_MAGIC = b"GPSEENC1"
ENC_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingError(FloatingPointError):
    """Non-finite loss or gradients during training."""


@dataclass
class GPSEConfig:
    rand_feat_dim: int = 20
    hidden_dim: int = 128
    num_layers: int = 10
    head_depth: int = 2
    independent_heads: bool = True
    conv: str = "gatedgcn"
    virtual_node: bool = True
    node_dims: tuple = tuple(w for _, w in NODE_FAMILIES)
    graph_dims: tuple = tuple(w for _, w in GRAPH_FAMILIES)
    lr: float = 1e-3
    warmup_frac: float = 0.05
    grad_clip: float = 5.0
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    resample_features_each_epoch: bool = True

    def __post_init__(self):
        self.node_dims = tuple(self.node_dims)
        self.graph_dims = tuple(self.graph_dims)
        self.validate()

    def validate(self):
        if self.rand_feat_dim < 1 or self.hidden_dim < 1:
            raise ConfigError("feature and hidden widths must be positive")
        if self.rand_feat_dim > self.hidden_dim:
            raise ConfigError(
                f"random feature dim {self.rand_feat_dim} exceeds hidden dim {self.hidden_dim}")
        if self.num_layers < 1:
            raise ConfigError("need at least one message-passing layer")
        if self.head_depth < 1:
            raise ConfigError("head depth must be >= 1")
        if self.conv not in CONV_TYPES:
            raise ConfigError(f"unknown conv {self.conv!r}; choose from {sorted(CONV_TYPES)}")
        if self.node_dims != tuple(w for _, w in NODE_FAMILIES) or \
                self.graph_dims != tuple(w for _, w in GRAPH_FAMILIES):
            raise ConfigError("family widths do not match the target layout")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch size >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "GPSEConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["node_dims"] = list(self.node_dims)
        out["graph_dims"] = list(self.graph_dims)
        return out


class GPSEModel(Module):
    def __init__(self, cfg: GPSEConfig, seed: int | None = None):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        d = cfg.hidden_dim
        self.proj = Linear(cfg.rand_feat_dim, d, rng)
        conv = CONV_TYPES[cfg.conv]
        self.convs = [conv(d, rng) for _ in range(cfg.num_layers)]
        self.vns = [VirtualNode(d, rng) for _ in range(cfg.num_layers)] if cfg.virtual_node else []
        if cfg.independent_heads:
            self.node_heads = {name: MLP(d, d, w, rng, depth=cfg.head_depth)
                               for name, w in NODE_FAMILIES}
            self.graph_heads = {name: MLP(d, d, w, rng, depth=cfg.head_depth)
                                for name, w in GRAPH_FAMILIES}
        else:
            self.node_heads = {"shared": MLP(d, d, sum(cfg.node_dims), rng, depth=cfg.head_depth)}
            self.graph_heads = {"shared": MLP(d, d, sum(cfg.graph_dims), rng,
                                              depth=cfg.head_depth)}
        self.graph_mean = np.zeros(sum(cfg.graph_dims))
        self.graph_std = np.ones(sum(cfg.graph_dims))

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def trunk(self, batch: GraphBatch, x: Tensor, keep_states: bool = False):
        """Node states, graph states and (optionally) the per-layer node states.

        ``states[r]`` is the node state after ``r`` layers (``r = 0`` is the
        projected input).
        """
        if x.shape != (batch.num_nodes, self.cfg.rand_feat_dim):
            raise ad.ShapeError(f"features {x.shape} do not match batch/config")
        d = self.cfg.hidden_dim
        h = self.proj(x)
        e = Tensor(np.zeros((batch.num_directed_edges, d)))
        v = Tensor(np.zeros((batch.num_graphs, d)))
        states = [h] if keep_states else None
        for i, conv in enumerate(self.convs):
            h, e = conv(h, e, batch)
            if self.vns:
                h, v = self.vns[i](h, v, batch)
            if keep_states:
                states.append(h)
        graph_state = v if self.vns else ad.segment_sum(h, batch.node_graph)
        return h, graph_state, states

    def heads(self, h: Tensor, graph_state: Tensor) -> tuple[Tensor, Tensor]:
        if self.cfg.independent_heads:
            node = ad.concat([self.node_heads[n](h) for n, _ in NODE_FAMILIES], axis=1)
            graph = ad.concat([self.graph_heads[n](graph_state) for n, _ in GRAPH_FAMILIES],
                              axis=1)
            return node, graph
        return self.node_heads["shared"](h), self.graph_heads["shared"](graph_state)

    def forward(self, batch: GraphBatch, x: Tensor):
        h, gs, _ = self.trunk(batch, x)
        node, graph = self.heads(h, gs)
        return node, graph, h

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.named_parameters()
        if set(params) != set(state):
            raise CheckpointError("parameter names differ from the model layout")
        for k, p in params.items():
            if p.data.shape != state[k].shape:
                raise CheckpointError(f"shape mismatch for {k}: {state[k].shape} vs {p.data.shape}")
            p.data[...] = state[k]


def init_model(cfg: GPSEConfig, seed: int | None = None) -> GPSEModel:
    return GPSEModel(cfg, seed)


# ------------------------------------------------------------ features


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def random_features(g: Graph, k: int, seed: int) -> np.ndarray:
    return gaussian_matrix(g.num_nodes, k, seed)


def _features_for(graphs: Sequence[Graph], k: int, seeds: Sequence[int]) -> Tensor:
    if not graphs:
        return Tensor(np.zeros((0, k)))
    return Tensor(np.concatenate([random_features(g, k, s) for g, s in zip(graphs, seeds)]))


def encode_with_features(model: GPSEModel, g: Graph, x: np.ndarray) -> np.ndarray:
    """Final node states (pre-head) for explicit input features."""
    h, _, _ = model.trunk(make_batch([g]), Tensor(x))
    return h.data.copy()


def encode(model: GPSEModel, g: Graph, seed: int, draws: int = 1) -> np.ndarray:
    """n x d encodings; with ``draws > 1`` the mean over independent feature draws."""
    k = model.cfg.rand_feat_dim
    acc = np.zeros((g.num_nodes, model.cfg.hidden_dim))
    for r in range(draws):
        acc += encode_with_features(model, g, random_features(g, k, derive_seed(seed, r)))
    return acc / draws


# ------------------------------------------------------------ training


@dataclass
class RecoveryReport:
    r2: dict[str, float]
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1
    seconds: float = 0.0

    @property
    def overall(self) -> float:
        return float(np.mean([self.r2[n] for n in FAMILY_NAMES]))

    def to_dict(self) -> dict:
        out = {"Overall": self.overall}
        out.update({n: self.r2[n] for n in FAMILY_NAMES})
        out["train_losses"] = list(self.train_losses)
        out["val_losses"] = list(self.val_losses)
        out["best_epoch"] = self.best_epoch
        return out


def graph_target_stats(bundles: Sequence[TargetBundle]) -> tuple[np.ndarray, np.ndarray]:
    """Per-column mean and population std of graph-level targets (std floor -> 1)."""
    y = np.stack([b.graph_targets for b in bundles])
    mean = y.mean(axis=0)
    std = y.std(axis=0)
    std[std < 1e-12] = 1.0
    return mean, std


def _batch_targets(model: GPSEModel, bundles: Sequence[TargetBundle]):
    node = np.concatenate([b.node_targets for b in bundles])
    graph = np.stack([b.graph_targets for b in bundles])
    return node, (graph - model.graph_mean) / model.graph_std


def _loss_on(model, graphs, bundles, seeds):
    batch = make_batch(list(graphs))
    x = _features_for(graphs, model.cfg.rand_feat_dim, seeds)
    node_pred, graph_pred, _ = model.forward(batch, x)
    node_t, graph_t = _batch_targets(model, bundles)
    return l1_cosine_loss(node_pred, node_t, graph_pred, graph_t, batch.node_graph, GRAPH_BLOCKS)


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def evaluate_loss(model: GPSEModel, graphs, bundles, seed: int, batch_size: int = 64) -> float:
    total, count = 0.0, 0
    idx = list(range(len(graphs)))
    for chunk in _chunks(idx, batch_size):
        gs = [graphs[i] for i in chunk]
        loss = _loss_on(model, gs, [bundles[i] for i in chunk],
                        [derive_seed(seed, i) for i in chunk])
        total += float(loss.data) * len(chunk)
        count += len(chunk)
    return total / max(count, 1)


def predict(model: GPSEModel, graphs: Sequence[Graph], seed: int, batch_size: int = 64):
    """Node and normalised graph-level predictions for every graph, in order."""
    node_out, graph_out = [], []
    for chunk in _chunks(list(range(len(graphs))), batch_size):
        gs = [graphs[i] for i in chunk]
        batch = make_batch(gs)
        x = _features_for(gs, model.cfg.rand_feat_dim, [derive_seed(seed, i) for i in chunk])
        node_pred, graph_pred, _ = model.forward(batch, x)
        node_out.extend(np.split(node_pred.data, np.cumsum(batch.sizes)[:-1]))
        graph_out.extend(graph_pred.data)
    return node_out, graph_out


def recovery_from_predictions(node_preds, node_targets, graph_preds, graph_targets) -> dict:
    """R^2 per family, pooled over every held-out value of the family."""
    node_p = np.concatenate(node_preds)
    node_t = np.concatenate(node_targets)
    graph_p = np.stack(graph_preds)
    graph_t = np.stack(graph_targets)
    r2 = {}
    for name, sl in NODE_BLOCKS.items():
        r2[name] = r2_score(node_t[:, sl], node_p[:, sl])
    for name, sl in GRAPH_BLOCKS.items():
        r2[name] = r2_score(graph_t[:, sl], graph_p[:, sl])
    return r2


def evaluate_recovery(model: GPSEModel, graphs: Sequence[Graph],
                      bundles: Sequence[TargetBundle], seed: int = 0) -> RecoveryReport:
    if not graphs:
        raise ConfigError("cannot evaluate on an empty split")
    node_p, graph_p = predict(model, graphs, seed)
    node_t = [b.node_targets for b in bundles]
    graph_t = [(b.graph_targets - model.graph_mean) / model.graph_std for b in bundles]
    return RecoveryReport(recovery_from_predictions(node_p, node_t, graph_p, graph_t))


def train(corpus: GraphCorpus, cfg: GPSEConfig, targets: Sequence[TargetBundle] | None = None,
          callback: Callable[[int, float, float], None] | None = None
          ) -> tuple[GPSEModel, RecoveryReport]:
    """Fit a model on the train split; return the best-validation checkpoint.

    ``targets`` may pass precomputed normalised bundles aligned with
    ``corpus.graphs``. The report holds test-split R^2 when a test split
    exists, otherwise validation R^2.
    """
    t0 = time.perf_counter()
    cfg.validate()
    tr_idx = corpus.split_indices("train")
    va_idx = corpus.split_indices("val")
    te_idx = corpus.split_indices("test")
    if not tr_idx or not va_idx:
        raise ConfigError("train and validation splits must be non-empty")
    bundles = list(targets) if targets is not None else compute_corpus_targets(corpus.graphs)
    if len(bundles) != len(corpus):
        raise ConfigError("target list does not align with the corpus")
    graphs = corpus.graphs

    model = init_model(cfg)
    model.graph_mean, model.graph_std = graph_target_stats([bundles[i] for i in tr_idx])
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(derive_seed(cfg.seed, 1))
    steps_per_epoch = math.ceil(len(tr_idx) / cfg.batch_size)
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    val_graphs = [graphs[i] for i in va_idx]
    val_bundles = [bundles[i] for i in va_idx]
    val_seed = derive_seed(cfg.seed, 2)

    best_val, best_state, best_epoch = math.inf, model.state_dict(), -1
    train_losses, val_losses = [], []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(tr_idx)
        feat_epoch = epoch if cfg.resample_features_each_epoch else 0
        running, seen = 0.0, 0
        for chunk in _chunks(order.tolist(), cfg.batch_size):
            gs = [graphs[i] for i in chunk]
            seeds = [derive_seed(cfg.seed, 3, feat_epoch, i) for i in chunk]
            loss = _loss_on(model, gs, [bundles[i] for i in chunk], seeds)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            gnorm = clip_grad_norm(params, cfg.grad_clip)
            if not math.isfinite(gnorm):
                raise TrainingError(f"non-finite gradient norm at epoch {epoch}, step {step}")
            opt.step(warmup_cosine(step, total_steps, cfg.lr, cfg.warmup_frac))
            step += 1
            running += value * len(chunk)
            seen += len(chunk)
        train_losses.append(running / seen)
        val = evaluate_loss(model, val_graphs, val_bundles, val_seed)
        val_losses.append(val)
        if val < best_val:
            best_val, best_state, best_epoch = val, model.state_dict(), epoch
        log.info("epoch %d train %.5f val %.5f", epoch, train_losses[-1], val)
        if callback is not None:
            callback(epoch, train_losses[-1], val)
    model.load_state_dict(best_state)

    eval_idx = te_idx or va_idx
    report = evaluate_recovery(model, [graphs[i] for i in eval_idx],
                               [bundles[i] for i in eval_idx], seed=derive_seed(cfg.seed, 4))
    report.train_losses, report.val_losses = train_losses, val_losses
    report.best_epoch = best_epoch
    report.seconds = time.perf_counter() - t0
    return model, report


# ------------------------------------------------------------ persistence


def save_checkpoint(model: GPSEModel, path: str | Path) -> None:
    state = model.state_dict()
    names = sorted(state)
    header = {
        "config": model.cfg.to_dict(),
        "tensors": [{"name": n, "shape": list(state[n].shape)} for n in names],
        "graph_mean": [float(x) for x in model.graph_mean],
        "graph_std": [float(x) for x in model.graph_std],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(raw)))
        fh.write(raw)
        for n in names:
            fh.write(np.ascontiguousarray(state[n], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> GPSEModel:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a GPSE checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(data) < 16 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    cfg = GPSEConfig.from_dict(header["config"])
    model = GPSEModel(cfg)
    offset = 16 + hlen
    state = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated payload at tensor {spec['name']}")
        state[spec["name"]] = np.frombuffer(data[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    model.load_state_dict(state)
    model.graph_mean = np.array(header["graph_mean"], dtype=np.float64)
    model.graph_std = np.array(header["graph_std"], dtype=np.float64)
    return model


def _encode_job(args):
    model, g, seed, draws = args
    return encode(model, g, seed, draws)


def encode_corpus(model: GPSEModel, graphs: Sequence[Graph], seed: int, draws: int = 1,
                  jobs: int = 1) -> list[np.ndarray]:
    """Encodings of every graph; graph ``i`` uses the feature seed derived from
    (seed, i), so results do not depend on ``jobs``."""
    work = [(model, g, derive_seed(seed, i), draws) for i, g in enumerate(graphs)]
    if jobs <= 1 or len(work) < 2:
        return [_encode_job(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_encode_job, work, chunksize=max(1, len(work) // (4 * jobs))))


def export_encodings(model: GPSEModel, graphs: Sequence[Graph], path: str | Path, seed: int,
                     fmt: str = "bin", draws: int = 1, jobs: int = 1) -> None:
    """Write per-node encodings (binary or CSV) for every graph."""
    encs = encode_corpus(model, graphs, seed, draws, jobs)
    d = model.cfg.hidden_dim
    if fmt == "bin":
        buf = io.BytesIO()
        buf.write(ENC_MAGIC)
        buf.write(struct.pack("<III", ENC_VERSION, len(graphs), d))
        for g, enc in zip(graphs, encs):
            gid = g.id.encode("utf-8")
            buf.write(struct.pack("<I", len(gid)))
            buf.write(gid)
            buf.write(struct.pack("<I", g.num_nodes))
            buf.write(np.ascontiguousarray(enc, dtype="<f4").tobytes())
        Path(path).write_bytes(buf.getvalue())
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["graph_id", "node_id", *(f"e_{j + 1}" for j in range(d))])
            for g, enc in zip(graphs, encs):
                for v in range(g.num_nodes):
                    w.writerow([g.id, v, *(repr(float(x)) for x in enc[v].astype(np.float32))])
    else:
        raise ValueError(f"unknown encoding format {fmt!r}")


def read_encodings(path: str | Path) -> list[tuple[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != ENC_MAGIC:
        raise CheckpointError(f"{path}: not an encoding file")
    version, count, d = struct.unpack("<III", data[8:20])
    if version != ENC_VERSION:
        raise CheckpointError(f"{path}: unsupported encoding version {version}")
    off, out = 20, []
    for _ in range(count):
        (ln,) = struct.unpack("<I", data[off:off + 4])
        gid = data[off + 4:off + 4 + ln].decode("utf-8")
        off += 4 + ln
        (n,) = struct.unpack("<I", data[off:off + 4])
        off += 4
        arr = np.frombuffer(data[off:off + 4 * n * d], dtype="<f4").reshape(n, d)
        off += 4 * n * d
        out.append((gid, arr.copy()))
    return out
