"""Graph Transformer over the unified drug/cell/gene graph.

Each layer runs masked multi-head attention where the scalar edge weight
``w_ij`` enters both keys and values through learned per-head vectors:
``K_j + w_ij * e_k`` and ``V_j + w_ij * e_v``. On the dense N x N layout this is

    logits = (Q K^T + (Q e_k^T) * W) / sqrt(d_k)
    out    = alpha V + rowsum(alpha * W) e_v

which equals the per-edge formulation exactly. The layer output goes through a
linear map, an identity residual when widths match, normalization, activation
and dropout.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .dataset import CLASSIFICATION, REGRESSION, LabeledResponse
from .graph import Features, UnifiedGraph
from .numcore import DivergedError, Tensor

log = logging.getLogger(__name__)

PIC50_MAX = 15.0
BCE_EPS = 1e-7
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """A configuration value is outside its permitted range."""


@dataclass
class ModelConfig:
    hidden: tuple[int, int, int] = (256, 128, 64)
    num_layers: int = 2
    heads: int = 4
    dropout_pre: float = 0.1
    dropout_post: float = 0.1
    dropout_mlp: float = 0.1
    attention_dropout: float = 0.0
    mlp_layers: int = 2
    activation: str = "relu"
    norm: str = "graph"
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 1e-6
    epochs: int = 300
    cosine_schedule: bool = False
    task: str = CLASSIFICATION
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if len(self.hidden) != 3 or min(self.hidden) < 1:
            raise ConfigError("hidden must be three positive widths (h1, h2, h3)")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.heads < 1:
            raise ConfigError("heads must be >= 1")
        for w in self.layer_widths():
            if w % self.heads:
                raise ConfigError(f"layer width {w} is not divisible by heads={self.heads}")
        if self.mlp_layers < 1:
            raise ConfigError("mlp_layers must be >= 1")
        if self.activation not in nc.ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(nc.ACTIVATIONS)}")
        if self.norm not in ("graph", "batch", "layer", "none"):
            raise ConfigError("norm must be graph, batch, layer or none")
        if self.optimizer not in ("adam", "adamw"):
            raise ConfigError("optimizer must be adam or adamw")
        if self.task not in (CLASSIFICATION, REGRESSION):
            raise ConfigError(f"task must be {CLASSIFICATION} or {REGRESSION}")
        for name in ("dropout_pre", "dropout_post", "dropout_mlp", "attention_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1)")
        if self.epochs < 0 or self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("epochs >= 0, lr > 0 and weight_decay >= 0 required")

    def layer_widths(self) -> list[int]:
        h1, h2, h3 = self.hidden
        return ([h1, h2, h3] + [h3] * max(0, self.num_layers - 3))[:self.num_layers]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def check_search_ranges(cfg: ModelConfig) -> None:
    """Raise :class:`ConfigError` naming the first value outside the tuning ranges."""
    h1, h2, h3 = cfg.hidden
    checks = [
        ("hidden.h1", 256 <= h1 <= 512),
        ("hidden.h2", 64 <= h2 <= min(256, h1)),
        ("hidden.h3", 32 <= h3 <= min(128, h2)),
        ("num_layers", cfg.num_layers in (2, 3, 4)),
        ("heads", 2 <= cfg.heads <= 8),
        ("dropout_pre", 0.1 <= cfg.dropout_pre <= 0.5),
        ("dropout_post", 0.1 <= cfg.dropout_post <= 0.5),
        ("dropout_mlp", 0.1 <= cfg.dropout_mlp <= 0.5),
        ("attention_dropout", 0.0 <= cfg.attention_dropout <= 0.4),
        ("mlp_layers", 1 <= cfg.mlp_layers <= 3),
        ("norm", cfg.norm in ("graph", "batch", "layer")),
        ("lr", 1e-5 <= cfg.lr <= 1e-2),
        ("weight_decay", 1e-6 <= cfg.weight_decay <= 1e-2),
        ("epochs", 300 <= cfg.epochs <= 1500 and cfg.epochs % 100 == 0),
    ]
    for key, ok in checks:
        if not ok:
            raise ConfigError(f"{key} is outside the tuning range")


# ------------------------------------------------------------------- model

def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class GTModel:
    """Parameters plus forward/predict for a fixed (n, m, l) graph size."""

    def __init__(self, cfg: ModelConfig, n: int, m: int, l: int):
        self.cfg = cfg
        self.sizes = (n, m, l)
        rng = np.random.default_rng(cfg.seed)
        h1 = cfg.hidden[0]
        p: dict[str, Tensor] = {}

        def param(name, arr):
            p[name] = Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)

        for tag, size in (("drug", n), ("cell", m), ("gene", l)):
            param(f"proj_{tag}.W", _glorot(rng, size, h1))
            param(f"proj_{tag}.b", np.zeros((1, h1)))
        width_in = h1
        for k, width in enumerate(cfg.layer_widths()):
            pre = f"layer{k}."
            for name in ("q", "k", "v"):
                param(pre + f"W{name}", _glorot(rng, width_in, width))
                param(pre + f"b{name}", np.zeros((1, width)))
            dk = width // cfg.heads
            param(pre + "edge_k", rng.normal(0.0, 1.0 / math.sqrt(dk), size=(1, width)))
            param(pre + "edge_v", rng.normal(0.0, 1.0 / math.sqrt(dk), size=(1, width)))
            param(pre + "Wo", _glorot(rng, width, width))
            param(pre + "bo", np.zeros((1, width)))
            if cfg.norm != "none":
                param(pre + "norm_w", np.ones((1, width)))
                param(pre + "norm_b", np.zeros((1, width)))
                if cfg.norm == "graph":
                    param(pre + "norm_alpha", np.ones((1, width)))
            width_in = width
        head_in = 2 * width_in
        for k in range(cfg.mlp_layers):
            out = 1 if k == cfg.mlp_layers - 1 else width_in
            param(f"head{k}.W", _glorot(rng, head_in, out))
            param(f"head{k}.b", np.zeros((1, out)))
            head_in = out
        self.params = p
        self.training = False
        self.rng = np.random.default_rng(cfg.seed + 1)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def train_mode(self, on: bool = True) -> "GTModel":
        self.training = on
        return self

    def eval_mode(self) -> "GTModel":
        return self.train_mode(False)

    # -------------------------------------------------------------- forward

    def project_inputs(self, features: Features) -> Tensor:
        p = self.params
        parts = []
        for tag, S in (("drug", features.drug), ("cell", features.cell), ("gene", features.gene)):
            S = nc.as_tensor(S)
            if S.shape[1] != p[f"proj_{tag}.W"].shape[0]:
                raise nc.ShapeError(f"{tag} features have width {S.shape[1]}, "
                                    f"projection expects {p[f'proj_{tag}.W'].shape[0]}")
            parts.append(S @ p[f"proj_{tag}.W"] + p[f"proj_{tag}.b"])
        return nc.concat(parts, axis=0)

    def gt_layer(self, H: Tensor, graph: UnifiedGraph, k: int) -> tuple[Tensor, np.ndarray]:
        """One layer; returns the new node features and per-head dense attention (heads, N, N)."""
        cfg, p, pre = self.cfg, self.params, f"layer{k}."
        if H.shape[0] != graph.num_nodes:
            raise nc.ShapeError(f"layer input has {H.shape[0]} rows for {graph.num_nodes} nodes")
        W, M = graph.dense()
        Q = H @ p[pre + "Wq"] + p[pre + "bq"]
        K = H @ p[pre + "Wk"] + p[pre + "bk"]
        V = H @ p[pre + "Wv"] + p[pre + "bv"]
        width = Q.shape[1]
        dk = width // cfg.heads
        scale = 1.0 / math.sqrt(dk)
        heads, alphas = [], []
        for h in range(cfg.heads):
            lo, hi = h * dk, (h + 1) * dk
            q, kk, v = nc.slice_cols(Q, lo, hi), nc.slice_cols(K, lo, hi), nc.slice_cols(V, lo, hi)
            ek = nc.slice_cols(p[pre + "edge_k"], lo, hi)
            ev = nc.slice_cols(p[pre + "edge_v"], lo, hi)
            logits = (q @ kk.T + (q @ ek.T) * W) * scale
            alpha = nc.masked_softmax(logits, M)
            alphas.append(alpha.data)
            alpha = nc.dropout(alpha, cfg.attention_dropout, self.rng, self.training)
            heads.append(alpha @ v + nc.tsum(alpha * W, axis=1, keepdims=True) @ ev)
        out = nc.concat(heads, axis=1) @ p[pre + "Wo"] + p[pre + "bo"]
        if H.shape[1] == width:
            out = out + H
        if cfg.norm == "graph":
            out = nc.graph_norm(out, p[pre + "norm_w"], p[pre + "norm_b"], p[pre + "norm_alpha"])
        elif cfg.norm == "batch":
            out = nc.batch_norm(out, p[pre + "norm_w"], p[pre + "norm_b"])
        elif cfg.norm == "layer":
            out = nc.layer_norm(out, p[pre + "norm_w"], p[pre + "norm_b"])
        out = nc.ACTIVATIONS[cfg.activation](out)
        out = nc.dropout(out, cfg.dropout_post, self.rng, self.training)
        return out, np.stack(alphas)

    def forward(self, graph: UnifiedGraph, features: Features) -> tuple[Tensor, list[np.ndarray]]:
        """Final node embeddings and, per layer, attention of shape (heads, num_edges)."""
        if (graph.n, graph.m, graph.l) != self.sizes:
            raise nc.ShapeError(f"graph sizes {(graph.n, graph.m, graph.l)} != model sizes {self.sizes}")
        H = self.project_inputs(features)
        H = nc.dropout(H, self.cfg.dropout_pre, self.rng, self.training)
        per_layer = []
        for k in range(self.cfg.num_layers):
            H, dense_alpha = self.gt_layer(H, graph, k)
            per_layer.append(dense_alpha[:, graph.dst, graph.src])
        return H, per_layer

    def predict(self, Z: Tensor, pairs: np.ndarray) -> Tensor:
        """Sigmoid head on concatenated drug and cell embeddings; regression scaled to [0, 15]."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        n, m, _ = self.sizes
        if len(pairs) and (pairs[:, 0].min() < 0 or pairs[:, 0].max() >= n
                           or pairs[:, 1].min() < 0 or pairs[:, 1].max() >= m):
            raise IndexError("pair index out of range")
        x = nc.concat([nc.take_rows(Z, pairs[:, 0]), nc.take_rows(Z, pairs[:, 1] + n)], axis=1)
        p, cfg = self.params, self.cfg
        for k in range(cfg.mlp_layers):
            x = x @ p[f"head{k}.W"] + p[f"head{k}.b"]
            if k < cfg.mlp_layers - 1:
                x = nc.ACTIVATIONS[cfg.activation](x)
                x = nc.dropout(x, cfg.dropout_mlp, self.rng, self.training)
        y = nc.sigmoid(nc.reshape(x, (len(pairs),)))
        return y * PIC50_MAX if cfg.task == REGRESSION else y

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            raise ValueError("checkpoint parameter names do not match the model")
        for k, v in arrays.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)


# ------------------------------------------------------------------- losses

def bce_loss(y_hat: Tensor, y) -> Tensor:
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise nc.ShapeError(f"loss: prediction shape {y_hat.shape} vs target {y.shape}")
    p = nc.clip(y_hat, BCE_EPS, 1.0 - BCE_EPS)
    ll = y * nc.log(p) + (1.0 - y) * nc.log(1.0 - p)
    return -nc.mean(ll)


def mse_loss(y_hat: Tensor, y) -> Tensor:
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise nc.ShapeError(f"loss: prediction shape {y_hat.shape} vs target {y.shape}")
    diff = y_hat - y
    return nc.mean(diff * diff)


def loss_fn(y_hat: Tensor, y, task: str) -> Tensor:
    return bce_loss(y_hat, y) if task == CLASSIFICATION else mse_loss(y_hat, y)


# ------------------------------------------------------------------ training

@dataclass
class TrainResult:
    model: GTModel
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    status: str = "ok"

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"


def evaluate_loss(model: GTModel, graph: UnifiedGraph, features: Features, labels: LabeledResponse) -> float:
    model.eval_mode()
    Z, _ = model.forward(graph, features)
    return loss_fn(model.predict(Z, labels.pairs), labels.values, model.cfg.task).item()


def predict_pairs(model: GTModel, graph: UnifiedGraph, features: Features, pairs) -> np.ndarray:
    model.eval_mode()
    Z, _ = model.forward(graph, features)
    return model.predict(Z, pairs).data.copy()


def train(model: GTModel, graph: UnifiedGraph, features: Features, labels: LabeledResponse,
          val_labels: LabeledResponse | None = None, epochs: int | None = None,
          on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Full-graph training on ``labels`` pairs; the graph must already exclude test pairs."""
    cfg = model.cfg
    epochs = cfg.epochs if epochs is None else epochs
    opt = nc.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay,
                  decoupled=cfg.optimizer == "adamw")
    result = TrainResult(model)
    if epochs == 0 or len(labels) == 0:
        return result
    targets = labels.values
    for epoch in range(epochs):
        if cfg.cosine_schedule:
            opt.state.lr = nc.cosine_lr(cfg.lr, epoch, epochs)
        model.train_mode()
        opt.zero_grad()
        Z, _ = model.forward(graph, features)
        loss = loss_fn(model.predict(Z, labels.pairs), targets, cfg.task)
        value = loss.item()
        result.train_loss.append(value)
        if not math.isfinite(value):
            result.status = "diverged"
            log.warning("training diverged at epoch %d", epoch)
            break
        loss.backward()
        try:
            opt.step()
        except DivergedError:
            result.status = "diverged"
            log.warning("non-finite gradient at epoch %d", epoch)
            break
        if val_labels is not None and len(val_labels):
            result.val_loss.append(evaluate_loss(model, graph, features, val_labels))
        if on_epoch is not None:
            on_epoch(epoch, value)
    model.eval_mode()
    return result


# ------------------------------------------------------------- random search

@dataclass
class SearchSpace:
    """Tuning ranges; defaults follow the published search space."""

    h1: tuple[int, int] = (256, 512)
    h2_min: int = 64
    h2_cap: int = 256
    h3_min: int = 32
    h3_cap: int = 128
    num_layers: tuple[int, ...] = (2, 3, 4)
    heads: tuple[int, int] = (2, 8)
    dropout: tuple[float, float] = (0.1, 0.5)
    attention_dropout: tuple[float, float] = (0.0, 0.4)
    mlp_layers: tuple[int, int] = (1, 3)
    activations: tuple[str, ...] = ("relu", "gelu")
    optimizers: tuple[str, ...] = ("adam", "adamw")
    norms: tuple[str, ...] = ("graph", "batch", "layer")
    lr: tuple[float, float] = (1e-5, 1e-2)
    weight_decay: tuple[float, float] = (1e-6, 1e-2)
    epochs: tuple[int, int, int] = (300, 1500, 100)

    def sample(self, rng: np.random.Generator, base: ModelConfig) -> ModelConfig:
        heads = int(rng.integers(self.heads[0], self.heads[1] + 1))

        def multiple_in(lo: int, hi: int) -> int:
            lo_m, hi_m = -(-lo // heads), hi // heads
            if hi_m < lo_m:
                raise ConfigError(f"no width in [{lo}, {hi}] divisible by {heads} heads")
            return heads * int(rng.integers(lo_m, hi_m + 1))

        h1 = multiple_in(*self.h1)
        h2 = multiple_in(self.h2_min, min(self.h2_cap, h1))
        h3 = multiple_in(self.h3_min, min(self.h3_cap, h2))

        def log_uniform(lo, hi):
            return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))

        lo_e, hi_e, step = self.epochs
        return replace(
            base,
            hidden=(h1, h2, h3),
            num_layers=int(rng.choice(self.num_layers)),
            heads=heads,
            dropout_pre=float(rng.uniform(*self.dropout)),
            dropout_post=float(rng.uniform(*self.dropout)),
            dropout_mlp=float(rng.uniform(*self.dropout)),
            attention_dropout=float(rng.uniform(*self.attention_dropout)),
            mlp_layers=int(rng.integers(self.mlp_layers[0], self.mlp_layers[1] + 1)),
            activation=str(rng.choice(self.activations)),
            norm=str(rng.choice(self.norms)),
            optimizer=str(rng.choice(self.optimizers)),
            lr=log_uniform(*self.lr),
            weight_decay=log_uniform(*self.weight_decay),
            epochs=int(rng.choice(np.arange(lo_e, hi_e + 1, step))),
            cosine_schedule=bool(rng.integers(0, 2)),
        )


@dataclass
class Trial:
    index: int
    config: ModelConfig
    val_loss: float
    status: str


class AllTrialsDiverged(RuntimeError):
    pass


def random_search(space: SearchSpace, budget: int, objective: Callable[[ModelConfig], float],
                  base: ModelConfig | None = None, seed: int = 0) -> tuple[ModelConfig, list[Trial]]:
    """Sample ``budget`` configs and return the one with the lowest validation loss.

    ``objective`` returns the validation loss or raises :class:`DivergedError`;
    diverged or non-finite trials are excluded. Ties go to the smaller config digest.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    base = base or ModelConfig()
    rng = np.random.default_rng(seed)
    trials = []
    for i in range(budget):
        cfg = space.sample(rng, replace(base, seed=base.seed + i))
        try:
            value = float(objective(cfg))
            status = "ok" if math.isfinite(value) else "diverged"
        except DivergedError:
            value, status = float("nan"), "diverged"
        trials.append(Trial(i, cfg, value, status))
    ok = [t for t in trials if t.status == "ok"]
    if not ok:
        raise AllTrialsDiverged(f"all {budget} trials diverged")
    best = min(ok, key=lambda t: (t.val_loss, t.config.digest()))
    return best.config, trials


# --------------------------------------------------------------- checkpoints

def save_checkpoint(model: GTModel, path: str | Path, extra: dict | None = None) -> None:
    """Zip container: ``meta.json`` plus one ``.npy`` per parameter, fixed timestamps."""
    meta = {"format_version": CHECKPOINT_VERSION, "config": model.cfg.to_dict(),
            "sizes": list(model.sizes), "params": list(model.params), "extra": extra or {}}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        def put(name: str, payload: bytes):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, payload)

        put("meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name, t in model.params.items():
            buf = io.BytesIO()
            np.save(buf, t.data, allow_pickle=False)
            put(f"params/{name}.npy", buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[GTModel, dict]:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
        cfg = ModelConfig.from_dict(meta["config"])
        model = GTModel(cfg, *meta["sizes"])
        arrays = {name: np.load(io.BytesIO(zf.read(f"params/{name}.npy")), allow_pickle=False)
                  for name in meta["params"]}
    model.load_arrays(arrays)
    return model, meta.get("extra", {})
