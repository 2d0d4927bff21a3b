"""The multi-branch SAGE + temporal-conv model, the fused GCN-LSTM / SAGE-LSTM
baselines, and checkpoint I/O.

Checkpoints are JSON::

    {"schema": "icestack-checkpoint/v1", "arch": ..., "config": {...}, "seed": int,
     "normalizer": {...} | null,
     "params": {name: {"shape": [...], "dtype": "<f8", "data": base64(little-endian float64)}}}

Parameters are stored as raw bytes so a reload is bit-exact.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import N_IN, N_OUT, GraphSample, Normalizer
from .layers import (
    GcnLayer,
    LinearLayer,
    LstmCell,
    SageLayer,
    TemporalConvBlock,
    gcn_forward,
    linear_forward,
    lstm_step,
    sage_forward,
    temporal_conv_forward,
)

ARCHITECTURES = ("multibranch", "gcn-lstm", "sage-lstm")
CHECKPOINT_SCHEMA = "icestack-checkpoint/v1"
N_SPATIAL = 2 + N_IN
N_NODE_FEATURES = 3  # lat, lon, thickness_t


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    arch: str = "multibranch"
    hidden: int = 64
    kt: int = 3
    n_in: int = N_IN
    n_out: int = N_OUT
    weighted_agg: bool = True
    neighbor_sample_k: int | None = None
    edge_formula: str = "as-written"

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; choose from {ARCHITECTURES}")
        if self.hidden < 2 or self.hidden % 2:
            raise ValueError("hidden width must be an even number >= 2")
        if self.arch == "multibranch" and self.n_in - 2 * (self.kt - 1) != 1:
            raise ValueError(
                f"two temporal blocks with kt={self.kt} cannot collapse {self.n_in} steps to one"
            )


def _head(hidden_in: int, hidden: int, n_out: int, rng) -> list[LinearLayer]:
    return [
        LinearLayer.init(hidden_in, hidden, rng),
        LinearLayer.init(hidden, hidden // 2, rng),
        LinearLayer.init(hidden // 2, n_out, rng),
    ]


def _head_forward(x: Tensor, head: list[LinearLayer]) -> Tensor:
    for k, layer in enumerate(head):
        x = linear_forward(x, layer)
        if k < len(head) - 1:
            x = ad.relu(x)
    return x


class Model:
    config: ModelConfig

    def parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def forward(self, sample: GraphSample) -> Tensor:
        raise NotImplementedError

    def predict(self, sample: GraphSample) -> np.ndarray:
        return self.forward(sample).data

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()


class MultiBranchModel(Model):
    """Spatial branch: two SAGE layers on the condensed (N, 7) features.
    Temporal branch: two gated temporal-conv blocks collapsing T=5 to 1.
    Both give (N, H); the concatenation feeds a three-layer linear head.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        H = config.hidden
        self.config = config
        self.spatial = [SageLayer.init(config.n_in + 2, H, rng), SageLayer.init(H, H, rng)]
        self.temporal = [
            TemporalConvBlock.init(1, H, config.kt, rng),
            TemporalConvBlock.init(H, H, config.kt, rng),
        ]
        self.head = _head(2 * H, H, config.n_out, rng)
        self._sample_rng = np.random.default_rng(int(rng.integers(2**63)))

    def parameters(self):
        out = {}
        for prefix, layers in (("spatial", self.spatial), ("temporal", self.temporal), ("head", self.head)):
            for k, layer in enumerate(layers):
                for name, p in layer.parameters().items():
                    out[f"{prefix}.{k}.{name}"] = p
        return out

    def spatial_branch(self, sample: GraphSample) -> Tensor:
        cfg = self.config
        x = Tensor(sample.spatial_features)
        for k, layer in enumerate(self.spatial):
            x = sage_forward(x, sample.graph, layer, cfg.weighted_agg, cfg.neighbor_sample_k, self._sample_rng)
            if k < len(self.spatial) - 1:
                x = ad.relu(x)
        return x

    def temporal_branch(self, sample: GraphSample) -> Tensor:
        x = Tensor(sample.temporal_features)
        for block in self.temporal:
            x = temporal_conv_forward(x, block)
        return ad.index(x, 0)

    def forward(self, sample):
        z = ad.concat([self.spatial_branch(sample), self.temporal_branch(sample)], axis=1)
        return _head_forward(z, self.head)


class FusedModel(Model):
    """A graph layer applied per time step, feeding an LSTM; the head reads the last hidden state."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        H = config.hidden
        self.config = config
        if config.arch == "gcn-lstm":
            self.graph_layer = GcnLayer.init(N_NODE_FEATURES, H, rng)
        elif config.arch == "sage-lstm":
            self.graph_layer = SageLayer.init(N_NODE_FEATURES, H, rng)
        else:
            raise ValueError(f"FusedModel does not build {config.arch!r}")
        self.cell = LstmCell.init(H, H, rng)
        self.head = _head(H, H, config.n_out, rng)
        self._sample_rng = np.random.default_rng(int(rng.integers(2**63)))

    def parameters(self):
        out = {f"graph.{k}": p for k, p in self.graph_layer.parameters().items()}
        out.update({f"lstm.{k}": p for k, p in self.cell.parameters().items()})
        for k, layer in enumerate(self.head):
            for name, p in layer.parameters().items():
                out[f"head.{k}.{name}"] = p
        return out

    def graph_step(self, x_t: Tensor, sample: GraphSample) -> Tensor:
        cfg = self.config
        if cfg.arch == "gcn-lstm":
            z = gcn_forward(x_t, sample.graph, self.graph_layer)
        else:
            z = sage_forward(x_t, sample.graph, self.graph_layer, cfg.weighted_agg,
                             cfg.neighbor_sample_k, self._sample_rng)
        return ad.relu(z)

    def forward(self, sample):
        feats = sample.node_features
        n = feats.shape[1]
        H = self.config.hidden
        h = Tensor(np.zeros((n, H)))
        c = Tensor(np.zeros((n, H)))
        for t in range(feats.shape[0]):
            z = self.graph_step(Tensor(feats[t]), sample)
            h, c = lstm_step(z, h, c, self.cell)
        return _head_forward(h, self.head)


def build_model(config: ModelConfig, seed: int | np.random.Generator = 0) -> Model:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if config.arch == "multibranch":
        return MultiBranchModel(config, rng)
    return FusedModel(config, rng)


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count for an architecture."""
    H, kt, n_in, n_out = config.hidden, config.kt, config.n_in, config.n_out
    head_in = 2 * H if config.arch == "multibranch" else H
    head = (head_in * H + H) + (H * (H // 2) + H // 2) + ((H // 2) * n_out + n_out)
    if config.arch == "multibranch":
        sage = 2 * H * (n_in + 2) + 2 * H * H
        tcb = 3 * (kt * 1 * H + H) + 3 * (kt * H * H + H)
        return sage + tcb + head
    lstm = 4 * H * H + 4 * H * H + 4 * H
    graph = 2 * N_NODE_FEATURES * H if config.arch == "sage-lstm" else N_NODE_FEATURES * H + H
    return graph + lstm + head


def forward(sample: GraphSample, model: Model) -> Tensor:
    return model.forward(sample)


def multibranch_forward(sample: GraphSample, model: MultiBranchModel) -> Tensor:
    return model.forward(sample)


def fused_forward(sample: GraphSample, model: FusedModel, kind: str | None = None) -> Tensor:
    if kind is not None and kind != model.config.arch:
        raise ValueError(f"model is {model.config.arch!r}, asked for {kind!r}")
    return model.forward(sample)


@dataclass
class ModelCheckpoint:
    model: Model
    normalizer: Normalizer | None
    seed: int
    extra: dict | None = None

    @property
    def arch(self) -> str:
        return self.model.config.arch


def _encode(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "dtype": "<f8", "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode(blob: dict) -> np.ndarray:
    if blob.get("dtype") != "<f8":
        raise CheckpointError(f"unsupported parameter dtype {blob.get('dtype')!r}")
    raw = base64.b64decode(blob["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(blob["shape"])


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    doc = {
        "schema": CHECKPOINT_SCHEMA,
        "arch": ckpt.arch,
        "config": asdict(ckpt.model.config),
        "seed": ckpt.seed,
        "normalizer": ckpt.normalizer.to_dict() if ckpt.normalizer is not None else None,
        "params": {name: _encode(p.data) for name, p in ckpt.model.parameters().items()},
        "extra": ckpt.extra or {},
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")


def load_checkpoint(path, expected_arch: str | None = None) -> ModelCheckpoint:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a JSON checkpoint ({exc})") from None
    if doc.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"{path}: schema {doc.get('schema')!r}, expected {CHECKPOINT_SCHEMA!r}")
    arch = doc.get("arch")
    if expected_arch is not None and arch != expected_arch:
        raise CheckpointError(f"{path}: checkpoint holds {arch!r}, expected {expected_arch!r}")
    config = ModelConfig(**doc["config"])
    if config.arch != arch:
        raise CheckpointError(f"{path}: arch tag {arch!r} disagrees with config {config.arch!r}")
    model = build_model(config, 0)
    params = model.parameters()
    stored = doc["params"]
    if set(stored) != set(params):
        missing = sorted(set(params) - set(stored))
        unexpected = sorted(set(stored) - set(params))
        raise CheckpointError(f"{path}: parameter mismatch for {arch!r}; missing {missing}, unexpected {unexpected}")
    for name, p in params.items():
        arr = _decode(stored[name])
        if arr.shape != p.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, model expects {p.shape}")
        p.data[...] = arr
    norm = Normalizer.from_dict(doc["normalizer"]) if doc.get("normalizer") is not None else None
    return ModelCheckpoint(model=model, normalizer=norm, seed=int(doc["seed"]), extra=doc.get("extra") or {})
