"""Flight-line layer records: file I/O, filtering, splitting, feature condensing,
normalisation and a synthetic generator.

Dataset files are JSON Lines. The first line is a header::

    {"schema": "icestack/v1", "n_nodes": 256, "n_layers": 20}

and every following line is one record::

    {"id": str, "lat_deg": [n_nodes], "lon_deg": [n_nodes], "thickness_px": [[n_nodes] x n_layers]}

Thickness row 0 is the shallowest (newest) layer. ``-1.0`` marks a missing value.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geodesy import WeightedGraph, pairwise_weights

SCHEMA = "icestack/v1"
N_NODES = 256
N_LAYERS = 20
N_IN = 5
N_OUT = 15
GAP = -1.0


class DatasetError(ValueError):
    """Malformed, mis-shaped or invalid dataset content."""


class ParseError(DatasetError):
    pass


class ShapeError(DatasetError):
    pass


class ValidationError(DatasetError):
    pass


@dataclass(frozen=True, eq=False)
class LayerSequence:
    """One flight line. Coordinates are kept in degrees (as on disk); ``lat``/``lon`` give radians."""

    id: str
    lat_deg: np.ndarray
    lon_deg: np.ndarray
    thickness: np.ndarray  # (n_layers, n_nodes)

    def __post_init__(self):
        for name in ("lat_deg", "lon_deg", "thickness"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_nodes(self) -> int:
        return self.thickness.shape[1]

    @cached_property
    def lat(self) -> np.ndarray:
        return np.deg2rad(self.lat_deg)

    @cached_property
    def lon(self) -> np.ndarray:
        return np.deg2rad(self.lon_deg)

    @property
    def is_complete(self) -> bool:
        t = self.thickness
        return bool(np.all(np.isfinite(t)) and np.all(t >= 0.0))

    def graph(self, edge_formula: str = "as-written") -> WeightedGraph:
        return WeightedGraph(pairwise_weights(self.lat, self.lon, edge_formula))


def _check_record(rec: LayerSequence, n_nodes: int, n_layers: int) -> None:
    if rec.thickness.ndim != 2 or rec.thickness.shape[0] != n_layers:
        raise ShapeError(f"record {rec.id!r}: expected {n_layers} layers, got shape {rec.thickness.shape}")
    if rec.thickness.shape[1] != n_nodes:
        raise ShapeError(f"record {rec.id!r}: expected {n_nodes} columns, got {rec.thickness.shape[1]}")
    if rec.lat_deg.shape != (n_nodes,) or rec.lon_deg.shape != (n_nodes,):
        raise ShapeError(f"record {rec.id!r}: lat/lon must have {n_nodes} entries")
    if not (np.all(np.isfinite(rec.lat_deg)) and np.all(np.isfinite(rec.lon_deg))):
        raise ValidationError(f"record {rec.id!r}: non-finite coordinates")
    if np.any(np.abs(rec.lat_deg) > 90.0) or np.any(np.abs(rec.lon_deg) > 180.0):
        raise ValidationError(f"record {rec.id!r}: coordinates out of range")
    t = rec.thickness
    bad = np.isnan(t) | np.isinf(t) | ((t < 0.0) & (t != GAP))
    if np.any(bad):
        layer, col = map(int, np.argwhere(bad)[0])
        raise ValidationError(
            f"record {rec.id!r}: invalid thickness {t[layer, col]} at layer {layer}, column {col}"
        )


def header(n_nodes: int = N_NODES, n_layers: int = N_LAYERS) -> dict:
    return {"schema": SCHEMA, "n_nodes": n_nodes, "n_layers": n_layers}


def load_dataset(path, n_nodes: int | None = None) -> list[LayerSequence]:
    """Read and validate a dataset file.

    ``n_nodes`` defaults to whatever the header declares; pass it to insist on a size.
    """
    path = Path(path)
    records = []
    with path.open(encoding="utf-8") as fh:
        lines = iter(enumerate(fh, start=1))
        try:
            _, first = next(lines)
        except StopIteration:
            raise ParseError(f"{path}: empty file, missing header line") from None
        try:
            meta = json.loads(first)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:1: malformed header: {exc}") from None
        if not isinstance(meta, dict) or meta.get("schema") != SCHEMA:
            raise ParseError(f"{path}:1: expected header with schema {SCHEMA!r}")
        declared_nodes = meta.get("n_nodes")
        if meta.get("n_layers") != N_LAYERS:
            raise ShapeError(f"{path}: header declares n_layers={meta.get('n_layers')}, expected {N_LAYERS}")
        if n_nodes is not None and declared_nodes != n_nodes:
            raise ShapeError(f"{path}: header declares n_nodes={declared_nodes}, expected {n_nodes}")
        if not isinstance(declared_nodes, int) or declared_nodes < 1:
            raise ShapeError(f"{path}: bad n_nodes {declared_nodes!r} in header")
        for lineno, line in lines:
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rec = LayerSequence(
                    id=str(obj["id"]),
                    lat_deg=obj["lat_deg"],
                    lon_deg=obj["lon_deg"],
                    thickness=obj["thickness_px"],
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"{path}:{lineno}: malformed record: {exc!r}") from None
            except ValueError as exc:
                # ragged nested lists
                raise ShapeError(f"{path}:{lineno}: {exc}") from None
            _check_record(rec, declared_nodes, N_LAYERS)
            records.append(rec)
    return records


def _record_line(rec: LayerSequence) -> str:
    obj = {
        "id": rec.id,
        "lat_deg": rec.lat_deg.tolist(),
        "lon_deg": rec.lon_deg.tolist(),
        "thickness_px": rec.thickness.tolist(),
    }
    return json.dumps(obj, separators=(",", ":"))


def save_dataset(records: Sequence[LayerSequence], path) -> None:
    if not records:
        n_nodes = N_NODES
    else:
        n_nodes = records[0].n_nodes
    for rec in records:
        _check_record(rec, n_nodes, N_LAYERS)
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header(n_nodes), separators=(",", ":")) + "\n")
        for rec in records:
            fh.write(_record_line(rec) + "\n")


def filter_valid(records: Iterable[LayerSequence]) -> list[LayerSequence]:
    """Keep records whose layers are all finite and gap-free."""
    return [r for r in records if r.is_complete]


@dataclass(frozen=True)
class SplitSpec:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    seed: int

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def split(records: Sequence, seed: int) -> SplitSpec:
    """Seeded shuffle then a 3:1:1 partition; val and test get floor(n/5) each."""
    n = len(records)
    if n < 5:
        raise ValueError(f"need at least 5 records to split 3:1:1, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    k = n // 5
    n_train = n - 2 * k
    return SplitSpec(
        train=tuple(int(i) for i in order[:n_train]),
        val=tuple(int(i) for i in order[n_train:n_train + k]),
        test=tuple(int(i) for i in order[n_train + k:]),
        seed=seed,
    )


def condense_spatial(record: LayerSequence, n_in: int = N_IN) -> np.ndarray:
    """(n_nodes, 2 + n_in): latitude, longitude (radians), then the input-layer thicknesses."""
    return np.column_stack([record.lat, record.lon, record.thickness[:n_in].T])


def temporal_features(record: LayerSequence, n_in: int = N_IN) -> np.ndarray:
    """(n_in, n_nodes, 1) thickness sequence without coordinates."""
    return record.thickness[:n_in, :, None].copy()


def targets(record: LayerSequence, n_in: int = N_IN, n_out: int = N_OUT) -> np.ndarray:
    """(n_nodes, n_out); column k is layer row n_in + k."""
    return record.thickness[n_in:n_in + n_out].T.copy()


@dataclass
class Normalizer:
    """Per-channel z-scores fit on training records.

    Channels: latitude, longitude, and one channel per thickness layer. A channel
    with zero spread passes through unchanged.
    """

    lat_mean: float
    lat_std: float
    lon_mean: float
    lon_std: float
    thick_mean: np.ndarray  # (n_layers,)
    thick_std: np.ndarray

    @staticmethod
    def _safe(std):
        return np.where(std > 0, std, 1.0)

    def _geo(self):
        m = np.array([self.lat_mean, self.lon_mean])
        s = self._safe(np.array([self.lat_std, self.lon_std]))
        return m, s

    def apply_thickness(self, x: np.ndarray, layers: slice | Sequence[int], axis: int = 0) -> np.ndarray:
        """Normalise thickness values; ``layers`` names the layer rows laid out along ``axis``."""
        m = self.thick_mean[layers]
        s = self._safe(self.thick_std[layers])
        shape = [1] * x.ndim
        shape[axis] = -1
        return (x - m.reshape(shape)) / s.reshape(shape)

    def invert_thickness(self, z: np.ndarray, layers, axis: int = 0) -> np.ndarray:
        m = self.thick_mean[layers]
        s = self._safe(self.thick_std[layers])
        shape = [1] * z.ndim
        shape[axis] = -1
        return z * s.reshape(shape) + m.reshape(shape)

    def apply(self, record: LayerSequence) -> dict:
        """Normalised copies of the record's channels: ``lat``, ``lon`` and ``thickness``."""
        m, s = self._geo()
        return {
            "lat": (record.lat - m[0]) / s[0],
            "lon": (record.lon - m[1]) / s[1],
            "thickness": self.apply_thickness(record.thickness, slice(None), axis=0),
        }

    def invert(self, channels: dict) -> dict:
        m, s = self._geo()
        return {
            "lat": channels["lat"] * s[0] + m[0],
            "lon": channels["lon"] * s[1] + m[1],
            "thickness": self.invert_thickness(channels["thickness"], slice(None), axis=0),
        }

    def to_dict(self) -> dict:
        return {
            "lat_mean": self.lat_mean,
            "lat_std": self.lat_std,
            "lon_mean": self.lon_mean,
            "lon_std": self.lon_std,
            "thick_mean": self.thick_mean.tolist(),
            "thick_std": self.thick_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(
            lat_mean=float(d["lat_mean"]),
            lat_std=float(d["lat_std"]),
            lon_mean=float(d["lon_mean"]),
            lon_std=float(d["lon_std"]),
            thick_mean=np.array(d["thick_mean"], dtype=np.float64),
            thick_std=np.array(d["thick_std"], dtype=np.float64),
        )


def fit_normalizer(train_records: Sequence[LayerSequence]) -> Normalizer:
    if not train_records:
        raise ValueError("cannot fit a normalizer on an empty training set")
    lat = np.concatenate([r.lat for r in train_records])
    lon = np.concatenate([r.lon for r in train_records])
    thick = np.concatenate([r.thickness for r in train_records], axis=1)
    norm = Normalizer(
        lat_mean=float(lat.mean()),
        lat_std=float(lat.std()),
        lon_mean=float(lon.mean()),
        lon_std=float(lon.std()),
        thick_mean=thick.mean(axis=1),
        thick_std=thick.std(axis=1),
    )
    flat = [norm.lat_std, norm.lon_std, *norm.thick_std]
    if any(s == 0 for s in flat):
        warnings.warn("zero-variance channel(s) left unnormalised", RuntimeWarning, stacklevel=2)
    return norm


@dataclass(frozen=True, eq=False)
class GraphSample:
    """Model-ready tensors for one record, normalised when built with a Normalizer."""

    id: str
    graph: WeightedGraph
    spatial_features: np.ndarray  # (N, 2 + n_in)
    temporal_features: np.ndarray  # (n_in, N, 1)
    node_features: np.ndarray  # (n_in, N, 3): lat, lon, thickness_t for the fused models
    targets: np.ndarray  # (N, n_out)

    @property
    def n_nodes(self) -> int:
        return self.targets.shape[0]


def make_sample(record: LayerSequence, normalizer: Normalizer | None = None, *, n_in: int = N_IN,
                n_out: int = N_OUT, edge_formula: str = "as-written") -> GraphSample:
    if normalizer is None:
        lat, lon, thick = record.lat, record.lon, record.thickness
    else:
        ch = normalizer.apply(record)
        lat, lon, thick = ch["lat"], ch["lon"], ch["thickness"]
    n = record.n_nodes
    spatial = np.column_stack([lat, lon, thick[:n_in].T])
    temporal = thick[:n_in, :, None].copy()
    geo = np.broadcast_to(np.stack([lat, lon], axis=1), (n_in, n, 2))
    node = np.concatenate([geo, temporal], axis=2)
    return GraphSample(
        id=record.id,
        graph=record.graph(edge_formula),
        spatial_features=spatial,
        temporal_features=temporal,
        node_features=node,
        targets=thick[n_in:n_in + n_out].T.copy(),
    )


@dataclass
class SynthParams:
    """Knobs for :func:`generate_synthetic`.

    ``layer_means`` are the configured per-layer base thicknesses (pixels). Each
    record scales all of them by one factor drawn from ``scale_range``, so the
    shallow layers reveal how thick the deep ones are. ``noise`` is the Gaussian
    noise std as a fraction of each layer's base thickness.
    """

    n_nodes: int = N_NODES
    n_layers: int = N_LAYERS
    layer_means: tuple[float, ...] = field(
        default_factory=lambda: tuple(float(v) for v in np.linspace(12.0, 5.0, N_LAYERS))
    )
    scale_range: tuple[float, float] = (0.6, 1.4)
    amplitude_range: tuple[float, float] = (0.05, 0.3)
    amplitude_decay: float = 0.97
    freq_range: tuple[float, float] = (0.5, 3.0)
    noise: float = 0.05
    lat_range: tuple[float, float] = (60.0, 83.0)
    lon_range: tuple[float, float] = (-70.0, -20.0)
    step_deg: float = 0.02


def _record_family(rng: np.random.Generator, params: SynthParams) -> dict:
    """Per-record latent draws; everything but the noise."""
    return {
        "scale": rng.uniform(*params.scale_range),
        "amplitude": rng.uniform(*params.amplitude_range),
        "freq": rng.uniform(*params.freq_range),
        "phase": rng.uniform(0.0, 2 * math.pi),
    }


def noiseless_thickness(fam: dict, params: SynthParams) -> np.ndarray:
    base = fam["scale"] * np.asarray(params.layer_means, dtype=np.float64)
    amp = fam["amplitude"] * params.amplitude_decay ** np.arange(params.n_layers)
    i = np.arange(params.n_nodes)
    wave = np.sin(2 * math.pi * i / params.n_nodes * fam["freq"] + fam["phase"])
    return base[:, None] * (1.0 + amp[:, None] * wave[None, :])


def _flight_path(rng: np.random.Generator, params: SynthParams) -> tuple[np.ndarray, np.ndarray]:
    lat0 = rng.uniform(params.lat_range[0] + 1.0, params.lat_range[1] - 1.0)
    lon0 = rng.uniform(params.lon_range[0] + 1.0, params.lon_range[1] - 1.0)
    heading = rng.uniform(0.0, 2 * math.pi)
    # heading wanders slowly so the path stays smooth
    turn = np.cumsum(rng.normal(0.0, 0.02, params.n_nodes))
    ang = heading + turn
    steps = params.step_deg * (1.0 + 0.1 * rng.standard_normal(params.n_nodes)).clip(0.5, 1.5)
    lat = lat0 + np.cumsum(steps * np.cos(ang))
    lon = lon0 + np.cumsum(steps * np.sin(ang) / np.cos(np.deg2rad(lat)))
    return np.clip(lat, *params.lat_range), np.clip(lon, *params.lon_range)


def generate_synthetic(n: int, seed: int, params: SynthParams | None = None) -> list[LayerSequence]:
    if n < 1:
        raise ValueError("n must be >= 1")
    params = params or SynthParams()
    if len(params.layer_means) != params.n_layers:
        raise ValueError("layer_means must have one entry per layer")
    records = []
    for k, child in enumerate(np.random.SeedSequence(seed).spawn(n)):
        rng = np.random.default_rng(child)
        lat, lon = _flight_path(rng, params)
        fam = _record_family(rng, params)
        clean = noiseless_thickness(fam, params)
        base = fam["scale"] * np.asarray(params.layer_means)
        eps = rng.standard_normal(clean.shape) * (params.noise * base)[:, None]
        thick = np.maximum(clean + eps, 0.0)
        records.append(LayerSequence(id=f"syn-{seed}-{k:05d}", lat_deg=lat, lon_deg=lon, thickness=thick))
    return records
