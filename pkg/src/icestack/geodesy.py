"""Haversine-based edge weights and the per-flight-line adjacency matrix."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

W_MAX = 1e6
EDGE_FORMULAS = ("as-written", "standard-haversine")


@dataclass(frozen=True)
class GeoPoint:
    """A location on the unit sphere, angles in radians."""

    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError(f"non-finite coordinate: ({self.lat}, {self.lon})")
        if abs(self.lat) > math.pi / 2:
            raise ValueError(f"latitude {self.lat} outside [-pi/2, pi/2]")
        if not (-math.pi < self.lon <= math.pi):
            raise ValueError(f"longitude {self.lon} outside (-pi, pi]")

    @classmethod
    def from_degrees(cls, lat_deg: float, lon_deg: float) -> "GeoPoint":
        lon = math.radians(lon_deg)
        # 180 deg maps to +pi; -180 wraps onto the same point
        if lon <= -math.pi:
            lon += 2 * math.pi
        return cls(math.radians(lat_deg), lon)


@dataclass(frozen=True, eq=False)
class WeightedGraph:
    """Fully connected undirected graph; ``weights`` is symmetric with a zero diagonal."""

    weights: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.weights.shape[0]

    @cached_property
    def row_normalized(self) -> np.ndarray:
        """Row-stochastic weights used by the weighted neighbour mean."""
        s = self.weights.sum(axis=1, keepdims=True)
        if np.any(s <= 0):
            raise ValueError("weighted mean needs every node to have a positive-weight neighbour")
        return self.weights / s

    @cached_property
    def sym_normalized(self) -> np.ndarray:
        """D^-1/2 (A + I) D^-1/2 with unit self-loops."""
        a = self.weights + np.eye(self.n_nodes)
        d = 1.0 / np.sqrt(a.sum(axis=1))
        return d[:, None] * a * d[None, :]


def haversine(theta: float) -> float:
    if not math.isfinite(theta):
        raise ValueError(f"haversine of non-finite angle {theta}")
    return math.sin(theta / 2.0) ** 2


def _central_term(h, edge_formula):
    if edge_formula == "as-written":
        return 2.0 * np.arcsin(h)
    if edge_formula == "standard-haversine":
        return 2.0 * np.arcsin(np.sqrt(h))
    raise ValueError(f"unknown edge formula {edge_formula!r}; expected one of {EDGE_FORMULAS}")


def edge_weight(p_i: GeoPoint, p_j: GeoPoint, edge_formula: str = "as-written") -> float:
    """Inverse of the (possibly square-root-free) central angle between two points.

    The default follows the published formula literally, without the square root
    that the usual haversine distance takes before ``arcsin``. Coincident points
    are clamped to ``W_MAX``.
    """
    h = haversine(p_j.lat - p_i.lat) + math.cos(p_i.lat) * math.cos(p_j.lat) * haversine(p_j.lon - p_i.lon)
    # rounding can push h a hair past 1 for antipodal points
    assert -1e-12 <= h <= 1.0 + 1e-12, h
    h = min(max(h, 0.0), 1.0)
    denom = float(_central_term(h, edge_formula))
    if denom <= 1.0 / W_MAX:
        return W_MAX
    return min(1.0 / denom, W_MAX)


def pairwise_weights(lat: np.ndarray, lon: np.ndarray, edge_formula: str = "as-written") -> np.ndarray:
    """Vectorised all-pairs version of :func:`edge_weight` (lat/lon in radians)."""
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    dlat = lat[None, :] - lat[:, None]
    dlon = lon[None, :] - lon[:, None]
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlon / 2.0) ** 2
    assert np.all((h >= -1e-12) & (h <= 1.0 + 1e-12))
    h = np.clip(h, 0.0, 1.0)
    # elementwise ops on a symmetric pair give identical values, but force exact symmetry anyway
    h = np.triu(h) + np.triu(h, 1).T
    denom = _central_term(h, edge_formula)
    with np.errstate(divide="ignore"):
        w = np.where(denom <= 1.0 / W_MAX, W_MAX, 1.0 / np.maximum(denom, 1.0 / W_MAX))
    w = np.minimum(w, W_MAX)
    np.fill_diagonal(w, 0.0)
    return w


def build_adjacency(points: Sequence[GeoPoint], n: int = 256, edge_formula: str = "as-written") -> WeightedGraph:
    if len(points) != n:
        raise ValueError(f"expected {n} points, got {len(points)}")
    lat = np.array([p.lat for p in points])
    lon = np.array([p.lon for p in points])
    return WeightedGraph(pairwise_weights(lat, lon, edge_formula))
