"""Spatiotemporal feature channels fed to the velocity and emission networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridSpec

DAYS_PER_YEAR = 365.0
TIME_NAMES = ("sin_day", "cos_day", "sin_year", "cos_year")
POSITION_NAMES = ("sin_lat", "cos_lat", "sin_lon", "cos_lon", "sin_lat_cos_lon", "sin_lat_sin_lon")
CONSTANT_NAMES = ("lat_map", "lon_map", "lsm", "oro")


@dataclass(frozen=True)
class FeatureStack:
    values: np.ndarray  # [C, H, W]
    names: tuple[str, ...]
    t: float

    @property
    def C(self) -> int:
        return self.values.shape[0]


def feature_names() -> tuple[str, ...]:
    products = tuple(f"{a}*{b}" for a in TIME_NAMES for b in POSITION_NAMES)
    return TIME_NAMES + POSITION_NAMES + products + CONSTANT_NAMES


N_FEATURES = len(feature_names())  # 4 + 6 + 24 + 4


def time_embedding(t: float) -> np.ndarray:
    """Daily and yearly phases of ``t`` (days)."""
    day = 2.0 * np.pi * t
    year = 2.0 * np.pi * t / DAYS_PER_YEAR
    return np.array([np.sin(day), np.cos(day), np.sin(year), np.cos(year)])


def position_embedding(grid: GridSpec) -> np.ndarray:
    h = np.deg2rad(np.asarray(grid.lat_deg))[:, None]
    w = np.deg2rad(np.asarray(grid.lon_deg))[None, :]
    sh, ch = np.sin(h), np.cos(h)
    sw, cw = np.sin(w), np.cos(w)
    shape = (grid.H, grid.W)
    return np.stack([
        np.broadcast_to(sh, shape),
        np.broadcast_to(ch, shape),
        np.broadcast_to(sw, shape),
        np.broadcast_to(cw, shape),
        sh * cw,
        sh * sw,
    ])


def constant_maps(grid: GridSpec, lsm: np.ndarray, oro: np.ndarray) -> np.ndarray:
    if lsm.shape != grid.shape or oro.shape != grid.shape:
        raise ValueError(f"static fields must have shape {grid.shape}, got {lsm.shape}, {oro.shape}")
    lat = np.asarray(grid.lat_deg)[:, None] / 90.0
    lon = np.asarray(grid.lon_deg)[None, :] / 180.0
    return np.stack([
        np.broadcast_to(lat, grid.shape),
        np.broadcast_to(lon, grid.shape),
        lsm,
        oro,
    ]).astype(float)


def assemble_features(t: float, grid: GridSpec, lsm: np.ndarray, oro: np.ndarray) -> FeatureStack:
    return FeatureBuilder(grid, lsm, oro)(t)


class FeatureBuilder:
    """Caches the time-independent channels; ``builder(t)`` is pure in ``t``."""

    def __init__(self, grid: GridSpec, lsm: np.ndarray, oro: np.ndarray):
        self.grid = grid
        self.position = position_embedding(grid)
        self.constants = constant_maps(grid, np.asarray(lsm, float), np.asarray(oro, float))
        self.names = feature_names()
        self._cache: dict[float, np.ndarray] = {}

    def values(self, t: float) -> np.ndarray:
        t = float(t)
        hit = self._cache.get(t)
        if hit is not None:
            return hit
        te = time_embedding(t)
        H, W = self.grid.shape
        time_maps = np.broadcast_to(te[:, None, None], (4, H, W))
        products = (te[:, None, None, None] * self.position[None]).reshape(24, H, W)
        out = np.concatenate([time_maps, self.position, products, self.constants])
        if len(self._cache) > 4096:
            self._cache.clear()
        self._cache[t] = out
        return out

    def __call__(self, t: float) -> FeatureStack:
        return FeatureStack(self.values(t), self.names, float(t))
