"""Latitude-weighted forecast scores and regional masks.

Fields are ``[N, K, H, W]`` (times, quantities) or ``[K, H, W]`` for a single
time; every score returns one value per quantity. Inputs are expected in
physical (denormalized) units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .grid import GridSpec, latitude_weights

ACC_FORMULA = ("ACC = sum a(h) (y-C)(u-C) / sqrt(sum a(h) (y-C)^2 * sum a(h) (u-C)^2), "
               "C = per-pixel time mean of y over the evaluation window")


def _as_series(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"{name} must be [N, K, H, W] or [K, H, W], got {x.shape}")
    return x


def _weights(grid: GridSpec, mask) -> np.ndarray:
    w = np.broadcast_to(latitude_weights(grid)[:, None], grid.shape).copy()
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != grid.shape:
            raise ValueError(f"mask shape {mask.shape} != grid {grid.shape}")
        if not mask.any():
            raise ValueError("empty region mask")
        w = np.where(mask, w, 0.0)
    return w


def _check_pair(y, u, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    y, u = _as_series(y, "y"), _as_series(u, "u")
    if y.shape != u.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {u.shape}")
    if y.shape[-2:] != grid.shape:
        raise ValueError(f"fields {y.shape[-2:]} do not match grid {grid.shape}")
    return y, u


def lat_rmse(y, u, grid: GridSpec, mask=None) -> np.ndarray:
    """Time mean of the latitude-weighted spatial RMSE.

    With a mask the weights are renormalised over the masked pixels; without
    one this is ``sqrt(mean_hw a(h) e^2)`` since the weights average to 1.
    """
    y, u = _check_pair(y, u, grid)
    w = _weights(grid, mask)
    mse = np.einsum("hw,nkhw->nk", w, (y - u) ** 2) / w.sum()
    return np.sqrt(mse).mean(axis=0)


def acc(y, u, grid: GridSpec, mask=None) -> np.ndarray:
    """Latitude-weighted anomaly correlation about the per-pixel time mean of ``y``."""
    y, u = _check_pair(y, u, grid)
    if y.shape[0] < 2:
        raise ValueError("ACC needs at least 2 time steps")
    w = _weights(grid, mask)
    clim = y.mean(axis=0, keepdims=True)
    ya, ua = y - clim, u - clim
    num = np.einsum("hw,nkhw->k", w, ya * ua)
    vy = np.einsum("hw,nkhw->k", w, ya * ya)
    vu = np.einsum("hw,nkhw->k", w, ua * ua)
    scale = np.einsum("hw,nkhw->k", w, y * y) + 1.0
    if np.any(vy <= 1e-28 * scale) or np.any(vu <= 1e-28 * scale):
        raise ValueError("ACC undefined: zero anomaly variance in truth or forecast")
    return num / np.sqrt(vy * vu)


def crps_gaussian(y, mu, sigma, grid: GridSpec, mask=None) -> np.ndarray:
    """Closed-form CRPS of ``N(mu, sigma^2)`` against ``y``, latitude-weighted mean."""
    y = _as_series(y, "y")
    mu = _as_series(mu, "mu")
    sigma = _as_series(np.broadcast_to(sigma, mu.shape), "sigma")
    if not (y.shape == mu.shape == sigma.shape):
        raise ValueError(f"shape mismatch: {y.shape}, {mu.shape}, {sigma.shape}")
    if np.any(~(sigma > 0)):
        raise ValueError("sigma must be positive")
    w = _weights(grid, mask)
    return np.einsum("hw,nkhw->k", w, crps_pointwise(y, mu, sigma)) / (w.sum() * y.shape[0])


def crps_point(y, x, grid: GridSpec, mask=None) -> np.ndarray:
    """CRPS of a deterministic forecast ``x``: the latitude-weighted absolute error."""
    y, x = _check_pair(y, x, grid)
    w = _weights(grid, mask)
    return np.einsum("hw,nkhw->k", w, np.abs(y - x)) / (w.sum() * y.shape[0])


def crps_pointwise(y, mu, sigma) -> np.ndarray:
    z = (np.asarray(y) - mu) / sigma
    return sigma * (z * (2.0 * norm.cdf(z) - 1.0) + 2.0 * norm.pdf(z) - 1.0 / np.sqrt(np.pi))


@dataclass(frozen=True)
class Region:
    """Latitude/longitude bounding box in degrees; ``lon0 > lon1`` wraps the dateline."""

    name: str
    lat0: float
    lat1: float
    lon0: float
    lon1: float

    def __post_init__(self):
        if self.lat0 > self.lat1:
            raise ValueError(f"region {self.name}: lat0 > lat1")

    def mask(self, grid: GridSpec) -> np.ndarray:
        lat = np.asarray(grid.lat_deg)[:, None]
        lon = np.asarray(grid.lon_deg)[None, :]
        in_lat = (lat >= self.lat0) & (lat <= self.lat1)
        if self.lon0 <= self.lon1:
            in_lon = (lon >= self.lon0) & (lon <= self.lon1)
        else:
            in_lon = (lon >= self.lon0) | (lon <= self.lon1)
        m = in_lat & in_lon
        if not m.any():
            raise ValueError(f"region {self.name} contains no grid points")
        return m


def parse_region(text: str) -> Region:
    """Parse ``name:lat0,lat1,lon0,lon1``."""
    try:
        name, box = text.split(":", 1)
        vals = [float(x) for x in box.split(",")]
    except ValueError:
        raise ValueError(f"bad region {text!r}; expected name:lat0,lat1,lon0,lon1") from None
    if len(vals) != 4 or not name:
        raise ValueError(f"bad region {text!r}; expected name:lat0,lat1,lon0,lon1")
    return Region(name, *vals)
