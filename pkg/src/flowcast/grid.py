"""Lat-lon grid and finite-difference operators.

Derivatives use unit pixel spacing. Longitude is periodic; latitude is
reflected at the poles (pad row -1 mirrors row 1). A fully periodic
latitude mode exists for conservation tests only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .tensor import Tensor

MAX_ABS_LAT = 88.0
LAT_BOUNDARIES = {"reflect": "circular_x_reflect_y", "periodic": "circular"}


@dataclass(frozen=True)
class GridSpec:
    lat_deg: tuple[float, ...]
    lon_deg: tuple[float, ...]
    lat_boundary: str = "reflect"
    periodic_lon: bool = field(default=True, init=False)

    def __post_init__(self):
        lat = np.asarray(self.lat_deg, dtype=float)
        lon = np.asarray(self.lon_deg, dtype=float)
        if lat.ndim != 1 or lon.ndim != 1 or lat.size == 0 or lon.size == 0:
            raise ValueError("lat_deg and lon_deg must be non-empty 1-D sequences")
        if np.any(np.abs(lat) > MAX_ABS_LAT + 1e-9):
            raise ValueError(f"latitudes must lie within +-{MAX_ABS_LAT} degrees")
        if lat.size > 1 and not (np.all(np.diff(lat) > 0) or np.all(np.diff(lat) < 0)):
            raise ValueError("latitudes must be strictly monotone")
        if lon.size > 1:
            d = np.diff(lon)
            if not np.allclose(d, d[0]) or d[0] <= 0:
                raise ValueError("longitudes must be increasing and equally spaced")
            if lon[0] < -180.0 - 1e-9 or lon[-1] >= 180.0:
                raise ValueError("longitudes must lie in [-180, 180)")
        if self.lat_boundary not in LAT_BOUNDARIES:
            raise ValueError(f"lat_boundary must be one of {sorted(LAT_BOUNDARIES)}")

    @classmethod
    def regular(cls, H: int, W: int, lat_boundary: str = "reflect") -> "GridSpec":
        """Cell-centred latitudes (``180/H`` bands) and longitudes from -180."""
        lat = -90.0 + (np.arange(H) + 0.5) * 180.0 / H
        lon = -180.0 + np.arange(W) * 360.0 / W
        return cls(tuple(lat.tolist()), tuple(lon.tolist()), lat_boundary)

    @property
    def H(self) -> int:
        return len(self.lat_deg)

    @property
    def W(self) -> int:
        return len(self.lon_deg)

    @property
    def shape(self) -> tuple[int, int]:
        return self.H, self.W

    @property
    def pad_mode(self) -> str:
        return LAT_BOUNDARIES[self.lat_boundary]

    @property
    def reflect_lat(self) -> bool:
        return self.lat_boundary == "reflect"

    def to_dict(self) -> dict:
        return {"lat_deg": list(self.lat_deg), "lon_deg": list(self.lon_deg),
                "lat_boundary": self.lat_boundary}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(d["lat_deg"]), tuple(d["lon_deg"]), d.get("lat_boundary", "reflect"))


def spatial_gradient(f, pad_mode: str = "circular_x_reflect_y") -> tuple[Tensor, Tensor]:
    """Central differences ``(df/dx, df/dy)`` over the two trailing axes.

    x runs along longitude (last axis), y along the row index.
    """
    p = tc.sphere_pad(f, 1, 1, pad_mode)
    dfdx = (p[..., 1:-1, 2:] - p[..., 1:-1, :-2]) * 0.5
    dfdy = (p[..., 2:, 1:-1] - p[..., :-2, 1:-1]) * 0.5
    return dfdx, dfdy


def divergence(v, pad_mode: str = "circular_x_reflect_y") -> Tensor:
    """``d(v_x)/dx + d(v_y)/dy`` for ``v`` of shape ``[..., 2, H, W]``."""
    v = tc.as_tensor(v)
    if v.ndim < 3 or v.shape[-3] != 2:
        raise ValueError(f"divergence expects [..., 2, H, W], got {v.shape}")
    dvx_dx, _ = spatial_gradient(v[..., 0, :, :], pad_mode)
    _, dvy_dy = spatial_gradient(v[..., 1, :, :], pad_mode)
    return dvx_dx + dvy_dy


def latitude_weights(grid: GridSpec) -> np.ndarray:
    """``cos(lat) / mean(cos(lat))``; mean is 1 by construction."""
    c = np.cos(np.deg2rad(np.asarray(grid.lat_deg)))
    return c / c.mean()


def global_integral(u) -> np.ndarray:
    """Raw grid sum per quantity for ``u`` of shape ``[..., K, H, W]``.

    The flux-form stencil conserves exactly this sum on periodic grids.
    """
    data = u.data if isinstance(u, Tensor) else np.asarray(u, dtype=float)
    return data.sum(axis=(-2, -1))
