"""Continuity-equation tendency and the packed first-order ODE system.

The state ``[u; v]`` is packed channel-wise as ``[u (K), v_x (K), v_y (K)]``
and stepped with fixed-step explicit solvers. All arithmetic goes through
the tensor primitives, so the same code runs under a tape for training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as tc
from .grid import GridSpec, divergence, spatial_gradient
from .tensor import Tensor

RHS = Callable[[float, Tensor], Tensor]
METHODS = ("euler", "rk4")


@dataclass
class SystemState:
    u: Tensor  # [..., K, H, W]
    v: Tensor  # [..., K, 2, H, W]
    t: float = 0.0

    def __post_init__(self):
        self.u = tc.as_tensor(self.u)
        self.v = tc.as_tensor(self.v)
        if self.v.shape[:-3] != self.u.shape[:-2] or self.v.shape[-3] != 2 \
                or self.v.shape[-2:] != self.u.shape[-2:]:
            raise ValueError(f"state shapes disagree: u {self.u.shape}, v {self.v.shape}")

    @property
    def K(self) -> int:
        return self.u.shape[-3]


def _check_uv(u: Tensor, v: Tensor) -> None:
    if v.ndim < 4 or v.shape[-3] != 2 or v.shape[:-3] != u.shape[:-2] or v.shape[-2:] != u.shape[-2:]:
        raise ValueError(f"advection: u {u.shape} and v {v.shape} are inconsistent")


def advection_rhs(u, v, pad_mode: str = "circular_x_reflect_y") -> Tensor:
    """Flux form ``-(d(u v_x)/dx + d(u v_y)/dy)`` per quantity."""
    u, v = tc.as_tensor(u), tc.as_tensor(v)
    _check_uv(u, v)
    flux_x = u * v[..., 0, :, :]
    flux_y = u * v[..., 1, :, :]
    dfx, _ = spatial_gradient(flux_x, pad_mode)
    _, dfy = spatial_gradient(flux_y, pad_mode)
    return -(dfx + dfy)


def advection_rhs_expanded(u, v, pad_mode: str = "circular_x_reflect_y") -> Tensor:
    """Transport plus compression, ``-(v . grad u) - u div v``.

    Equal to :func:`advection_rhs` analytically; used as a diagnostic only.
    """
    u, v = tc.as_tensor(u), tc.as_tensor(v)
    _check_uv(u, v)
    dudx, dudy = spatial_gradient(u, pad_mode)
    transport = v[..., 0, :, :] * dudx + v[..., 1, :, :] * dudy
    return -(transport + u * divergence(v, pad_mode))


def pack_state(s: SystemState) -> Tensor:
    v = s.v
    return tc.concat([s.u, v[..., 0, :, :], v[..., 1, :, :]], axis=-3)


def unpack_state(packed, K: int, t: float = 0.0) -> SystemState:
    packed = tc.as_tensor(packed)
    if packed.ndim < 3 or packed.shape[-3] != 3 * K:
        raise ValueError(f"packed state needs {3 * K} channels, got shape {packed.shape}")
    u = packed[..., :K, :, :]
    vx = packed[..., K:2 * K, :, :]
    vy = packed[..., 2 * K:, :, :]
    return SystemState(u, tc.stack([vx, vy], axis=-3), t)


def split_packed(packed: Tensor, K: int) -> tuple[Tensor, Tensor]:
    """``(u, v)`` views of a packed state, with ``v`` as ``[..., K, 2, H, W]``."""
    s = unpack_state(packed, K)
    return s.u, s.v


def pure_advection_rhs(K: int, pad_mode: str = "circular_x_reflect_y") -> RHS:
    """Tendency of the closed system with frozen velocity."""

    def rhs(t: float, y: Tensor) -> Tensor:
        u, v = split_packed(y, K)
        du = advection_rhs(u, v, pad_mode)
        zero = tc.Tensor(np.zeros(u.shape[:-3] + (2 * K,) + u.shape[-2:]))
        return tc.concat([du, zero], axis=-3)

    return rhs


@dataclass
class Trajectory:
    times: list[float]
    states: list[Tensor]  # packed states aligned with ``times``
    K: int
    features: list | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise ValueError("times and states must align")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("trajectory times must be strictly increasing")

    def state(self, i: int) -> SystemState:
        return unpack_state(self.states[i], self.K, self.times[i])

    def u(self, i: int) -> Tensor:
        return self.states[i][..., :self.K, :, :]


def _step(rhs: RHS, t: float, y: Tensor, dt: float, method: str) -> Tensor:
    if method == "euler":
        return y + rhs(t, y) * dt
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * dt, y + k1 * (0.5 * dt))
    k3 = rhs(t + 0.5 * dt, y + k2 * (0.5 * dt))
    k4 = rhs(t + dt, y + k3 * dt)
    return y + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0)


def step_counts(t_grid: Sequence[float], dt: float) -> list[int]:
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    counts = []
    for a, b in zip(t_grid, t_grid[1:]):
        gap = b - a
        if gap <= 0:
            raise ValueError("t_grid must be strictly increasing")
        n = int(round(gap / dt))
        if n < 1 or abs(n * dt - gap) > 1e-9:
            raise ValueError(f"dt={dt} does not divide the interval {gap}")
        counts.append(n)
    return counts


def integrate(rhs: RHS, y0, t_grid: Sequence[float], dt: float, method: str = "euler") -> Trajectory:
    """Fixed-step solve of ``y' = rhs(t, y)``, recording ``y`` at each grid time.

    ``rhs`` receives the absolute time. The step inside each interval is
    ``gap / n`` with ``n = round(gap / dt)``, so recorded times are hit exactly.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    y = tc.as_tensor(y0)
    t_grid = [float(t) for t in t_grid]
    counts = step_counts(t_grid, dt)
    states = [y]
    for (a, b), n in zip(zip(t_grid, t_grid[1:]), counts):
        h = (b - a) / n
        for i in range(n):
            y = _step(rhs, a + i * h, y, h, method)
        states.append(y)
    K = y.shape[-3] // 3 if y.ndim >= 3 else 0  # generic ODEs carry no packed layout
    return Trajectory(t_grid, states, K)


def integrate_state(state0: SystemState, t_grid: Sequence[float], dt: float,
                    method: str = "euler", rhs: RHS | None = None,
                    grid: GridSpec | None = None) -> Trajectory:
    """Integrate a :class:`SystemState`; defaults to pure advection."""
    if rhs is None:
        pad = grid.pad_mode if grid is not None else "circular_x_reflect_y"
        rhs = pure_advection_rhs(state0.K, pad)
    return integrate(rhs, pack_state(state0), t_grid, dt, method)
