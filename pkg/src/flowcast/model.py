"""Full model: neural second-order advection system plus emission head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tc
from .dynamics import RHS, SystemState, Trajectory, advection_rhs, integrate, pack_state, split_packed
from .embeddings import FeatureBuilder, FeatureStack
from .grid import GridSpec, spatial_gradient
from .network import EVAL, EmissionOutput, NetParams, RunMode, emission_forward, velocity_inputs, velocity_tendency
from .tensor import Tensor


def ode_rhs(state: SystemState, t: float, params: NetParams, psi: FeatureStack | np.ndarray,
            mode: RunMode = EVAL) -> Tensor:
    """Packed tendency ``[-div(u v); f_theta(u, grad u, v, psi)]`` for one state."""
    values = psi.values if isinstance(psi, FeatureStack) else psi
    return _tendency(pack_state(state), params, tc.Tensor(values), mode)


def _tendency(y: Tensor, params: NetParams, psi: Tensor, mode: RunMode) -> Tensor:
    K = params.config.K
    pad = params.config.pad_mode
    u, v = split_packed(y, K)
    du = advection_rhs(u, v, pad)
    x = velocity_inputs(u, spatial_gradient(u, pad), v, psi)
    dv = velocity_tendency(x, params, mode)
    return tc.concat([du, dv], axis=-3)


@dataclass
class AdvectionModel:
    params: NetParams
    grid: GridSpec
    features: FeatureBuilder

    def __post_init__(self):
        if self.params.config.pad_mode != self.grid.pad_mode:
            raise ValueError("model pad_mode does not match the grid boundary")

    @property
    def K(self) -> int:
        return self.params.config.K

    def psi(self, t_abs: Sequence[float]) -> Tensor:
        return tc.Tensor(np.stack([self.features.values(t) for t in t_abs]))

    def rhs(self, t0: Sequence[float], mode: RunMode = EVAL) -> RHS:
        """Batched tendency; the solver's time is an offset from each member's ``t0``."""
        t0 = [float(t) for t in t0]

        def f(tau: float, y: Tensor) -> Tensor:
            return _tendency(y, self.params, self.psi([t + tau for t in t0]), mode)

        return f

    def rollout(self, u0, v0, t0: Sequence[float], offsets: Sequence[float], dt: float,
                method: str = "euler", mode: RunMode = EVAL) -> Trajectory:
        """Integrate from ``(u0, v0)`` of shape ``[N,K,H,W]``/``[N,K,2,H,W]``.

        ``offsets`` are lead times (days) starting at 0.
        """
        y0 = pack_state(SystemState(u0, v0))
        return integrate(self.rhs(t0, mode), y0, offsets, dt, method)

    def emit(self, u: Tensor, t_abs: Sequence[float], mode: RunMode = EVAL) -> EmissionOutput:
        return emission_forward(u, self.psi(t_abs), self.params, mode)
