"""Rolling out trained models and the persistence baseline, in physical units."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tc
from .data import DatasetManifest
from .model import AdvectionModel
from .network import SIGMA_FLOOR, NetParams
from .training import NormStats, TrainConfig, build_model
from .velocity import RbfPrior, estimate_velocity


@dataclass
class Forecast:
    start_index: int
    t0: float
    leads: list[float]  # days
    mean: np.ndarray  # [L, K, H, W] physical units: u + mu (start frame at lead 0)
    sigma: np.ndarray  # [L, K, H, W]; the sigma floor at lead 0
    state: np.ndarray  # [L, K, H, W] deterministic state u (normalised)
    mu: np.ndarray  # [L, K, H, W] emission bias (normalised)


def lead_frames(leads_days: Sequence[float], dt_days: float) -> list[int]:
    """Frame counts for each lead; leads must be non-negative multiples of ``dt_days``."""
    out = []
    for lead in leads_days:
        n = int(round(lead / dt_days))
        if lead < 0 or abs(n * dt_days - lead) > 1e-9:
            raise ValueError(f"lead {lead} days is not a multiple of the frame spacing {dt_days}")
        out.append(n)
    return out


class Forecaster:
    def __init__(self, params: NetParams, stats: NormStats, cfg: TrainConfig, manifest: DatasetManifest):
        if params.config.K != manifest.K:
            raise ValueError("checkpoint and dataset disagree on the number of quantities")
        if params.config.pad_mode != manifest.grid.pad_mode:
            raise ValueError("checkpoint and dataset grids disagree on the latitude boundary")
        self.params, self.stats, self.cfg = params, stats, cfg
        self.manifest = manifest
        self.model: AdvectionModel = build_model(params, manifest)
        self.prior = RbfPrior(manifest.grid.H, manifest.grid.W, cfg.velocity.lengthscale)

    def run(self, frames: np.ndarray, times: np.ndarray, start: int,
            leads_days: Sequence[float]) -> Forecast:
        """Forecast from frame ``start`` (needs two earlier frames) at the given leads.

        ``frames`` are in physical units; the lead-0 mean is the start frame itself.
        """
        if start < 2:
            raise ValueError("a forecast start needs two earlier frames")
        frames_norm = self.stats.normalize(frames[start - 2:start + 1])
        leads = sorted(set(float(x) for x in leads_days) | {0.0})
        dt = float(times[start] - times[start - 1])
        v0 = estimate_velocity(frames_norm, dt, self.prior, self.cfg.velocity,
                               self.manifest.grid.pad_mode)
        t0 = float(times[start])
        K, H, W = frames_norm.shape[1:]
        u0 = frames_norm[-1]
        with tc.no_tape():
            if len(leads) > 1:
                traj = self.model.rollout(u0[None], v0[None], [t0], leads,
                                          self.cfg.solver_dt, self.cfg.method)
                states = [traj.u(j).data[0] for j in range(len(leads))]
            else:
                states = [u0]
            mus, sigmas = [np.zeros((K, H, W))], [np.full((K, H, W), SIGMA_FLOOR)]
            for j in range(1, len(leads)):
                out = self.model.emit(tc.Tensor(states[j][None]), [t0 + leads[j]])
                mus.append(out.mu.data[0])
                sigmas.append(out.sigma.data[0])
        state = np.stack(states)
        mu = np.stack(mus)
        mean = self.stats.denormalize(state + mu)
        mean[0] = frames[start]
        sigma = self.stats.scale(np.stack(sigmas))
        return Forecast(start, t0, leads, mean, sigma, state, mu)


def persistence(frames: np.ndarray, start: int, n_leads: Sequence[int]) -> np.ndarray:
    """The start frame repeated at every lead."""
    return np.stack([frames[start]] * len(n_leads))
