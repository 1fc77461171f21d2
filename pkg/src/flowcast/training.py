"""Normalisation, the Gaussian likelihood loss and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tc
from .data import DatasetManifest
from .embeddings import FeatureBuilder
from .model import AdvectionModel
from .network import EVAL, ModelConfig, NetParams, RunMode, init_params
from .optim import Adam, cosine_schedule
from .tensor import NonFiniteError, Tensor
from .velocity import RbfPrior, VelocityFitConfig, estimate_velocity

log = logging.getLogger(__name__)

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# normalisation


@dataclass(frozen=True)
class NormStats:
    """Per-quantity min/max; the quantity axis is third from the end."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise ValueError("lo and hi must have one entry per quantity")
        for k, (a, b) in enumerate(zip(self.lo, self.hi)):
            if not b > a:
                raise ValueError(f"quantity {k}: max must exceed min (got {a}, {b})")

    @classmethod
    def from_frames(cls, frames: np.ndarray) -> "NormStats":
        """Stats over ``[N, K, H, W]`` frames (the training split only)."""
        frames = np.asarray(frames, dtype=float)
        return cls(tuple(frames.min(axis=(0, 2, 3)).tolist()), tuple(frames.max(axis=(0, 2, 3)).tolist()))

    def _bc(self, x: np.ndarray):
        lo = np.asarray(self.lo)[:, None, None]
        span = np.asarray(self.hi)[:, None, None] - lo
        if x.shape[-3] != len(self.lo):
            raise ValueError(f"expected {len(self.lo)} quantities on axis -3, got {x.shape}")
        return lo, span

    def normalize(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        lo, span = self._bc(x)
        return (x - lo) / span

    def denormalize(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        lo, span = self._bc(x)
        return x * span + lo

    def scale(self, x) -> np.ndarray:
        """Denormalise a spread (no offset)."""
        x = np.asarray(x, dtype=float)
        _, span = self._bc(x)
        return x * span

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(tuple(d["lo"]), tuple(d["hi"]))


# ---------------------------------------------------------------------------
# loss


def nll_loss(y, u, mu, sigma, inv_lambda: float = 0.0) -> Tensor:
    """Mean Gaussian NLL of ``y`` under ``N(u + mu, sigma^2)`` plus a half-normal prior on sigma.

    Per element: ``0.5 log 2pi + log sigma + (y - u - mu)^2 / (2 sigma^2)
    + 0.5 sigma^2 inv_lambda^2`` where ``inv_lambda = 1 / lambda_sigma``.
    """
    y, u, mu, sigma = (tc.as_tensor(a) for a in (y, u, mu, sigma))
    if np.any(~(sigma.data > 0)):
        raise ValueError("sigma must be positive")
    if inv_lambda < 0:
        raise ValueError("inv_lambda must be non-negative")
    resid = y - u - mu
    z = resid / sigma
    per = tc.log(sigma) + z * z * 0.5 + HALF_LOG_2PI
    if inv_lambda > 0:
        per = per + sigma * sigma * (0.5 * inv_lambda**2)
    return tc.mean(per)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    segment_frames: int = 3  # t0 plus two targets
    solver_dt: float = 0.125  # days per solver step
    method: str = "euler"
    lr: float = 1e-3
    lr_min: float = 1e-5
    inv_lambda_max: float = 1.0
    inv_lambda_min: float = 0.0
    seed: int = 0
    velocity: VelocityFitConfig = field(default_factory=VelocityFitConfig)
    max_train_segments: int | None = None

    def __post_init__(self):
        if isinstance(self.velocity, dict):
            self.velocity = VelocityFitConfig(**self.velocity)
        if self.epochs < 0 or self.batch_size < 1 or self.segment_frames < 2:
            raise ValueError("epochs >= 0, batch_size >= 1 and segment_frames >= 2 required")
        if self.solver_dt <= 0 or self.lr <= 0 or self.lr_min < 0:
            raise ValueError("solver_dt and lr must be positive")
        if not self.inv_lambda_max >= self.inv_lambda_min >= 0:
            raise ValueError("need inv_lambda_max >= inv_lambda_min >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def inv_lambda(self, epoch: int) -> float:
        return cosine_schedule(epoch, max(self.epochs - 1, 1), self.inv_lambda_max, self.inv_lambda_min)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# segments and initial velocities


@dataclass
class SegmentSet:
    """Normalised frames of one split plus start indices and cached initial velocities."""

    frames: np.ndarray  # [N, K, H, W] normalised
    times: np.ndarray
    starts: np.ndarray  # indices of t0
    length: int
    v0: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        dt = np.diff(self.times)
        self.dt = float(dt[0]) if dt.size else 0.0
        if dt.size and not np.allclose(dt, self.dt, rtol=0, atol=1e-9):
            raise ValueError("segment frames must be equally spaced")

    def lead_offsets(self) -> list[float]:
        return [j * self.dt for j in range(self.length)]


def make_segments(frames: np.ndarray, times: np.ndarray, length: int, history: int = 2) -> SegmentSet:
    """All starts with ``history`` earlier frames and ``length - 1`` later ones."""
    n = len(times)
    starts = np.arange(history, n - length + 1)
    if starts.size == 0:
        raise ValueError(f"{n} frames are too few for segments of {length} with {history} history")
    return SegmentSet(np.asarray(frames, float), np.asarray(times, float), starts, length)


def cache_velocities(seg: SegmentSet, prior: RbfPrior, cfg: VelocityFitConfig, pad_mode: str,
                     starts: Sequence[int] | None = None) -> None:
    for i in (seg.starts if starts is None else starts):
        i = int(i)
        if i not in seg.v0:
            seg.v0[i] = estimate_velocity(seg.frames[i - 2:i + 1], seg.dt, prior, cfg, pad_mode)


def batch_arrays(seg: SegmentSet, idx: Sequence[int]):
    u0 = np.stack([seg.frames[i] for i in idx])
    v0 = np.stack([seg.v0[i] for i in idx])
    t0 = [float(seg.times[i]) for i in idx]
    targets = np.stack([seg.frames[i:i + seg.length] for i in idx])  # [B, T, K, H, W]
    return u0, v0, t0, targets


def segment_loss(model: AdvectionModel, u0, v0, t0: Sequence[float], targets: np.ndarray,
                 offsets: Sequence[float], solver_dt: float, method: str, inv_lambda: float,
                 mode: RunMode = EVAL) -> Tensor:
    """Mean NLL over the targets after ``t0`` (the start frame is the initial condition)."""
    traj = model.rollout(u0, v0, t0, offsets, solver_dt, method, mode)
    terms = []
    for j in range(1, len(offsets)):
        u = traj.u(j)
        out = model.emit(u, [t + offsets[j] for t in t0], mode)
        terms.append(nll_loss(tc.Tensor(targets[:, j]), u, out.mu, out.sigma, inv_lambda))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: NetParams  # best validation parameters
    stats: NormStats
    history: list[dict]
    best_epoch: int


def build_model(params: NetParams, manifest: DatasetManifest) -> AdvectionModel:
    lsm, oro = manifest.static_fields()
    return AdvectionModel(params, manifest.grid, FeatureBuilder(manifest.grid, lsm, oro))


def _evaluate(model, seg: SegmentSet, cfg: TrainConfig) -> float:
    """Observation NLL on ``seg`` without the sigma prior (comparable across epochs)."""
    total, count = 0.0, 0
    offsets = seg.lead_offsets()
    with tc.no_tape():
        for b in range(0, len(seg.starts), cfg.batch_size):
            idx = seg.starts[b:b + cfg.batch_size]
            u0, v0, t0, targets = batch_arrays(seg, idx)
            loss = segment_loss(model, u0, v0, t0, targets, offsets, cfg.solver_dt, cfg.method, 0.0)
            total += loss.item() * len(idx)
            count += len(idx)
    return total / count


def fit(train: DatasetManifest, val: DatasetManifest, model_cfg: ModelConfig, cfg: TrainConfig,
        log_path=None, checkpoint_path=None) -> TrainResult:
    """Train on ``train`` and keep the parameters with the lowest validation NLL."""
    if model_cfg.K != train.K:
        raise ValueError(f"model K={model_cfg.K} but dataset has {train.K} quantities")
    if model_cfg.pad_mode != train.grid.pad_mode:
        raise ValueError("model pad_mode does not match the dataset grid")
    rng = np.random.default_rng(cfg.seed)
    raw_train = train.stack()
    stats = NormStats.from_frames(raw_train)
    tr = make_segments(stats.normalize(raw_train), train.times, cfg.segment_frames)
    va = make_segments(stats.normalize(val.stack()), val.times, cfg.segment_frames)
    if abs(tr.dt - train.dt_days) > 1e-9:
        raise ValueError("training frames are not spaced by the manifest dt")
    if cfg.max_train_segments is not None:
        tr.starts = tr.starts[:cfg.max_train_segments]
    prior = RbfPrior(train.grid.H, train.grid.W, cfg.velocity.lengthscale)
    cache_velocities(tr, prior, cfg.velocity, train.grid.pad_mode)
    cache_velocities(va, prior, cfg.velocity, train.grid.pad_mode)

    params = init_params(model_cfg, rng)
    model = build_model(params, train)
    opt = Adam(params.values(), lr=cfg.lr)
    offsets = tr.lead_offsets()
    steps_per_epoch = math.ceil(len(tr.starts) / cfg.batch_size)
    total_steps = max(cfg.epochs * steps_per_epoch - 1, 1)
    mode = RunMode(training=True, rng=rng)

    best_val = _evaluate(model, va, cfg)
    best = params.copy()
    best_epoch = -1
    history: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        inv_lam = cfg.inv_lambda(epoch)
        order = rng.permutation(tr.starts)
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            lr = cosine_schedule(step, total_steps, cfg.lr, cfg.lr_min)
            u0, v0, t0, targets = batch_arrays(tr, idx)
            try:
                with tc.Tape() as tape:
                    loss = segment_loss(model, u0, v0, t0, targets, offsets, cfg.solver_dt,
                                        cfg.method, inv_lam, mode)
                grads = tape.gradient(loss, params.values())
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch} step {step} "
                                    f"(lambda_sigma={_lam(inv_lam)}, lr={lr:.3g}): {exc}") from exc
            if not (np.isfinite(loss.item()) and all(np.isfinite(g).all() for g in grads)):
                raise TrainingError(f"non-finite loss/gradient at epoch {epoch} step {step} "
                                    f"(lambda_sigma={_lam(inv_lam)}, lr={lr:.3g})")
            opt.step(grads, lr)
            losses.append(loss.item())
            step += 1
        val_nll = _evaluate(model, va, cfg)
        row = {"epoch": epoch, "train_nll": float(np.mean(losses)), "val_nll": val_nll,
               "lr": lr, "lambda_sigma": _lam(inv_lam)}
        history.append(row)
        log.info("epoch %d train %.5f val %.5f", epoch, row["train_nll"], val_nll)
        if val_nll < best_val:
            best_val, best, best_epoch = val_nll, params.copy(), epoch
        if log_path is not None:
            write_log(log_path, history)
    if log_path is not None:
        write_log(log_path, history)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, best, stats, cfg)
    return TrainResult(best, stats, history, best_epoch)


def _lam(inv_lambda: float) -> float:
    return math.inf if inv_lambda == 0 else 1.0 / inv_lambda


LOG_FIELDS = ("epoch", "train_nll", "val_nll", "lr", "lambda_sigma")


def write_log(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in LOG_FIELDS})


def save_checkpoint(path, params: NetParams, stats: NormStats, cfg: TrainConfig) -> Path:
    """Parameters via :meth:`NetParams.save` plus a ``.train.json`` sidecar (stats, config)."""
    path = Path(path)
    params.save(path)
    side = path.with_suffix(path.suffix + ".train.json")
    side.write_text(json.dumps({"stats": stats.to_dict(), "train": cfg.to_dict()}, indent=1))
    return path


def load_checkpoint(path) -> tuple[NetParams, NormStats, TrainConfig]:
    path = Path(path)
    params = NetParams.load(path)
    side = json.loads(path.with_suffix(path.suffix + ".train.json").read_text())
    return params, NormStats.from_dict(side["stats"]), TrainConfig.from_dict(side["train"])
