"""Initial-velocity inversion by penalised least squares.

For each quantity the velocity minimises::

    || du/dt + v . grad(u) + u div(v) ||^2 + alpha * v^T K^{-1} v

where ``K`` is a Gaussian RBF covariance over grid pixels (applied to each
velocity component) and ``du/dt`` comes from the most recent frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from . import tensor as tc
from .grid import GridSpec, divergence, spatial_gradient
from .tensor import Tensor
from .optim import Adam

CHOLESKY_MAX_PIXELS = 4096
DEFAULT_LENGTHSCALE = 16.0


# ---------------------------------------------------------------------------
# time derivative


def natural_spline_end_slope(frames: Sequence[np.ndarray], dt: float) -> np.ndarray:
    """Slope at the last knot of the natural cubic spline through equispaced ``frames``."""
    y = np.asarray(frames, dtype=float)
    n = y.shape[0]
    # second derivatives M_0 = M_{n-1} = 0; tridiagonal system for the interior
    m = np.zeros_like(y)
    if n > 2:
        rhs = 6.0 * (y[2:] - 2.0 * y[1:-1] + y[:-2]) / dt**2
        k = n - 2
        ab = np.zeros((3, k))
        ab[0, 1:] = 1.0
        ab[1, :] = 4.0
        ab[2, :-1] = 1.0
        m[1:-1] = scipy.linalg.solve_banded((1, 1), ab, rhs.reshape(k, -1)).reshape(rhs.shape)
    return (y[-1] - y[-2]) / dt + dt * (m[-2] + 2.0 * m[-1]) / 6.0


def time_derivative_estimate(frames: Sequence[np.ndarray], dt: float,
                             method: str = "spline") -> np.ndarray:
    """Estimate ``du/dt`` at the last of ``frames`` (oldest first, spacing ``dt``).

    ``spline``: natural cubic spline through all given frames.
    ``three_point``: one-sided second-order difference of the last three
    frames, ``(u0 - 4 u1 + 3 u2) / (2 dt)``, exact for quadratics.
    """
    if len(frames) < 3:
        raise ValueError(f"need at least 3 frames, got {len(frames)}")
    if dt <= 0:
        raise ValueError("dt must be positive")
    if method == "spline":
        return natural_spline_end_slope(frames, dt)
    if method == "three_point":
        u0, u1, u2 = (np.asarray(f, dtype=float) for f in frames[-3:])
        return (u0 - 4.0 * u1 + 3.0 * u2) / (2.0 * dt)
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# RBF prior


def rbf_1d(coords: np.ndarray, lengthscale: float, period: float | None = None) -> np.ndarray:
    """Gaussian kernel matrix; with ``period`` the wrapped (image-sum) Gaussian.

    It differs from the Gaussian of the shortest circular distance by at most
    about ``2 exp(-period^2 / (8 lengthscale^2))``, and unlike that kernel it
    stays positive semi-definite for long lengthscales.
    """
    d = coords[:, None] - coords[None, :]
    if period is None:
        return np.exp(-0.5 * (d / lengthscale) ** 2)
    d = (d + 0.5 * period) % period - 0.5 * period
    n_img = int(np.ceil(8.0 * lengthscale / period)) + 1
    out = np.zeros_like(d)
    for m in range(-n_img, n_img + 1):
        out += np.exp(-0.5 * ((d + m * period) / lengthscale) ** 2)
    return out


@dataclass
class RbfPrior:
    """Gaussian RBF covariance over pixels with circular longitude distance.

    ``K = K_lat (x) K_lon + jitter * I``. Grids up to 4096 pixels use a dense
    Cholesky factor; larger grids use the exact Kronecker eigendecomposition.
    """

    H: int
    W: int
    lengthscale: float = DEFAULT_LENGTHSCALE
    jitter: float = 1e-8
    method: str = "auto"
    _chol: tuple | None = field(default=None, init=False, repr=False)
    _eig: tuple | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.lengthscale <= 0:
            raise ValueError("lengthscale must be positive")
        k_lat = rbf_1d(np.arange(self.H, dtype=float), self.lengthscale)
        k_lon = rbf_1d(np.arange(self.W, dtype=float), self.lengthscale, period=float(self.W))
        lh, qh = np.linalg.eigh(k_lat)
        lw, qw = np.linalg.eigh(k_lon)
        lam = np.clip(lh, 0.0, None)[:, None] * np.clip(lw, 0.0, None)[None, :] + self.jitter
        self._eig = (qh, qw, lam)
        method = self.method
        if method == "auto":
            method = "cholesky" if self.H * self.W <= CHOLESKY_MAX_PIXELS else "kronecker"
        if method == "cholesky":
            K = np.kron(k_lat, k_lon) + self.jitter * np.eye(self.H * self.W)
            self._chol = scipy.linalg.cho_factor(K, lower=True)
        elif method != "kronecker":
            raise ValueError(f"unknown method {self.method!r}")
        self.method = method

    @classmethod
    def for_grid(cls, grid: GridSpec, lengthscale: float = DEFAULT_LENGTHSCALE, jitter: float = 1e-8) -> "RbfPrior":
        return cls(grid.H, grid.W, lengthscale, jitter)

    def kernel(self) -> np.ndarray:
        k_lat = rbf_1d(np.arange(self.H, dtype=float), self.lengthscale)
        k_lon = rbf_1d(np.arange(self.W, dtype=float), self.lengthscale, period=float(self.W))
        return np.kron(k_lat, k_lon) + self.jitter * np.eye(self.H * self.W)

    def solve(self, v: np.ndarray) -> np.ndarray:
        """``K^{-1} v`` for fields ``v`` of shape ``[..., H, W]``."""
        shape = v.shape
        if self._chol is not None:
            flat = v.reshape(-1, self.H * self.W).T
            return scipy.linalg.cho_solve(self._chol, flat).T.reshape(shape)
        qh, qw, lam = self._eig
        z = qh.T @ v @ qw
        return qh @ (z / lam) @ qw.T

    def sqrt_apply(self, z: np.ndarray) -> np.ndarray:
        """``S z`` with ``S S^T = K`` (symmetric square root); maps white noise to prior draws."""
        qh, qw, lam = self._eig
        return qh @ (np.sqrt(lam) * (qh.T @ z @ qw)) @ qw.T

    def sqrt_adjoint(self, g: np.ndarray) -> np.ndarray:
        return self.sqrt_apply(g)  # S is symmetric

    def quad(self, v) -> Tensor:
        """``sum over leading axes of v^T K^{-1} v`` as a differentiable scalar."""
        v = tc.as_tensor(v)
        kinv_v = self.solve(v.data)
        value = np.array(float(np.sum(v.data * kinv_v)))
        return tc.custom_op("rbf_quad", value, [v], lambda g: (2.0 * g * kinv_v,))

    def norm(self, v: np.ndarray) -> float:
        """``sqrt(v^T K^{-1} v)`` summed over components."""
        return float(np.sqrt(self.quad(v).item()))


# ---------------------------------------------------------------------------
# inversion


@dataclass
class VelocityFitConfig:
    """Inversion settings.

    ``optimizer="cg"`` runs conjugate gradients on the whitened normal
    equations (``v = S z`` with ``S S^T = K``) for at most ``max_iter``
    iterations. ``optimizer="adam"`` runs Adam on the same whitened
    variables for ``epochs`` steps at ``lr``.
    """

    alpha: float = 1e-7
    optimizer: str = "cg"
    max_iter: int = 2000
    lr: float = 2.0
    epochs: int = 200
    tol: float = 1e-10
    lengthscale: float = DEFAULT_LENGTHSCALE
    derivative: str = "spline"

    def __post_init__(self):
        if self.optimizer not in ("cg", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


def inversion_objective(v, u, dudx, dudy, u_dot, prior: RbfPrior, alpha: float,
                        pad_mode: str) -> Tensor:
    """Residual energy plus RBF penalty for one quantity; ``v`` is ``[2, H, W]``."""
    v = tc.as_tensor(v)
    resid = u_dot + _transport(v, u, dudx, dudy, pad_mode)
    return (resid * resid).sum() + prior.quad(v) * alpha


def _transport(v, u, dudx, dudy, pad_mode: str) -> Tensor:
    return v[0] * dudx + v[1] * dudy + u * divergence(v, pad_mode)


@dataclass
class VelocityFit:
    v: np.ndarray  # [K, 2, H, W]
    objective: np.ndarray  # final objective per quantity
    initial_objective: np.ndarray
    iterations: np.ndarray


class _LinearProblem:
    """The residual ``A v + b`` for one quantity, with ``A`` and ``A^T`` as callables."""

    def __init__(self, u: np.ndarray, u_dot: np.ndarray, pad_mode: str):
        self.u = tc.Tensor(u)
        self.dudx, self.dudy = spatial_gradient(self.u, pad_mode)
        self.b = u_dot
        self.pad_mode = pad_mode
        self.shape = (2,) + u.shape

    def apply(self, v: np.ndarray) -> np.ndarray:
        with tc.no_tape():
            return _transport(tc.Tensor(v), self.u, self.dudx, self.dudy, self.pad_mode).data

    def adjoint(self, r: np.ndarray) -> np.ndarray:
        v = tc.Tensor(np.zeros(self.shape), requires_grad=True)
        with tc.Tape() as tape:
            out = (_transport(v, self.u, self.dudx, self.dudy, self.pad_mode) * tc.Tensor(r)).sum()
        return tape.gradient(out, [v])[0]


def _solve_cg(prob: _LinearProblem, prior: RbfPrior, cfg: VelocityFitConfig) -> tuple[np.ndarray, int]:
    n = int(np.prod(prob.shape))
    white = lambda z: prior.sqrt_apply(z.reshape(prob.shape))

    def normal(z):
        return prior.sqrt_adjoint(prob.adjoint(prob.apply(white(z)))).ravel() + cfg.alpha * z

    op = scipy.sparse.linalg.LinearOperator((n, n), matvec=normal, dtype=float)
    rhs = -prior.sqrt_adjoint(prob.adjoint(prob.b)).ravel()
    count = [0]

    def tick(_):
        count[0] += 1

    z, _ = scipy.sparse.linalg.cg(op, rhs, rtol=cfg.tol, atol=0.0, maxiter=cfg.max_iter, callback=tick)
    return white(z), count[0]


def _solve_adam(prob: _LinearProblem, prior: RbfPrior, cfg: VelocityFitConfig) -> tuple[np.ndarray, int]:
    z = tc.Tensor(np.zeros(prob.shape), requires_grad=True)
    opt = Adam([z], lr=cfg.lr)
    best, best_z, prev = np.inf, z.data.copy(), None
    for it in range(cfg.epochs + 1):
        r = prob.apply(prior.sqrt_apply(z.data)) + prob.b
        val = float(np.sum(r * r) + cfg.alpha * np.sum(z.data * z.data))
        if val < best:
            best, best_z = val, z.data.copy()
        if it == cfg.epochs or (prev is not None and abs(prev - val) < cfg.tol):
            break
        prev = val
        grad = 2.0 * prior.sqrt_adjoint(prob.adjoint(r)) + 2.0 * cfg.alpha * z.data
        opt.step([grad])
    return prior.sqrt_apply(best_z), it


def infer_initial_velocity(u: np.ndarray, u_dot: np.ndarray, prior: RbfPrior,
                           config: VelocityFitConfig | None = None,
                           pad_mode: str = "circular_x_reflect_y") -> VelocityFit:
    """Fit ``v`` for each quantity of ``u`` (``[K, H, W]``), starting from zero.

    Each quantity is solved independently. The objective at the returned
    ``v`` never exceeds its value at ``v = 0``.
    """
    cfg = config or VelocityFitConfig()
    u = np.asarray(u, dtype=float)
    u_dot = np.asarray(u_dot, dtype=float)
    if u.shape != u_dot.shape or u.ndim != 3:
        raise ValueError(f"u {u.shape} and u_dot {u_dot.shape} must both be [K, H, W]")
    if not (np.isfinite(u).all() and np.isfinite(u_dot).all()):
        raise ValueError("non-finite inputs to velocity inversion")
    if (prior.H, prior.W) != u.shape[1:]:
        raise ValueError("prior grid does not match the fields")
    K, H, W = u.shape
    out = np.zeros((K, 2, H, W))
    final = np.zeros(K)
    first = np.zeros(K)
    iters = np.zeros(K, dtype=int)
    solve = _solve_cg if cfg.optimizer == "cg" else _solve_adam
    for k in range(K):
        prob = _LinearProblem(u[k], u_dot[k], pad_mode)
        v, iters[k] = solve(prob, prior, cfg)
        with tc.no_tape():
            obj = lambda w: inversion_objective(w, prob.u, prob.dudx, prob.dudy, tc.Tensor(u_dot[k]),
                                                prior, cfg.alpha, pad_mode).item()
            first[k] = obj(np.zeros((2, H, W)))
            final[k] = obj(v)
        if not final[k] <= first[k]:
            v, final[k] = np.zeros((2, H, W)), first[k]
        out[k] = v
    return VelocityFit(out, final, first, iters)


def estimate_velocity(frames: Sequence[np.ndarray], dt: float, prior: RbfPrior,
                      config: VelocityFitConfig | None = None,
                      pad_mode: str = "circular_x_reflect_y") -> np.ndarray:
    """Velocity at the last of ``frames`` (each ``[K, H, W]``, spacing ``dt`` days)."""
    cfg = config or VelocityFitConfig()
    u_dot = time_derivative_estimate(frames, dt, cfg.derivative)
    return infer_initial_velocity(frames[-1], u_dot, prior, cfg, pad_mode).v
