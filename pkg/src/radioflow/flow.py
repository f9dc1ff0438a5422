"""Conditional flow matching on straight interpolation paths.

Paths are ``x_t = (1 - t) x0 + t x1 + sigma_t * eps`` with target field
``u_t = x1 - x0``. Besides the training quantities this module carries
low-dimensional diagnostics (Monte-Carlo marginal field, kinetic energy,
continuity-equation residual) used to check the transport picture.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

# v(x, t, c) -> field; x is (B, ...), t is (B,)
VectorField = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PathSchedule:
    """Noise level along the path; ``sigma`` is constant (0 gives straight lines)."""

    sigma: float = 0.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    def __call__(self, t) -> np.ndarray:
        return np.full(np.shape(t), self.sigma, dtype=np.float64)


@dataclass
class FlowSample:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray  # (B,)
    sigma_t: np.ndarray  # (B,)
    eps: np.ndarray
    x_t: np.ndarray
    u_t: np.ndarray
    condition: np.ndarray


def _bcast(t, like: np.ndarray) -> np.ndarray:
    """Reshape per-sample scalars (B,) to broadcast against (B, ...)."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (like.ndim - t.ndim))


def interpolate(x0, x1, t, schedule: PathSchedule = PathSchedule(), eps=None) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any((t_arr < 0) | (t_arr > 1)):
        raise ValueError("t must lie in [0, 1]")
    tb = _bcast(t_arr, x0)
    x_t = (1.0 - tb) * x0 + tb * x1
    sig = schedule(t_arr)
    if np.any(sig > 0):
        if eps is None:
            raise ValueError("eps is required when sigma_t > 0")
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != x0.shape:
            raise ValueError("eps shape must match x0")
        x_t = x_t + _bcast(sig, x0) * eps
    return x_t


def target_field(x0, x1) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
    return x1 - x0


def conditional_score(x, x0, x1, t, sigma_t) -> np.ndarray:
    """Gradient of log N(x; (1-t) x0 + t x1, sigma_t^2 I) with respect to x."""
    sigma_t = float(sigma_t)
    if sigma_t <= 0:
        raise ValueError("conditional score is undefined in the deterministic limit sigma_t = 0")
    x = np.asarray(x, dtype=np.float64)
    mu = (1.0 - t) * np.asarray(x0, dtype=np.float64) + t * np.asarray(x1, dtype=np.float64)
    return -(x - mu) / sigma_t**2


def make_flow_sample(
    x1: np.ndarray,
    condition: np.ndarray,
    rng: np.random.Generator,
    schedule: PathSchedule = PathSchedule(),
) -> FlowSample:
    """Draw x0, t ~ U[0, 1] per sample and eps, then build x_t and u_t."""
    x1 = np.asarray(x1, dtype=np.float64)
    B = x1.shape[0]
    x0 = rng.standard_normal(x1.shape)
    t = rng.uniform(0.0, 1.0, size=B)
    eps = rng.standard_normal(x1.shape) if schedule.sigma > 0 else np.zeros_like(x1)
    x_t = interpolate(x0, x1, t, schedule, eps)
    return FlowSample(x0, x1, t, schedule(t), eps, x_t, target_field(x0, x1), condition)


def cfm_loss(model, batch: FlowSample, cond_after_dropout=None):
    """Mean squared error between ``model(x_t, t, c)`` and ``u_t``.

    ``model`` may return either a numpy array or a differentiable Tensor; in
    the latter case the loss is a Tensor on the active tape.
    """
    from . import numeric as nm

    cond = batch.condition if cond_after_dropout is None else cond_after_dropout
    v = model(batch.x_t, batch.t, cond)
    if isinstance(v, nm.Tensor):
        diff = nm.sub(v, nm.Tensor(batch.u_t.reshape(v.shape)))
        return nm.mean(nm.mul(diff, diff))
    v = np.asarray(v, dtype=np.float64)
    return float(np.mean((v - batch.u_t) ** 2))


def marginal_field_mc(
    pairs: Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray]],
    x,
    t: float,
    schedule: PathSchedule,
    n_samples: int,
    rng: np.random.Generator,
    return_stderr: bool = False,
):
    """Self-normalized importance estimate of the marginal field at ``x``.

    ``pairs(rng, n)`` draws ``n`` coupled endpoints ``(x0, x1)`` each of shape
    (n, d). The weight of a pair is the path density p_t(x | x0, x1); the
    estimate is sum(w u) / sum(w) with weights formed in log space.
    """
    sigma = float(schedule(t))
    if sigma <= 0:
        raise ValueError("marginal field estimation needs sigma_t > 0")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    x0, x1 = pairs(rng, n_samples)
    x0 = np.asarray(x0, dtype=np.float64).reshape(n_samples, -1)
    x1 = np.asarray(x1, dtype=np.float64).reshape(n_samples, -1)
    mu = (1.0 - t) * x0 + t * x1
    logw = -0.5 * np.sum((x - mu) ** 2, axis=1) / sigma**2
    if not np.isfinite(logw).any():
        raise EstimationError("all density weights underflowed")
    logw = logw - logsumexp(logw)
    w = np.exp(logw)
    if not np.isfinite(w).all() or w.sum() == 0:
        raise EstimationError("all density weights underflowed")
    u = x1 - x0
    est = w @ u
    if not return_stderr:
        return est
    # delta-method standard error of a ratio estimator
    stderr = np.sqrt(np.sum(w[:, None] ** 2 * (u - est) ** 2, axis=0))
    return est, stderr


def kinetic_energy(
    field: VectorField,
    x1: np.ndarray,
    condition: np.ndarray,
    n_time_samples: int,
    rng: np.random.Generator,
    schedule: PathSchedule = PathSchedule(),
) -> float:
    """Monte-Carlo estimate of the integral over t of E||v(x_t, t)||^2.

    Norms are per sample (sum over elements), averaged over the batch and
    over ``n_time_samples`` uniform time draws.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    total = 0.0
    for _ in range(n_time_samples):
        s = make_flow_sample(x1, condition, rng, schedule)
        v = np.asarray(field(s.x_t, s.t, condition), dtype=np.float64)
        total += float(np.mean(np.sum(v.reshape(len(v), -1) ** 2, axis=1)))
    return total / n_time_samples


# -- continuity equation -----------------------------------------------------


@dataclass(frozen=True)
class GaussianPath:
    """Closed-form density N(mean0 + velocity * t, std^2 I) in 1 or 2 dimensions."""

    mean0: Sequence[float]
    velocity: Sequence[float]
    std: float

    def density(self, grid: Sequence[np.ndarray], t: float) -> np.ndarray:
        d = len(grid)
        r2 = 0.0
        for k in range(d):
            r2 = r2 + (grid[k] - (self.mean0[k] + self.velocity[k] * t)) ** 2
        return np.exp(-0.5 * r2 / self.std**2) / (2 * np.pi * self.std**2) ** (d / 2)

    def field(self, grid: Sequence[np.ndarray], t: float) -> list[np.ndarray]:
        return [np.full_like(grid[0], self.velocity[k]) for k in range(len(grid))]


def continuity_residual(
    field_fn: Callable[[Sequence[np.ndarray], float], Sequence[np.ndarray]],
    path: GaussianPath,
    grid: Sequence[np.ndarray],
    t: float,
    dt: float,
) -> np.ndarray:
    """Central-difference estimate of dp/dt + div(v p) on a uniform grid.

    ``grid`` holds 1-D coordinate vectors, one per dimension; the residual
    is returned on the interior points (boundary rows dropped).
    """
    axes = [np.asarray(g, dtype=np.float64) for g in grid]
    mesh = np.meshgrid(*axes, indexing="ij")
    d = len(axes)
    dpdt = (path.density(mesh, t + dt) - path.density(mesh, t - dt)) / (2 * dt)
    p = path.density(mesh, t)
    v = field_fn(mesh, t)
    div = np.zeros_like(p)
    for k in range(d):
        h = axes[k][1] - axes[k][0]
        flux = v[k] * p
        div = div + np.gradient(flux, h, axis=k, edge_order=2)
    res = dpdt + div
    inner = tuple(slice(1, -1) for _ in range(d))
    return res[inner]
