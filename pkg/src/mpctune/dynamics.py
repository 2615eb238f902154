"""Feed-axis plant model, context perturbation and sampling utilities.

The tool velocity ``v`` follows a delayed second-order lag::

    v'' + 2 D w0 v' + w0**2 v = K w0**2 u(t - t_d)

The state is ``x = [v, v']``.  Discretization is an exact zero-order hold;
the input delay is realized as a FIFO buffer of ``d = t_d / Ts`` samples.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.linalg import expm
from scipy.stats import norm, truncnorm

from .rng import as_generator

# Below this acceptance probability rejection sampling is replaced by
# inverse-CDF sampling (same distribution, bounded cost).
_MIN_ACCEPTANCE = 1e-3


@dataclass(frozen=True)
class PlantParams:
    gain: float = 1.0
    damping: float = 0.28
    omega0: float = 25.13
    delay: float = 0.004

    def __post_init__(self):
        if not self.omega0 > 0:
            raise ValueError(f"omega0 must be positive, got {self.omega0}")
        if not self.damping > 0:
            raise ValueError(f"damping must be positive, got {self.damping}")
        if self.gain == 0:
            raise ValueError("gain must be non-zero")
        if self.delay < 0:
            raise ValueError(f"delay must be non-negative, got {self.delay}")


@dataclass(frozen=True)
class Context:
    """Model-plant mismatch: multipliers on stiffness (w0) and damping (D)."""

    stiffness: float = 1.0
    damping: float = 1.0

    def __post_init__(self):
        if not (self.stiffness > 0 and self.damping > 0):
            raise ValueError(f"context scales must be positive, got {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.stiffness, self.damping])

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Context":
        return cls(float(values[0]), float(values[1]))


@dataclass(frozen=True)
class TruncatedNormalSpec:
    """Componentwise truncated normal with a common standard deviation."""

    mean: tuple[float, float] = (1.0, 1.0)
    std: float = 0.25
    lower: tuple[float, float] = (0.5, 0.5)
    upper: tuple[float, float] = (1.5, 1.5)

    def __post_init__(self):
        if not self.std >= 0:
            raise ValueError(f"std must be non-negative, got {self.std}")
        lo, hi, mu = (np.asarray(v, dtype=float) for v in (self.lower, self.upper, self.mean))
        if lo.shape != hi.shape or lo.shape != mu.shape:
            raise ValueError("mean, lower and upper must have the same length")
        if np.any(lo >= hi):
            raise ValueError("lower bounds must be strictly below upper bounds")
        if np.any(mu < lo) or np.any(mu > hi):
            raise ValueError("mean must lie within the bounds")

    @property
    def bounds(self) -> np.ndarray:
        return np.column_stack([self.lower, self.upper]).astype(float)

    def cdf(self, x: np.ndarray, component: int) -> np.ndarray:
        mu, lo, hi = self.mean[component], self.lower[component], self.upper[component]
        if self.std == 0:
            return (np.asarray(x, dtype=float) >= mu).astype(float)
        a, b = (lo - mu) / self.std, (hi - mu) / self.std
        return truncnorm.cdf(x, a, b, loc=mu, scale=self.std)


@dataclass(frozen=True)
class DiscretePlant:
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    delay_steps: int
    ts: float

    @property
    def order(self) -> int:
        return self.A.shape[0]

    def dc_gain(self) -> float:
        return float(self.c @ np.linalg.solve(np.eye(self.order) - self.A, self.b))


def perturb(plant: PlantParams, ctx: Context) -> PlantParams:
    return replace(plant, omega0=plant.omega0 * ctx.stiffness, damping=plant.damping * ctx.damping)


def continuous_matrices(plant: PlantParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    w0, D, K = plant.omega0, plant.damping, plant.gain
    A = np.array([[0.0, 1.0], [-w0 * w0, -2.0 * D * w0]])
    b = np.array([0.0, K * w0 * w0])
    c = np.array([1.0, 0.0])
    return A, b, c


def delay_steps(delay: float, ts: float) -> int:
    d = delay / ts
    n = int(round(d))
    if abs(d - n) > 1e-9 * max(1.0, abs(d)):
        raise ValueError(f"delay {delay} is not an integer multiple of the sample time {ts}")
    return n


def discretize(plant: PlantParams, ts: float) -> DiscretePlant:
    """Exact zero-order-hold discretization with a ``t_d / ts`` sample input delay.

    Uses ``Phi = expm(A ts)`` and ``Gamma = A^-1 (Phi - I) b``; ``A`` is
    always invertible here because ``det A = w0**2 > 0``.
    """
    if not ts > 0:
        raise ValueError(f"sample time must be positive, got {ts}")
    d = delay_steps(plant.delay, ts)
    A, b, c = continuous_matrices(plant)
    phi = expm(A * ts)
    gamma = np.linalg.solve(A, (phi - np.eye(2)) @ b)
    return DiscretePlant(A=phi, b=gamma, c=c, delay_steps=d, ts=ts)


def initial_buffer(plant: DiscretePlant) -> np.ndarray:
    return np.zeros(plant.delay_steps)


def plant_step(
    plant: DiscretePlant, x: np.ndarray, buffer: np.ndarray, u: float
) -> tuple[np.ndarray, np.ndarray]:
    """Advance one sample.  ``buffer`` holds pending inputs, oldest first."""
    if plant.delay_steps == 0:
        return plant.A @ x + plant.b * u, buffer
    u_delayed = buffer[0]
    new_buffer = np.empty_like(buffer)
    new_buffer[:-1] = buffer[1:]
    new_buffer[-1] = u
    return plant.A @ x + plant.b * u_delayed, new_buffer


def sample_context(spec: TruncatedNormalSpec, rng: int | np.random.Generator | None = None) -> Context:
    """Draw one context from the componentwise truncated normal."""
    gen = as_generator(rng)
    return Context.from_array(sample_truncated_normal(spec, 1, gen)[0])


def sample_truncated_normal(
    spec: TruncatedNormalSpec, n: int, rng: int | np.random.Generator | None = None
) -> np.ndarray:
    gen = as_generator(rng)
    mu = np.asarray(spec.mean, dtype=float)
    lo = np.asarray(spec.lower, dtype=float)
    hi = np.asarray(spec.upper, dtype=float)
    out = np.empty((n, mu.size))
    if spec.std == 0:
        # point mass at the mean
        out[:] = mu
        return out
    for j in range(mu.size):
        a, b = (lo[j] - mu[j]) / spec.std, (hi[j] - mu[j]) / spec.std
        mass = norm.cdf(b) - norm.cdf(a)
        if mass < _MIN_ACCEPTANCE:
            u = gen.random(n)
            out[:, j] = truncnorm.ppf(u, a, b, loc=mu[j], scale=spec.std)
            continue
        filled = 0
        while filled < n:
            batch = max(16, int(1.2 * (n - filled) / mass) + 8)
            draws = mu[j] + spec.std * gen.standard_normal(batch)
            keep = draws[(draws >= lo[j]) & (draws <= hi[j])][: n - filled]
            out[filled : filled + keep.size, j] = keep
            filled += keep.size
    return out


def latin_hypercube(
    n: int,
    bounds: np.ndarray | Sequence[Sequence[float]],
    integer_mask: Sequence[bool] | None = None,
    rng: int | np.random.Generator | None = None,
) -> np.ndarray:
    """Latin hypercube design of ``n`` points over a box.

    Integer dimensions are stratified over ``[lo - 0.5, hi + 0.5)`` and then
    rounded, which gives every admissible integer equal weight.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    gen = as_generator(rng)
    bounds = np.asarray(bounds, dtype=float)
    if not np.all(np.isfinite(bounds)):
        raise ValueError("bounds must be finite")
    dim = bounds.shape[0]
    mask = np.zeros(dim, dtype=bool) if integer_mask is None else np.asarray(integer_mask, dtype=bool)
    lo = bounds[:, 0].copy()
    hi = bounds[:, 1].copy()
    lo[mask] -= 0.5
    hi[mask] += 0.5
    strata = np.column_stack([gen.permutation(n) for _ in range(dim)])
    unit = (strata + gen.random((n, dim))) / n
    points = lo + unit * (hi - lo)
    if mask.any():
        points[:, mask] = np.clip(np.rint(points[:, mask]), bounds[mask, 0], bounds[mask, 1])
    return points
