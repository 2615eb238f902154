"""Gaussian process surrogates on the unit box.

Kernel: squared exponential with one lengthscale per input (ARD) and a
constant prior mean.  Observations are either Gaussian (``gp_fit``) or
Student-t (``robust_fit_student_t``, Laplace approximation), the latter being
used only to flag outliers.

Repeated inputs are collapsed to their sample mean with noise ``s2 / n``
plus an exact correction term for the spread within each group, so a
dataset with 5 replicates per input costs the same as one without.

Hyperparameters are optimized in log space::

    theta = [m, log sf2, log l_1, ..., log l_D, log sn2]
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.special import gammaln

from .dynamics import latin_hypercube
from .rng import as_generator

_JITTER_START = 1e-10
_JITTER_MAX = 1e-6
_LOG_2PI = float(np.log(2.0 * np.pi))


# --------------------------------------------------------------------------
# Normalization


def normalize(x: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    """Map points from the box ``bounds`` (shape ``(D, 2)``) to ``[0, 1]^D``."""
    bounds = np.asarray(bounds, dtype=float)
    return (np.asarray(x, dtype=float) - bounds[:, 0]) / (bounds[:, 1] - bounds[:, 0])


def denormalize(u: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    bounds = np.asarray(bounds, dtype=float)
    return bounds[:, 0] + np.asarray(u, dtype=float) * (bounds[:, 1] - bounds[:, 0])


# --------------------------------------------------------------------------
# Hyperparameters and priors


@dataclass(frozen=True)
class GpHyperparams:
    mean: float
    signal_var: float
    lengthscales: np.ndarray
    noise_var: float

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        if not self.signal_var > 0:
            raise ValueError(f"signal variance must be positive, got {self.signal_var}")
        if self.noise_var < 0:
            raise ValueError(f"noise variance must be non-negative, got {self.noise_var}")
        if np.any(ls <= 0):
            raise ValueError("lengthscales must be positive")

    @property
    def dim(self) -> int:
        return self.lengthscales.size

    def to_vector(self) -> np.ndarray:
        """``[m, log sf2, log l_1..l_D, log sn2]``; requires ``noise_var > 0``."""
        return np.concatenate([[self.mean, np.log(self.signal_var)], np.log(self.lengthscales), [np.log(self.noise_var)]])

    @classmethod
    def from_vector(cls, theta: np.ndarray) -> "GpHyperparams":
        theta = np.asarray(theta, dtype=float)
        return cls(
            mean=float(theta[0]),
            signal_var=float(np.exp(theta[1])),
            lengthscales=np.exp(theta[2:-1]),
            noise_var=float(np.exp(theta[-1])),
        )

    def as_dict(self) -> dict:
        return {
            "mean": self.mean,
            "signal_var": self.signal_var,
            "lengthscales": [float(v) for v in self.lengthscales],
            "noise_var": self.noise_var,
        }


@dataclass(frozen=True)
class Hyperpriors:
    """Log-normal hyperpriors and box bounds.

    Variances are expressed relative to the sample variance of the targets,
    lengthscales in normalized input units.  ``min_lengthscale`` may be a
    scalar or one value per input dimension.
    """

    lengthscale_center: float = 0.3
    lengthscale_log_std: float = 1.0
    signal_log_std: float = 1.5
    noise_fraction: float = 0.01
    noise_log_std: float = 2.0
    min_lengthscale: float | tuple[float, ...] = 0.05
    max_lengthscale: float = 10.0
    min_noise_fraction: float = 1e-8
    max_noise_fraction: float = 1.0
    min_signal_fraction: float = 1e-6
    max_signal_fraction: float = 1e2

    def lengthscale_bounds(self, dim: int) -> np.ndarray:
        lo = np.broadcast_to(np.asarray(self.min_lengthscale, dtype=float), (dim,)).copy()
        if np.any(lo <= 0) or np.any(lo >= self.max_lengthscale):
            raise ValueError("lengthscale bounds must satisfy 0 < min < max")
        return np.column_stack([lo, np.full(dim, self.max_lengthscale)])


def _target_scale(Y: np.ndarray) -> float:
    var = float(np.var(Y))
    return var if var > 1e-300 else 1.0


def log_prior(theta: np.ndarray, priors: Hyperpriors, scale: float) -> tuple[float, np.ndarray]:
    """Log-density (up to a constant) of the log-normal hyperpriors and its gradient."""
    centers = np.concatenate(
        [
            [np.log(scale)],
            np.full(theta.size - 3, np.log(priors.lengthscale_center)),
            [np.log(priors.noise_fraction * scale)],
        ]
    )
    stds = np.concatenate(
        [[priors.signal_log_std], np.full(theta.size - 3, priors.lengthscale_log_std), [priors.noise_log_std]]
    )
    z = (theta[1:] - centers) / stds
    grad = np.zeros_like(theta)
    grad[1:] = -z / stds
    return float(-0.5 * z @ z), grad


def log_bounds(priors: Hyperpriors, dim: int, scale: float) -> list[tuple[float | None, float | None]]:
    """Bounds on the log vector for targets whose variance is ``scale``."""
    ls = priors.lengthscale_bounds(dim)
    bounds: list[tuple[float | None, float | None]] = [(None, None)]
    bounds.append((np.log(priors.min_signal_fraction * scale), np.log(priors.max_signal_fraction * scale)))
    bounds.extend((float(np.log(lo)), float(np.log(hi))) for lo, hi in ls)
    bounds.append((np.log(priors.min_noise_fraction * scale), np.log(priors.max_noise_fraction * scale)))
    return bounds


# --------------------------------------------------------------------------
# Kernel and replicate grouping


def sq_dist_per_dim(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Array ``D[d, i, j] = (A[i, d] - B[j, d])**2``."""
    return (A.T[:, :, None] - B.T[:, None, :]) ** 2


def se_kernel(A: np.ndarray, B: np.ndarray, signal_var: float, lengthscales: np.ndarray) -> np.ndarray:
    A = np.atleast_2d(A) / lengthscales
    B = np.atleast_2d(B) / lengthscales
    d2 = np.sum(A * A, 1)[:, None] + np.sum(B * B, 1)[None, :] - 2.0 * A @ B.T
    return signal_var * np.exp(-0.5 * np.maximum(d2, 0.0))


@dataclass(frozen=True)
class _Groups:
    X: np.ndarray  # unique inputs
    ybar: np.ndarray  # group means
    counts: np.ndarray
    spread: np.ndarray  # within-group sum of squared deviations
    index: np.ndarray  # group of each original observation


def group_replicates(X: np.ndarray, Y: np.ndarray) -> _Groups:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float).ravel()
    if X.shape[0] != Y.size:
        raise ValueError(f"X has {X.shape[0]} rows but Y has {Y.size} entries")
    uniq, first, inverse = np.unique(X, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    # keep groups in order of first appearance so results do not depend on sorting
    order = np.argsort(first, kind="stable")
    relabel = np.empty_like(order)
    relabel[order] = np.arange(order.size)
    inverse = relabel[inverse]
    uniq = uniq[order]
    counts = np.bincount(inverse, minlength=uniq.shape[0]).astype(float)
    ybar = np.bincount(inverse, weights=Y, minlength=uniq.shape[0]) / counts
    spread = np.bincount(inverse, weights=(Y - ybar[inverse]) ** 2, minlength=uniq.shape[0])
    return _Groups(uniq, ybar, counts, spread, inverse)


# --------------------------------------------------------------------------
# Marginal likelihood


def log_marginal_likelihood(
    hyper: GpHyperparams | np.ndarray, X: np.ndarray, Y: np.ndarray, grad: bool = True
) -> tuple[float, np.ndarray] | float:
    """Exact log marginal likelihood of the Gaussian model.

    ``hyper`` may be a :class:`GpHyperparams` or its log vector; the gradient
    is returned with respect to that vector.
    """
    theta = hyper.to_vector() if isinstance(hyper, GpHyperparams) else np.asarray(hyper, dtype=float)
    g = group_replicates(X, Y)
    value, gradient = _lml(theta, g)
    return (value, gradient) if grad else value


def _lml(theta: np.ndarray, g: _Groups) -> tuple[float, np.ndarray]:
    m = theta[0]
    sf2 = np.exp(theta[1])
    ls = np.exp(theta[2:-1])
    sn2 = np.exp(theta[-1])
    n = g.ybar.size
    Kf = se_kernel(g.X, g.X, sf2, ls)
    noise_diag = sn2 / g.counts
    Ky = Kf + np.diag(noise_diag)
    try:
        L = cholesky(Ky, lower=True)
    except LinAlgError:
        return -np.inf, np.zeros_like(theta)
    r = g.ybar - m
    alpha = cho_solve((L, True), r)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    n_within = g.counts - 1.0
    value = -0.5 * r @ alpha - 0.5 * logdet - 0.5 * n * _LOG_2PI
    value += float(np.sum(-0.5 * n_within * (_LOG_2PI + np.log(sn2)) - 0.5 * np.log(g.counts) - 0.5 * g.spread / sn2))

    Kinv = cho_solve((L, True), np.eye(n))
    M = np.outer(alpha, alpha) - Kinv  # d lml / d Ky = M / 2
    gradient = np.empty_like(theta)
    gradient[0] = np.sum(alpha)
    gradient[1] = 0.5 * np.sum(M * Kf)
    D = sq_dist_per_dim(g.X, g.X)
    for d in range(ls.size):
        gradient[2 + d] = 0.5 * np.sum(M * Kf * D[d] / ls[d] ** 2)
    gradient[-1] = 0.5 * np.sum(np.diag(M) * noise_diag) + float(np.sum(-0.5 * n_within + 0.5 * g.spread / sn2))
    return float(value), gradient


# --------------------------------------------------------------------------
# Model


class GpPrediction(NamedTuple):
    mean: np.ndarray
    var: np.ndarray  # predictive, includes observation noise
    latent_var: np.ndarray


@dataclass(frozen=True)
class GpModel:
    """Fitted GP; immutable.  ``X_train``/``Y_train`` are the raw observations."""

    X_train: np.ndarray
    Y_train: np.ndarray
    hyper: GpHyperparams
    X: np.ndarray = field(repr=False)  # unique inputs
    y: np.ndarray = field(repr=False)  # group means
    counts: np.ndarray = field(repr=False)
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    jitter: float = 0.0
    log_likelihood: float = float("nan")

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def variance_floor(self) -> float:
        """Latent variances at or below this are numerical residue and read as 0."""
        return 10.0 * (self.jitter + 1e-12 * self.hyper.signal_var)

    def predict(self, Xq: np.ndarray) -> GpPrediction:
        return gp_predict(self, Xq)


def condition(X: np.ndarray, Y: np.ndarray, hyper: GpHyperparams, log_likelihood: float = float("nan")) -> GpModel:
    """Build the posterior for fixed hyperparameters (jitter only if needed)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float).ravel()
    g = group_replicates(X, Y)
    K = se_kernel(g.X, g.X, hyper.signal_var, hyper.lengthscales) + np.diag(hyper.noise_var / g.counts)
    jitter = 0.0
    while True:
        try:
            L = cholesky(K + jitter * np.eye(K.shape[0]), lower=True)
            break
        except LinAlgError:
            jitter = _JITTER_START * hyper.signal_var if jitter == 0.0 else jitter * 10.0
            if jitter > _JITTER_MAX * hyper.signal_var * (1 + 1e-9):
                raise LinAlgError("kernel matrix is not positive definite even with maximal jitter")
    alpha = cho_solve((L, True), g.ybar - hyper.mean)
    return GpModel(X, Y, hyper, g.X, g.ybar, g.counts, L, alpha, jitter, log_likelihood)


def gp_predict(model: GpModel, Xq: np.ndarray) -> GpPrediction:
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    h = model.hyper
    Ks = se_kernel(Xq, model.X, h.signal_var, h.lengthscales)
    mean = h.mean + Ks @ model.alpha
    v = solve_triangular(model.chol, Ks.T, lower=True)
    latent = h.signal_var - np.sum(v * v, axis=0)
    latent = np.where(latent <= model.variance_floor(), 0.0, latent)
    return GpPrediction(mean, latent + h.noise_var, latent)


def gp_fit(
    X: np.ndarray,
    Y: np.ndarray,
    priors: Hyperpriors | None = None,
    restarts: int = 8,
    rng: int | np.random.Generator | None = 0,
    fixed_noise: float | None = None,
) -> GpModel:
    """Maximum a posteriori hyperparameters from multi-start L-BFGS-B.

    Starts are the prior centers plus ``restarts - 1`` Latin hypercube
    points in the (bounded) log-hyperparameter box.  With ``fixed_noise`` the
    noise variance is held at that value (``0`` gives an interpolating GP).
    """
    priors = priors or Hyperpriors()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float).ravel()
    if X.shape[0] < 2:
        raise ValueError("need at least 2 observations to fit a GP")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("training data must be finite")
    dim = X.shape[1]
    g = group_replicates(X, Y)
    scale = _target_scale(Y)
    std = np.sqrt(scale)
    ybar = float(np.mean(Y))
    bounds = log_bounds(priors, dim, scale)
    if fixed_noise is not None:
        noise_floor = max(fixed_noise, 1e-12 * scale)
        bounds[-1] = (np.log(noise_floor), np.log(noise_floor))

    def objective(z):
        theta = z.copy()
        theta[0] = ybar + std * z[0]
        value, grad = _lml(theta, g)
        lp, lp_grad = log_prior(theta, priors, scale)
        if not np.isfinite(value):
            return 1e25, np.zeros_like(z)
        total = value + lp
        grad = grad + lp_grad
        grad[0] *= std
        return -total, -grad

    starts = [np.concatenate([[0.0, np.log(scale)], np.full(dim, np.log(priors.lengthscale_center)),
                              [np.log(priors.noise_fraction * scale)]])]
    if restarts > 1:
        box = np.array([b if b[0] is not None else (-1.0, 1.0) for b in bounds], dtype=float)
        box[1] = [np.log(1e-2 * scale), np.log(1e1 * scale)]
        box[-1] = [max(bounds[-1][0], np.log(1e-4 * scale)), bounds[-1][1]]
        starts.extend(latin_hypercube(restarts - 1, box, rng=as_generator(rng)))
    best = None
    for z0 in starts:
        z0 = np.clip(z0, [b[0] if b[0] is not None else -np.inf for b in bounds],
                     [b[1] if b[1] is not None else np.inf for b in bounds])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = minimize(objective, z0, jac=True, method="L-BFGS-B", bounds=bounds)
        if best is None or res.fun < best.fun:
            best = res
    theta = best.x.copy()
    theta[0] = ybar + std * best.x[0]
    hyper = GpHyperparams.from_vector(theta)
    if fixed_noise is not None:
        hyper = replace(hyper, noise_var=float(fixed_noise))
    return condition(X, Y, hyper, log_likelihood=-float(best.fun))


# --------------------------------------------------------------------------
# Student-t robust regression


def student_t_logpdf(r: np.ndarray, scale: float, nu: float) -> np.ndarray:
    """Log-density of residuals ``r`` under a zero-centered Student-t."""
    return (
        gammaln(0.5 * (nu + 1.0)) - gammaln(0.5 * nu) - 0.5 * np.log(nu * np.pi * scale**2)
        - 0.5 * (nu + 1.0) * np.log1p(r**2 / (nu * scale**2))
    )


def outlier_threshold(scale: float, nu: float, z: float = 3.0) -> float:
    """Log-density of a residual ``z * scale`` away from the latent value."""
    return float(student_t_logpdf(np.array(z * scale), scale, nu))


class LaplaceResult(NamedTuple):
    f_hat: np.ndarray
    log_evidence: float
    converged: bool
    iterations: int


def laplace_mode(K: np.ndarray, y: np.ndarray, mean: float, scale: float, nu: float, max_iter: int = 100,
                 tol: float = 1e-9) -> LaplaceResult:
    """Newton iteration for the posterior mode of the latent values.

    Follows the standard stable formulation with ``B = I + W^1/2 K W^1/2``.
    Negative curvature of the Student-t likelihood is clipped to zero in
    ``W`` and each step is damped by backtracking on the objective.
    """
    n = y.size
    s2nu = nu * scale**2

    def psi(a, f):
        return -0.5 * a @ (f - mean) + float(np.sum(student_t_logpdf(y - f, scale, nu)))

    a = np.zeros(n)
    f = np.full(n, mean)
    obj = psi(a, f)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        r = y - f
        dlp = (nu + 1.0) * r / (s2nu + r**2)
        W = np.maximum((nu + 1.0) * (s2nu - r**2) / (s2nu + r**2) ** 2, 0.0)
        sW = np.sqrt(W)
        B = np.eye(n) + sW[:, None] * K * sW[None, :]
        L = cholesky(B, lower=True)
        b = W * (f - mean) + dlp
        c = cho_solve((L, True), sW * (K @ b))
        a_new = b - sW * c
        da = a_new - a
        step = 1.0
        for _ in range(30):
            a_try = a + step * da
            f_try = K @ a_try + mean
            obj_try = psi(a_try, f_try)
            if obj_try >= obj - 1e-12:
                break
            step *= 0.5
        gain = obj_try - obj
        a, f, obj = a_try, f_try, obj_try
        if abs(gain) < tol * max(1.0, abs(obj)):
            converged = True
            break
    r = y - f
    W = np.maximum((nu + 1.0) * (s2nu - r**2) / (s2nu + r**2) ** 2, 0.0)
    sW = np.sqrt(W)
    B = np.eye(n) + sW[:, None] * K * sW[None, :]
    sign, logdet = np.linalg.slogdet(B)
    evidence = obj - 0.5 * logdet if sign > 0 else -np.inf
    return LaplaceResult(f, float(evidence), converged, it)


@dataclass(frozen=True)
class RobustFit:
    latent_mean: np.ndarray  # posterior mode of f at the training inputs
    log_likelihoods: np.ndarray  # per-observation log t(y_i | f_i, scale)
    threshold: float
    scale: float
    nu: float
    hyper: GpHyperparams  # noise_var holds scale**2
    converged: bool


@dataclass(frozen=True)
class OutlierLabels:
    flags: np.ndarray
    log_likelihoods: np.ndarray
    threshold: float
    fallback: bool = False

    @property
    def count(self) -> int:
        return int(np.sum(self.flags))


def robust_fit_student_t(
    X: np.ndarray,
    Y: np.ndarray,
    nu: float = 4.0,
    rng: int | np.random.Generator | None = 0,
    priors: Hyperpriors | None = None,
    restarts: int = 3,
    threshold_z: float = 3.0,
) -> RobustFit | None:
    """Laplace-approximated GP with a Student-t observation model.

    The prior mean is fixed at the median of ``Y``.  Kernel variance,
    lengthscales and the Student-t scale maximize the approximate evidence
    plus the log hyperprior.  Returns ``None`` when the Newton iteration does
    not converge, so the caller can fall back to a Gaussian model.
    """
    priors = priors or Hyperpriors()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float).ravel()
    n, dim = X.shape
    if n < 5:
        raise ValueError("robust fit needs at least 5 observations")
    if not nu > 0:
        raise ValueError("degrees of freedom must be positive")
    med = float(np.median(Y))
    # robust spread estimate keeps the outliers from inflating the prior scale
    mad = float(np.median(np.abs(Y - med))) * 1.4826
    scale_var = mad**2 if mad > 0 else _target_scale(Y)
    bounds = log_bounds(priors, dim, scale_var)[1:]
    D = sq_dist_per_dim(X, X)

    def unpack(z):
        return np.exp(z[0]), np.exp(z[1:-1]), np.exp(0.5 * z[-1])

    def kernel(sf2, ls):
        return sf2 * np.exp(-0.5 * np.sum(D / ls[:, None, None] ** 2, axis=0)) + 1e-10 * sf2 * np.eye(n)

    def objective(z):
        sf2, ls, sc = unpack(z)
        res = laplace_mode(kernel(sf2, ls), Y, med, sc, nu)
        theta = np.concatenate([[med], z])
        lp, _ = log_prior(theta, priors, scale_var)
        val = res.log_evidence + lp
        return -val if np.isfinite(val) else 1e25

    starts = [np.concatenate([[np.log(scale_var)], np.full(dim, np.log(priors.lengthscale_center)),
                              [np.log(priors.noise_fraction * scale_var)]])]
    if restarts > 1:
        box = np.array(bounds, dtype=float)
        box[0] = [np.log(1e-1 * scale_var), np.log(1e1 * scale_var)]
        box[-1] = [np.log(1e-3 * scale_var), np.log(scale_var)]
        starts.extend(latin_hypercube(restarts - 1, box, rng=as_generator(rng)))
    best = None
    for z0 in starts:
        z0 = np.clip(z0, [b[0] for b in bounds], [b[1] for b in bounds])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = minimize(objective, z0, method="L-BFGS-B", bounds=bounds, options={"maxiter": 200})
        if best is None or res.fun < best.fun:
            best = res
    sf2, ls, sc = unpack(best.x)
    mode = laplace_mode(kernel(sf2, ls), Y, med, sc, nu)
    if not mode.converged:
        return None
    loglik = student_t_logpdf(Y - mode.f_hat, sc, nu)
    hyper = GpHyperparams(mean=med, signal_var=float(sf2), lengthscales=ls, noise_var=float(sc**2))
    return RobustFit(mode.f_hat, loglik, outlier_threshold(sc, nu, threshold_z), float(sc), float(nu), hyper, True)


def detect_outliers(
    X: np.ndarray,
    Y: np.ndarray,
    threshold: float | None = None,
    nu: float = 4.0,
    rng: int | np.random.Generator | None = 0,
    priors: Hyperpriors | None = None,
    threshold_z: float = 3.0,
) -> OutlierLabels:
    """Flag observations whose robust log-likelihood falls below ``threshold``.

    The default threshold is the Student-t log-density at a standardized
    residual ``|y - f| / scale = threshold_z``.  If the robust
    fit fails to converge nothing is flagged and ``fallback`` is set.
    """
    Y = np.asarray(Y, dtype=float).ravel()
    fit = robust_fit_student_t(X, Y, nu=nu, rng=rng, priors=priors, threshold_z=threshold_z)
    if fit is None:
        warnings.warn("robust GP did not converge; no outliers flagged", RuntimeWarning, stacklevel=2)
        return OutlierLabels(np.zeros(Y.size, dtype=bool), np.full(Y.size, np.nan), float("nan"), fallback=True)
    thr = fit.threshold if threshold is None else float(threshold)
    return OutlierLabels(fit.log_likelihoods < thr, fit.log_likelihoods, thr)


def noise_free(model: GpModel) -> bool:
    return model.hyper.noise_var == 0.0


def training_means(model: GpModel) -> np.ndarray:
    """Posterior mean at the unique training inputs."""
    return gp_predict(model, model.X).mean


def kernel_distance(A: np.ndarray, B: np.ndarray, lengthscales: Sequence[float]) -> np.ndarray:
    """``sqrt(2 - 2 k(a, b) / sf2)``, the feature-space distance of a unit SE kernel."""
    k = se_kernel(A, B, 1.0, np.asarray(lengthscales, dtype=float))
    return np.sqrt(np.maximum(2.0 - 2.0 * k, 0.0))
