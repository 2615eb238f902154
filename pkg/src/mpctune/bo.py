"""Single-stage constrained Bayesian optimization (minimization).

One iteration fits GPs on the cleaned data, reinterpolates the objective
GP, builds two nearest-neighbour classifiers (outliers, failures) and
maximizes::

    alpha(x) = RI(x) * p_feas(x) * (1 - p_out(x)) * (1 - p_fail(x))

with a particle swarm over the (mixed-integer) parameter box.  All GPs
live on the unit box; the swarm flies in raw coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import norm

from . import gp
from .dynamics import latin_hypercube
from .rng import as_generator, derive_seed


# --------------------------------------------------------------------------
# Search space


@dataclass(frozen=True)
class SearchSpace:
    """Box with integer dimensions.

    ``project`` optionally maps a rounded, clipped point onto the admissible
    set (e.g. enforcing an ordering between two dimensions).
    """

    bounds: np.ndarray
    integer_mask: tuple[bool, ...]
    names: tuple[str, ...] = ()
    project: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=float)
        if b.ndim != 2 or b.shape[1] != 2:
            raise ValueError("bounds must have shape (D, 2)")
        if not np.all(np.isfinite(b)) or np.any(b[:, 0] >= b[:, 1]):
            raise ValueError("bounds must be finite with lower < upper")
        object.__setattr__(self, "bounds", b)
        mask = tuple(bool(m) for m in self.integer_mask)
        if len(mask) != b.shape[0]:
            raise ValueError("integer_mask length differs from number of dimensions")
        object.__setattr__(self, "integer_mask", mask)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"x{i}" for i in range(b.shape[0])))

    @property
    def dim(self) -> int:
        return self.bounds.shape[0]

    def canonical(self, x: np.ndarray) -> np.ndarray:
        """Clip, round integer dimensions and project (works row-wise)."""
        x = np.clip(np.asarray(x, dtype=float), self.bounds[:, 0], self.bounds[:, 1])
        mask = np.asarray(self.integer_mask)
        if mask.any():
            x = x.copy()
            x[..., mask] = np.rint(x[..., mask])
        if self.project is not None:
            x = self.project(x)
        return x

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return gp.normalize(x, self.bounds)

    def denormalize(self, u: np.ndarray) -> np.ndarray:
        return gp.denormalize(u, self.bounds)

    def sample_lhs(self, n: int, rng) -> np.ndarray:
        return self.canonical(latin_hypercube(n, self.bounds, self.integer_mask, rng))

    def sample_uniform(self, n: int, rng) -> np.ndarray:
        gen = as_generator(rng)
        lo = self.bounds[:, 0].copy()
        hi = self.bounds[:, 1].copy()
        mask = np.asarray(self.integer_mask)
        lo[mask] -= 0.5
        hi[mask] += 0.5
        return self.canonical(lo + gen.random((n, self.dim)) * (hi - lo))


# --------------------------------------------------------------------------
# Data


@dataclass
class Observation:
    """One evaluation: objective samples and per-constraint samples."""

    x: np.ndarray
    y: np.ndarray
    g: tuple[np.ndarray, ...] = ()
    failed: bool = False
    outlier: bool = False

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.atleast_1d(np.asarray(self.y, dtype=float))
        self.g = tuple(np.atleast_1d(np.asarray(v, dtype=float)) for v in self.g)

    @property
    def clean(self) -> bool:
        return not (self.failed or self.outlier)


@dataclass
class Dataset:
    observations: list[Observation] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.observations)

    def append(self, obs: Observation) -> None:
        self.observations.append(obs)

    @property
    def X(self) -> np.ndarray:
        return np.array([o.x for o in self.observations])

    @property
    def failed(self) -> np.ndarray:
        return np.array([o.failed for o in self.observations], dtype=bool)

    @property
    def outliers(self) -> np.ndarray:
        return np.array([o.outlier for o in self.observations], dtype=bool)

    def clean(self) -> list[Observation]:
        return [o for o in self.observations if o.clean]

    def stacked(self, which: int | None = None, observations: Sequence[Observation] | None = None):
        """Replicate-expanded ``(X, values)``; ``which=None`` is the objective."""
        obs = self.clean() if observations is None else list(observations)
        xs, ys = [], []
        for o in obs:
            v = o.y if which is None else o.g[which]
            xs.append(np.repeat(o.x[None, :], v.size, axis=0))
            ys.append(v)
        if not xs:
            return np.empty((0, self.observations[0].x.size if self.observations else 0)), np.empty(0)
        return np.vstack(xs), np.concatenate(ys)

    def to_records(self) -> list[dict]:
        """Plain lists and floats; round-trips exactly through JSON."""
        return [{"x": o.x.tolist(), "y": o.y.tolist(), "g": [v.tolist() for v in o.g],
                 "failed": o.failed, "outlier": o.outlier} for o in self.observations]

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> "Dataset":
        return cls([Observation(r["x"], r["y"], tuple(r["g"]), bool(r["failed"]), bool(r["outlier"]))
                    for r in records])


# --------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class ConstraintSpec:
    """``response < limit``.

    ``kind="latent"`` uses the latent GP variance; ``kind="predictive"``
    requires ``mu + z * sigma_pred < limit`` and scores it as
    ``Phi((limit - mu) / sigma_pred - z)``.
    """

    name: str
    limit: float
    kind: str = "latent"
    z: float = 0.0

    def __post_init__(self):
        if self.kind not in ("latent", "predictive"):
            raise ValueError(f"unknown constraint kind {self.kind!r}")


@dataclass(frozen=True)
class BoConfig:
    constraints: tuple[ConstraintSpec, ...] = ()
    outlier_detection: bool = True
    classifiers: bool = True
    knn_k: int = 5
    swarm_size: int = 60
    pso_iters: int = 80
    gp_restarts: int = 8
    priors: gp.Hyperpriors = gp.Hyperpriors()
    nu: float = 4.0
    outlier_z: float = 3.0
    min_outlier_points: int = 5


# --------------------------------------------------------------------------
# Acquisition components


def reinterpolate(model: gp.GpModel) -> gp.GpModel:
    """Interpolating GP through the posterior means at the training inputs."""
    means = gp.training_means(model)
    return gp.condition(model.X, means, replace(model.hyper, noise_var=0.0))


def expected_improvement(mu, s, best) -> np.ndarray:
    """Closed-form EI for minimization; ``s`` is a standard deviation."""
    mu, s, best = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (mu, s, best)))
    if np.any(s < 0):
        raise ValueError("standard deviation must be non-negative")
    shape = mu.shape
    mu, s, best = (np.ravel(v) for v in (mu, s, best))
    out = np.maximum(best - mu, 0.0)
    pos = s > 0
    z = (best[pos] - mu[pos]) / s[pos]
    out[pos] = (best[pos] - mu[pos]) * norm.cdf(z) + s[pos] * norm.pdf(z)
    return np.maximum(out, 0.0).reshape(shape)


def ri_value(ri_model: gp.GpModel, Xq: np.ndarray) -> np.ndarray:
    """EI on the reinterpolated model; the incumbent is its lowest training mean."""
    pred = gp.gp_predict(ri_model, Xq)
    return expected_improvement(pred.mean, np.sqrt(pred.latent_var), np.min(ri_model.y))


def constraint_probability(model: gp.GpModel, spec: ConstraintSpec, Xq: np.ndarray) -> np.ndarray:
    pred = gp.gp_predict(model, Xq)
    if spec.kind == "latent":
        s = np.sqrt(pred.latent_var)
        shift = 0.0
    else:
        s = np.sqrt(pred.var)
        shift = spec.z
    diff = spec.limit - pred.mean
    with np.errstate(divide="ignore", invalid="ignore"):
        p = norm.cdf(diff / s - shift)
    exact = np.where(diff > 0, 1.0, np.where(diff < 0, 0.0, 0.5 if shift == 0 else 0.0))
    return np.where(s > 0, p, exact)


def prob_feasibility(models: Sequence[gp.GpModel], specs: Sequence[ConstraintSpec], Xq: np.ndarray) -> np.ndarray:
    Xq = np.atleast_2d(Xq)
    p = np.ones(Xq.shape[0])
    for model, spec in zip(models, specs):
        p = p * constraint_probability(model, spec, Xq)
    return p


def inverse_square_vote(distances, labels) -> float:
    """Inverse-square-distance weighted mean of binary labels."""
    d = np.asarray(distances, dtype=float)
    lab = np.asarray(labels, dtype=float)
    if d.size == 0:
        return 0.0
    zero = d == 0
    if np.any(zero):
        return float(np.mean(lab[zero]))
    w = 1.0 / d**2
    return float(np.sum(w * lab) / np.sum(w))


@dataclass(frozen=True)
class KnnClassifier:
    points: np.ndarray  # normalized inputs
    labels: np.ndarray
    lengthscales: np.ndarray
    k: int = 5

    def __post_init__(self):
        object.__setattr__(self, "points", np.atleast_2d(np.asarray(self.points, dtype=float)))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=bool).ravel())
        object.__setattr__(self, "lengthscales", np.asarray(self.lengthscales, dtype=float))
        if self.k < 1:
            raise ValueError("k must be at least 1")

    def prob(self, Xq: np.ndarray) -> np.ndarray:
        return knn_prob(self, Xq)


def knn_prob(clf: KnnClassifier, Xq: np.ndarray) -> np.ndarray:
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    n = clf.labels.size
    if n == 0 or not clf.labels.any():
        return np.zeros(Xq.shape[0])
    k = min(clf.k, n)
    dist = gp.kernel_distance(Xq, clf.points, clf.lengthscales)
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    out = np.empty(Xq.shape[0])
    for i in range(Xq.shape[0]):
        idx = nearest[i]
        out[i] = inverse_square_vote(dist[i, idx], clf.labels[idx])
    return out


@dataclass(frozen=True)
class AcquisitionContext:
    ri_model: gp.GpModel
    constraint_models: tuple[gp.GpModel, ...] = ()
    constraints: tuple[ConstraintSpec, ...] = ()
    outlier_clf: KnnClassifier | None = None
    failure_clf: KnnClassifier | None = None


def acquisition_components(ctx: AcquisitionContext, Xq: np.ndarray) -> dict[str, np.ndarray]:
    Xq = np.atleast_2d(Xq)
    zeros = np.zeros(Xq.shape[0])
    return {
        "ri": ri_value(ctx.ri_model, Xq),
        "p_feas": prob_feasibility(ctx.constraint_models, ctx.constraints, Xq),
        "p_out": ctx.outlier_clf.prob(Xq) if ctx.outlier_clf is not None else zeros,
        "p_fail": ctx.failure_clf.prob(Xq) if ctx.failure_clf is not None else zeros,
    }


def combine(components: dict[str, np.ndarray]) -> np.ndarray:
    return components["ri"] * components["p_feas"] * (1.0 - components["p_out"]) * (1.0 - components["p_fail"])


def acquisition(ctx: AcquisitionContext, Xq: np.ndarray) -> np.ndarray:
    return combine(acquisition_components(ctx, Xq))


# --------------------------------------------------------------------------
# Particle swarm

PSO_INERTIA = 0.72
PSO_COGNITIVE = 1.49
PSO_SOCIAL = 1.49


def pso_maximize(
    f: Callable[[np.ndarray], np.ndarray],
    bounds: np.ndarray,
    integer_mask: Sequence[bool] | None = None,
    swarm_size: int = 60,
    iters: int = 80,
    rng=None,
    transform: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[np.ndarray, float]:
    """Maximize a vectorized ``f`` over a box by particle swarm.

    Particles fly continuously; ``transform`` (default: round integer
    dimensions) is applied only when evaluating.  Ties are broken towards
    the lowest particle index.
    """
    gen = as_generator(rng)
    bounds = np.asarray(bounds, dtype=float)
    lo, hi = bounds[:, 0], bounds[:, 1]
    dim = lo.size
    mask = np.zeros(dim, dtype=bool) if integer_mask is None else np.asarray(integer_mask, dtype=bool)
    if transform is None:
        def transform(x):
            x = np.clip(x, lo, hi)
            x[..., mask] = np.rint(x[..., mask])
            return x
    span = hi - lo
    x = lo + gen.random((swarm_size, dim)) * span
    v = (gen.random((swarm_size, dim)) - 0.5) * 0.2 * span
    px = x.copy()
    pval = np.asarray(f(transform(x.copy())), dtype=float)
    pval = np.where(np.isfinite(pval), pval, -np.inf)
    g = int(np.argmax(pval))
    gx, gval = px[g].copy(), pval[g]
    for _ in range(iters):
        r1 = gen.random((swarm_size, dim))
        r2 = gen.random((swarm_size, dim))
        v = PSO_INERTIA * v + PSO_COGNITIVE * r1 * (px - x) + PSO_SOCIAL * r2 * (gx - x)
        v = np.clip(v, -span, span)
        x = np.clip(x + v, lo, hi)
        val = np.asarray(f(transform(x.copy())), dtype=float)
        val = np.where(np.isfinite(val), val, -np.inf)
        better = val > pval
        px[better] = x[better]
        pval[better] = val[better]
        g = int(np.argmax(pval))
        if pval[g] > gval:
            gx, gval = px[g].copy(), pval[g]
    return transform(gx.copy()), float(gval)


# --------------------------------------------------------------------------
# One BO iteration


@dataclass
class Surrogates:
    """Models fitted on the cleaned data of one iteration."""

    objective: gp.GpModel | None
    ri: gp.GpModel | None
    constraints: tuple[gp.GpModel, ...]
    outlier_clf: KnnClassifier | None
    failure_clf: KnnClassifier | None
    specs: tuple[ConstraintSpec, ...]

    def context(self) -> AcquisitionContext:
        return AcquisitionContext(self.ri, self.constraints, self.specs, self.outlier_clf, self.failure_clf)


@dataclass
class StepResult:
    x: np.ndarray
    components: dict[str, float]
    hyperparams: dict
    exploration: bool = False


def label_outliers(data: Dataset, space: SearchSpace, config: BoConfig, rng=0) -> np.ndarray:
    """Re-label outliers among the non-failed records from their mean objective."""
    ok = [o for o in data.observations if not o.failed]
    for o in data.observations:
        o.outlier = False
    if not config.outlier_detection or len(ok) < config.min_outlier_points:
        return data.outliers
    X = space.normalize(np.array([o.x for o in ok]))
    Y = np.array([float(np.mean(o.y)) for o in ok])
    labels = gp.detect_outliers(X, Y, nu=config.nu, rng=rng, priors=config.priors, threshold_z=config.outlier_z)
    for o, flag in zip(ok, labels.flags):
        o.outlier = bool(flag)
    return data.outliers


def _fit_or_prior(X: np.ndarray, Y: np.ndarray, config: BoConfig, rng) -> gp.GpModel:
    if Y.size >= 2:
        return gp.gp_fit(X, Y, config.priors, restarts=config.gp_restarts, rng=rng)
    # a single observation: prior hyperparameters centered on it
    scale = max(abs(float(Y[0])), 1.0)
    hyper = gp.GpHyperparams(
        mean=float(Y[0]), signal_var=scale**2,
        lengthscales=np.full(X.shape[1], config.priors.lengthscale_center),
        noise_var=config.priors.noise_fraction * scale**2,
    )
    return gp.condition(X, Y, hyper)


def fit_surrogates(data: Dataset, space: SearchSpace, config: BoConfig, rng_seed: int) -> Surrogates:
    """Objective and constraint GPs on clean records plus both classifiers."""
    clean = data.clean()
    if not clean:
        return Surrogates(None, None, (), None, None, config.constraints)
    Xo, Yo = data.stacked(None, clean)
    objective = _fit_or_prior(space.normalize(Xo), Yo, config, derive_seed(rng_seed, "gp", "objective"))
    ri = reinterpolate(objective)
    cmodels = []
    for i, spec in enumerate(config.constraints):
        Xc, Yc = data.stacked(i, clean)
        cmodels.append(_fit_or_prior(space.normalize(Xc), Yc, config, derive_seed(rng_seed, "gp", "constraint", i)))
    out_clf = fail_clf = None
    if config.classifiers:
        ls = objective.hyper.lengthscales
        ok = [o for o in data.observations if not o.failed]
        if ok:
            out_clf = KnnClassifier(space.normalize(np.array([o.x for o in ok])),
                                    np.array([o.outlier for o in ok]), ls, config.knn_k)
        fail_clf = KnnClassifier(space.normalize(data.X), data.failed, ls, config.knn_k)
    return Surrogates(objective, ri, tuple(cmodels), out_clf, fail_clf, config.constraints)


def _explore(data: Dataset, space: SearchSpace, config: BoConfig, rng_seed: int) -> StepResult:
    """Maximize the latent variance of a GP on all evaluated inputs."""
    U = space.normalize(data.X)
    hyper = gp.GpHyperparams(0.0, 1.0, np.full(space.dim, config.priors.lengthscale_center), 0.0)
    model = gp.condition(U, np.zeros(U.shape[0]), hyper)
    f = lambda x: gp.gp_predict(model, space.normalize(x)).latent_var  # noqa: E731
    x, val = pso_maximize(f, space.bounds, space.integer_mask, config.swarm_size, config.pso_iters,
                          rng=derive_seed(rng_seed, "pso"), transform=space.canonical)
    return StepResult(x, {"latent_var": val}, {}, exploration=True)


def bo_step(data: Dataset, space: SearchSpace, config: BoConfig, rng_seed: int,
            surrogates: Surrogates | None = None) -> StepResult:
    """Select the next point (minimization of the objective)."""
    if len(data) == 0:
        raise ValueError("bo_step needs at least one evaluated point")
    sur = surrogates or fit_surrogates(data, space, config, rng_seed)
    if sur.objective is None:
        return _explore(data, space, config, rng_seed)
    ctx = sur.context()
    f = lambda x: acquisition(ctx, space.normalize(x))  # noqa: E731
    x, _ = pso_maximize(f, space.bounds, space.integer_mask, config.swarm_size, config.pso_iters,
                        rng=derive_seed(rng_seed, "pso"), transform=space.canonical)
    comps = {k: float(v[0]) for k, v in acquisition_components(ctx, space.normalize(x)[None, :]).items()}
    hyper = {"objective": sur.objective.hyper.as_dict()}
    for spec, m in zip(sur.specs, sur.constraints):
        hyper[spec.name] = m.hyper.as_dict()
    return StepResult(x, comps, hyper)


# --------------------------------------------------------------------------
# Incumbent


def feasible_mask(data: Dataset, space: SearchSpace, sur: Surrogates) -> np.ndarray:
    """Clean records that satisfy every constraint."""
    out = np.zeros(len(data), dtype=bool)
    for i, o in enumerate(data.observations):
        if not o.clean:
            continue
        ok = True
        for j, spec in enumerate(sur.specs):
            if spec.kind == "latent":
                ok &= bool(np.all(o.g[j] < spec.limit))
            else:
                pred = gp.gp_predict(sur.constraints[j], space.normalize(o.x)[None, :])
                ok &= bool(pred.mean[0] + spec.z * np.sqrt(pred.var[0]) < spec.limit)
        out[i] = ok
    return out


def incumbent(data: Dataset, space: SearchSpace, sur: Surrogates) -> tuple[int | None, bool]:
    """Index of the feasible record with the lowest reinterpolated mean.

    If nothing is feasible, the clean record with the highest feasibility
    probability is returned and flagged infeasible.
    """
    if sur.ri is None:
        return None, False
    idx = [i for i, o in enumerate(data.observations) if o.clean]
    U = space.normalize(np.array([data.observations[i].x for i in idx]))
    means = gp.gp_predict(sur.ri, U).mean
    feas = feasible_mask(data, space, sur)[idx]
    if feas.any():
        cand = np.where(feas)[0]
        return idx[int(cand[np.argmin(means[cand])])], True
    pf = prob_feasibility(sur.constraints, sur.specs, U)
    order = np.lexsort((means, -pf))
    return idx[int(order[0])], False


# --------------------------------------------------------------------------
# Generic loop


@dataclass
class BoRun:
    data: Dataset
    steps: list[StepResult]
    best_index: int | None
    best_feasible: bool


def run_bo(
    evaluate: Callable[[np.ndarray], Observation],
    space: SearchSpace,
    config: BoConfig,
    initial: np.ndarray,
    budget: int,
    rng_seed: int,
    log_path: str | Path | None = None,
) -> BoRun:
    """Evaluate ``initial`` then iterate :func:`bo_step` until ``budget`` evaluations."""
    data = Dataset()
    steps: list[StepResult] = []
    for x in np.atleast_2d(initial)[:budget]:
        data.append(evaluate(space.canonical(x)))
    log = open(log_path, "w") if log_path is not None else None
    try:
        while len(data) < budget:
            k = len(data)
            label_outliers(data, space, config, derive_seed(rng_seed, "outliers", k))
            step = bo_step(data, space, config, derive_seed(rng_seed, "step", k))
            steps.append(step)
            data.append(evaluate(step.x))
            if log is not None:
                log.write(json.dumps({"iteration": k, "x": [float(v) for v in step.x],
                                      "components": step.components, "hyperparams": step.hyperparams},
                                     sort_keys=True) + "\n")
    finally:
        if log is not None:
            log.close()
    label_outliers(data, space, config, derive_seed(rng_seed, "outliers", len(data)))
    sur = fit_surrogates(data, space, config, derive_seed(rng_seed, "final"))
    best, feasible = incumbent(data, space, sur)
    return BoRun(data, steps, best, feasible)
