"""Two-stage min-max tuning of the MPC/Kalman-filter parameters.

Stage 1 searches the controller parameters with constrained BO.  Its
objective evaluation is Stage 2: a short BO over the model-mismatch
context that hunts for the largest overshoot of that controller.  Stage 2
also returns the tracking errors and step times of its first 5 (randomly
drawn) contexts, which Stage 1 enters as 5 replicate observations.

The benchmark variants share everything except what they name:

* ``I``   one nominal-context episode per evaluation, no Stage 2;
* ``II``  uniform random controller parameters instead of BO;
* ``III`` the full pipeline without outlier detection and classifiers;
* ``IV``  the full pipeline.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import bo, gp
from .closedloop import EpisodeOutcome, Simulator
from .control import ControllerParams
from .dynamics import Context, TruncatedNormalSpec, sample_truncated_normal
from .rng import derive_seed, stream

ALGORITHMS = ("I", "II", "III", "IV")
CASES = ("benchmark", "full")

EpisodeFn = Callable[[ControllerParams, Context, int], EpisodeOutcome]


# --------------------------------------------------------------------------
# Settings and search spaces


@dataclass(frozen=True)
class TunerSettings:
    case: str = "benchmark"
    budget: int = 60
    n_initial: int = 10
    max_overshoot: float = 0.15
    max_step_time: float = 1.0e-3
    z_time: float = 3.0
    stage2_initial: int = 5
    stage2_budget: int = 10
    n_validation: int = 25
    horizon_bounds: tuple[int, int] = (1, 30)
    lambda_mpc_bounds: tuple[float, float] = (-6.0, 1.0)
    lambda_kf_bounds: tuple[float, float] = (-4.0, 3.0)
    lambda_kf_fixed: float = -1.0
    min_lengthscale_horizon: float = 0.22
    min_lengthscale_continuous: float = 0.05
    log_objective: bool = True
    stage1_bo: bo.BoConfig = bo.BoConfig()
    stage2_bo: bo.BoConfig = bo.BoConfig(outlier_detection=False, classifiers=False, gp_restarts=4,
                                         swarm_size=30, pso_iters=40)

    def __post_init__(self):
        if self.case not in CASES:
            raise ValueError(f"case must be one of {CASES}, got {self.case!r}")
        if self.budget < self.n_initial:
            raise ValueError(f"budget ({self.budget}) must be >= initial design size ({self.n_initial})")
        if self.n_initial < 1:
            raise ValueError("initial design needs at least one point")
        if not 1 <= self.stage2_initial <= self.stage2_budget:
            raise ValueError("need 1 <= stage2_initial <= stage2_budget")
        for name in ("horizon_bounds", "lambda_mpc_bounds", "lambda_kf_bounds"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name}: lower bound must be below upper bound")
        if self.horizon_bounds[0] < 1:
            raise ValueError("horizons must be at least 1")
        if self.max_overshoot <= 0 or self.max_step_time <= 0:
            raise ValueError("constraint limits must be positive")

    def constraints(self) -> tuple[bo.ConstraintSpec, ...]:
        return (
            bo.ConstraintSpec("step_time", self.max_step_time, "predictive", self.z_time),
            bo.ConstraintSpec("overshoot", self.max_overshoot, "latent"),
        )

    def stage1_config(self, algorithm: str = "IV") -> bo.BoConfig:
        priors = replace(self.stage1_bo.priors, min_lengthscale=min_lengthscales(self))
        cfg = replace(self.stage1_bo, constraints=self.constraints(), priors=priors)
        if algorithm == "III":
            cfg = replace(cfg, outlier_detection=False, classifiers=False)
        return cfg


def min_lengthscales(settings: TunerSettings) -> tuple[float, ...]:
    h, c = settings.min_lengthscale_horizon, settings.min_lengthscale_continuous
    return (h, c) if settings.case == "benchmark" else (h, h, c, c)


def _clip_prediction_horizon(x: np.ndarray) -> np.ndarray:
    x = np.array(x, dtype=float)
    x[..., 1] = np.maximum(x[..., 1], x[..., 0])
    return x


def search_space(settings: TunerSettings) -> bo.SearchSpace:
    """Benchmark: ``(H, lambda_MPC)`` with ``H_u = H_p = H``; full: all four."""
    h = settings.horizon_bounds
    if settings.case == "benchmark":
        return bo.SearchSpace(np.array([h, settings.lambda_mpc_bounds], dtype=float), (True, False),
                              ("horizon", "lambda_mpc"))
    return bo.SearchSpace(
        np.array([h, h, settings.lambda_mpc_bounds, settings.lambda_kf_bounds], dtype=float),
        (True, True, False, False),
        ("control_horizon", "prediction_horizon", "lambda_mpc", "lambda_kf"),
        project=_clip_prediction_horizon,
    )


def to_params(x: Sequence[float], settings: TunerSettings) -> ControllerParams:
    if settings.case == "benchmark":
        return ControllerParams(int(round(x[0])), int(round(x[0])), float(x[1]), settings.lambda_kf_fixed)
    hu, hp = int(round(x[0])), int(round(x[1]))
    return ControllerParams(hu, max(hp, hu), float(x[2]), float(x[3]))


def from_params(params: ControllerParams, settings: TunerSettings) -> np.ndarray:
    if settings.case == "benchmark":
        return np.array([params.control_horizon, params.lambda_mpc], dtype=float)
    return np.array(params.as_tuple(), dtype=float)


# --------------------------------------------------------------------------
# Stage 2


@dataclass(frozen=True)
class Stage2Result:
    worst_overshoot: float
    samples: tuple[tuple[float, float], ...]
    evaluations: int
    early_stop: bool
    failed: bool
    contexts: tuple[tuple[float, float], ...] = ()
    overshoots: tuple[float, ...] = ()

    def as_dict(self) -> dict:
        return asdict(self)


def stage2_worst_context(
    params: ControllerParams,
    spec: TruncatedNormalSpec,
    max_overshoot: float,
    rng_seed: int,
    episode: EpisodeFn,
    n_initial: int = 5,
    budget: int = 10,
    config: bo.BoConfig | None = None,
) -> Stage2Result:
    """Worst-case overshoot of one controller over the context distribution.

    The first ``n_initial`` contexts are drawn from ``spec`` and always all
    run (unless an episode fails).  Afterwards BO maximizes the overshoot
    over the support box until an overshoot above ``max_overshoot`` is
    seen or ``budget`` episodes were run.
    """
    config = config or bo.BoConfig(outlier_detection=False, classifiers=False)
    config = replace(config, constraints=(), outlier_detection=False, classifiers=False)
    initial = sample_truncated_normal(spec, n_initial, stream(rng_seed, "stage2", "contexts"))
    contexts: list[tuple[float, float]] = []
    overshoots: list[float] = []
    samples: list[tuple[float, float]] = []

    def run(ctx_vec) -> EpisodeOutcome:
        ctx = Context.from_array(ctx_vec)
        out = episode(params, ctx, derive_seed(rng_seed, "stage2", "noise", len(contexts)))
        contexts.append((ctx.stiffness, ctx.damping))
        overshoots.append(float(out.overshoot))
        return out

    def result(early: bool, failed: bool) -> Stage2Result:
        worst = max(overshoots) if overshoots and not failed else float("inf") if failed else 0.0
        return Stage2Result(worst, tuple(samples), len(contexts), early, failed, tuple(contexts), tuple(overshoots))

    for c in initial:
        out = run(c)
        if out.failed:
            return result(False, True)
        samples.append((float(out.ite), float(out.step_time)))
    if max(overshoots) > max_overshoot:
        return result(True, False)

    space = bo.SearchSpace(spec.bounds, (False,) * spec.bounds.shape[0], ("stiffness", "damping"))
    data = bo.Dataset([bo.Observation(np.array(c), -o) for c, o in zip(contexts, overshoots)])
    while len(contexts) < budget:
        step = bo.bo_step(data, space, config, derive_seed(rng_seed, "stage2", "step", len(contexts)))
        out = run(step.x)
        if out.failed:
            return result(False, True)
        data.append(bo.Observation(step.x, -out.overshoot))
        if out.overshoot > max_overshoot:
            return result(True, False)
    return result(False, False)


# --------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class ValidationResult:
    objective: float
    feasible: bool
    max_overshoot: float
    failed: bool
    time_ok: bool
    draws: int

    def as_dict(self) -> dict:
        return asdict(self)


def validate(
    params: ControllerParams,
    simulator: Simulator,
    spec: TruncatedNormalSpec,
    max_overshoot: float,
    max_step_time: float,
    rng_seed: int,
    n_draws: int = 25,
    timing: str = "synthetic",
) -> ValidationResult:
    """Mean tracking error over ``n_draws`` random contexts and noise seeds.

    Draws depend only on ``rng_seed``, so every controller validated with
    the same seed faces the same contexts and noise (common random numbers).
    """
    contexts = sample_truncated_normal(spec, n_draws, stream(rng_seed, "validation", "contexts"))
    ites, overs, times = [], [], []
    for i, c in enumerate(contexts):
        out = simulator.run(params, Context.from_array(c), derive_seed(rng_seed, "validation", "noise", i), timing=timing)
        if out.failed:
            return ValidationResult(float("inf"), False, float("inf"), True, False, i + 1)
        ites.append(out.ite)
        overs.append(out.overshoot)
        times.append(out.step_time)
    if timing == "synthetic":
        tm = simulator.time_model
        time_ok = tm.nominal(params.control_horizon) + 3.0 * tm.jitter_std < max_step_time
    else:
        time_ok = max(times) < max_step_time
    worst = float(max(overs))
    return ValidationResult(float(np.mean(ites)), bool(worst < max_overshoot and time_ok), worst, False,
                            bool(time_ok), n_draws)


# --------------------------------------------------------------------------
# Stage 1


@dataclass
class TunerRecord:
    """One Stage-1 evaluation plus the incumbent after it."""

    iteration: int
    x: list[float]
    params: tuple
    stage2: dict
    episodes: int
    failed: bool
    outlier: bool = False
    acquisition: dict = field(default_factory=dict)
    incumbent: tuple | None = None
    incumbent_train: float | None = None
    incumbent_validation: float | None = None
    incumbent_feasible: bool | None = None
    best_validation: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TuneResult:
    algorithm: str
    seed: int
    best: ControllerParams | None
    best_feasible: bool
    train_objective: float
    validation: ValidationResult | None
    history: list[TunerRecord]
    episodes: int
    acquisition_calls: int
    surrogates: bo.Surrogates | None = field(default=None, repr=False)
    data: bo.Dataset | None = field(default=None, repr=False)
    fit_seed: int | None = None

    @property
    def gap(self) -> float:
        if self.validation is None or not math.isfinite(self.validation.objective):
            return float("nan")
        return self.validation.objective - self.train_objective

    def summary(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "seed": self.seed,
            "best": None if self.best is None else list(self.best.as_tuple()),
            "best_feasible": self.best_feasible,
            "train_objective": self.train_objective,
            "validation": None if self.validation is None else self.validation.as_dict(),
            "gap": self.gap,
            "episodes": self.episodes,
            "acquisition_calls": self.acquisition_calls,
            "fit_seed": self.fit_seed,
        }


def validation_seed(seed: int) -> int:
    """Seed of the validation draws for a run seeded with ``seed``."""
    return derive_seed(seed, "validation")


class Tuner:
    """Runs one benchmark algorithm for one seed."""

    def __init__(
        self,
        settings: TunerSettings,
        simulator: Simulator,
        context_spec: TruncatedNormalSpec | None = None,
        timing: str = "synthetic",
        episode: EpisodeFn | None = None,
        track_validation: bool = True,
    ):
        self.settings = settings
        self.simulator = simulator
        self.spec = context_spec or TruncatedNormalSpec()
        self.timing = timing
        self.space = search_space(settings)
        self.track_validation = track_validation
        self.episodes = 0
        self.acquisition_calls = 0
        self._episode_impl = episode or (lambda p, c, s: simulator.run(p, c, s, timing=timing))
        self._validation_cache: dict[tuple, ValidationResult] = {}

    # instrumentation: every episode goes through here
    def episode(self, params: ControllerParams, ctx: Context, seed: int) -> EpisodeOutcome:
        self.episodes += 1
        return self._episode_impl(params, ctx, seed)

    def initial_design(self, seed: int) -> np.ndarray:
        """Latin hypercube that depends on the run seed only (shared by all algorithms)."""
        return self.space.sample_lhs(self.settings.n_initial, stream(seed, "initial-design"))

    def evaluate(self, x: np.ndarray, algorithm: str, seed: int, k: int) -> tuple[bo.Observation, dict, int]:
        s = self.settings
        params = to_params(x, s)
        before = self.episodes
        eval_seed = derive_seed(seed, "evaluation", k)
        if algorithm == "I":
            ctx = Context.from_array(self.spec.mean)
            out = self.episode(params, ctx, derive_seed(eval_seed, "nominal"))
            info = {"worst_overshoot": out.overshoot, "evaluations": 1, "early_stop": False,
                    "failed": out.failed, "samples": [[out.ite, out.step_time]]}
            if out.failed:
                return bo.Observation(x, [], (), failed=True), info, self.episodes - before
            return bo.Observation(x, self.objective_values([out.ite]), ([out.step_time], [out.overshoot])), info, self.episodes - before
        r = stage2_worst_context(params, self.spec, s.max_overshoot, eval_seed, self.episode,
                                 s.stage2_initial, s.stage2_budget, s.stage2_bo)
        info = r.as_dict()
        if r.failed:
            return bo.Observation(x, [], (), failed=True), info, self.episodes - before
        ite = [a for a, _ in r.samples]
        times = [b for _, b in r.samples]
        return bo.Observation(x, self.objective_values(ite), (times, [r.worst_overshoot])), info, self.episodes - before

    def objective_values(self, ite: Sequence[float]) -> list[float]:
        """Stage-1 objective observations: ITE, or its logarithm (context effects are multiplicative)."""
        if not self.settings.log_objective:
            return [float(v) for v in ite]
        return [math.log(max(float(v), 1e-300)) for v in ite]

    def train_estimate(self, sur: bo.Surrogates, x: np.ndarray) -> float:
        """Expected ITE at ``x`` according to the reinterpolated objective model."""
        m = float(gp.gp_predict(sur.ri, self.space.normalize(x)[None, :]).mean[0])
        if not self.settings.log_objective:
            return m
        # log-normal mean: the replicate spread is the fitted noise variance
        return math.exp(m + 0.5 * sur.objective.hyper.noise_var)

    def validate(self, params: ControllerParams, seed: int) -> ValidationResult:
        key = (params.as_tuple(), seed)
        if key not in self._validation_cache:
            s = self.settings
            self._validation_cache[key] = validate(
                params, self.simulator, self.spec, s.max_overshoot, s.max_step_time,
                validation_seed(seed), s.n_validation, self.timing)
        return self._validation_cache[key]

    def run(self, algorithm: str, seed: int, log_path: str | Path | None = None) -> TuneResult:
        if algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {algorithm!r}")
        s = self.settings
        cfg = s.stage1_config(algorithm)
        data = bo.Dataset()
        history: list[TunerRecord] = []
        best_val = math.inf
        design = self.initial_design(seed)
        random_pts = self.space.sample_uniform(s.budget, stream(seed, "random-search")) if algorithm == "II" else None
        sur = None
        fit_seed = None
        log = open(log_path, "w") if log_path is not None else None
        try:
            for k in range(s.budget):
                acq: dict = {}
                if k < len(design):
                    x = design[k]
                elif algorithm == "II":
                    x = random_pts[k]
                else:
                    self.acquisition_calls += 1
                    step = bo.bo_step(data, self.space, cfg, derive_seed(seed, "step", k), surrogates=sur)
                    x = step.x
                    acq = dict(step.components, exploration=step.exploration)
                obs, info, used = self.evaluate(x, algorithm, seed, k)
                data.append(obs)
                sur = None
                need_models = k + 1 >= len(design)
                rec = TunerRecord(k, [float(v) for v in x], to_params(x, s).as_tuple(), info, used, obs.failed,
                                  acquisition=acq)
                if need_models:
                    bo.label_outliers(data, self.space, cfg, derive_seed(seed, "outliers", k))
                    fit_seed = derive_seed(seed, "fit", k)
                    sur = bo.fit_surrogates(data, self.space, cfg, fit_seed)
                    idx, feas = bo.incumbent(data, self.space, sur)
                    if idx is not None:
                        inc = to_params(data.observations[idx].x, s)
                        rec.incumbent = inc.as_tuple()
                        rec.incumbent_feasible = feas
                        rec.incumbent_train = self.train_estimate(sur, data.observations[idx].x)
                        if self.track_validation:
                            v = self.validate(inc, seed)
                            rec.incumbent_validation = v.objective
                            if v.feasible:
                                best_val = min(best_val, v.objective)
                rec.outlier = bool(obs.outlier)
                rec.best_validation = best_val if math.isfinite(best_val) else None
                history.append(rec)
                if log is not None:
                    log.write(json.dumps(_jsonable(rec.as_dict()), sort_keys=True) + "\n")
                    log.flush()
        finally:
            if log is not None:
                log.close()
        # the last model fit already includes every evaluation
        for rec, o in zip(history, data.observations):
            rec.outlier = bool(o.outlier)
        if sur is None:
            bo.label_outliers(data, self.space, cfg, derive_seed(seed, "outliers", s.budget))
            fit_seed = derive_seed(seed, "fit", s.budget)
            sur = bo.fit_surrogates(data, self.space, cfg, fit_seed)
        idx, feas = bo.incumbent(data, self.space, sur)
        best = None if idx is None else to_params(data.observations[idx].x, s)
        train = float("nan")
        val = None
        if best is not None:
            train = self.train_estimate(sur, data.observations[idx].x)
            val = self.validate(best, seed)
        return TuneResult(algorithm, seed, best, feas, train, val, history, self.episodes,
                          self.acquisition_calls, sur, data, fit_seed)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def stage1_optimize(settings: TunerSettings, simulator: Simulator, rng_seed: int,
                    context_spec: TruncatedNormalSpec | None = None, timing: str = "synthetic",
                    log_path: str | Path | None = None) -> TuneResult:
    """Full pipeline (algorithm IV)."""
    return Tuner(settings, simulator, context_spec, timing).run("IV", rng_seed, log_path)


def run_benchmark_algorithm(algorithm: str, settings: TunerSettings, simulator: Simulator, rng_seed: int,
                            context_spec: TruncatedNormalSpec | None = None, timing: str = "synthetic",
                            log_path: str | Path | None = None, track_validation: bool = True) -> TuneResult:
    tuner = Tuner(settings, simulator, context_spec, timing, track_validation=track_validation)
    return tuner.run(algorithm, rng_seed, log_path)


# --------------------------------------------------------------------------
# Surrogate grid export


GRID_COLUMNS = ("objective_mean", "p_feas", "p_out", "p_fail")


def export_grid(
    surrogates: bo.Surrogates,
    space: bo.SearchSpace,
    dims: tuple[int, int] = (0, 1),
    resolution: tuple[int, int] = (30, 30),
    fixed: Sequence[float] | None = None,
) -> list[dict]:
    """Surrogate predictions on a grid over two dimensions (others held at ``fixed``)."""
    if surrogates.objective is None:
        raise ValueError("no fitted surrogates to export")
    i, j = dims
    base = np.asarray(fixed, dtype=float) if fixed is not None else space.bounds.mean(axis=1)
    axes = []
    for d, n in zip(dims, resolution):
        lo, hi = space.bounds[d]
        axes.append(np.array([0.5 * (lo + hi)]) if n == 1 else np.linspace(lo, hi, n))
    gi, gj = np.meshgrid(axes[0], axes[1], indexing="ij")
    pts = np.repeat(base[None, :], gi.size, axis=0)
    pts[:, i] = gi.ravel()
    pts[:, j] = gj.ravel()
    U = space.normalize(pts)
    ctx = surrogates.context()
    comps = bo.acquisition_components(ctx, U)
    mean = gp.gp_predict(surrogates.objective, U).mean
    cmeans = {f"{spec.name}_mean": gp.gp_predict(m, U).mean for spec, m in zip(surrogates.specs, surrogates.constraints)}
    rows = []
    for r in range(pts.shape[0]):
        row = {space.names[d]: float(pts[r, d]) for d in range(space.dim)}
        row.update(objective_mean=float(mean[r]), p_feas=float(comps["p_feas"][r]),
                   p_out=float(comps["p_out"][r]), p_fail=float(comps["p_fail"][r]))
        row.update({k: float(v[r]) for k, v in cmeans.items()})
        rows.append(row)
    return rows


def step_time_grid(settings: TunerSettings, time_model, resolution: tuple[int, int] = (30, 30)) -> list[dict]:
    """Nominal synthetic step time over the benchmark grid."""
    space = search_space(replace(settings, case="benchmark"))
    rows = []
    for hv in np.linspace(*space.bounds[0], resolution[0]):
        for lv in np.linspace(*space.bounds[1], resolution[1]):
            params = to_params(space.canonical(np.array([hv, lv])), replace(settings, case="benchmark"))
            rows.append({"horizon": params.control_horizon, "lambda_mpc": float(lv),
                         "step_time": time_model.nominal(params.control_horizon)})
    return rows
