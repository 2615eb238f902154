"""Closed-loop episodes: perturbed plant + nominal Kalman filter + nominal MPC.

An episode returns the three black-box responses used by the tuner:
integral tracking error, maximal overshoot above the reference, and the
maximal per-step controller computation time.

Two execution paths share the same step ordering:

* ``timing="synthetic"`` runs a compiled kernel that uses the precomputed
  first-move gain of the MPC (the Hessian is constant, so this is the same
  control law) and reports a cost-model step time that is cubic in ``H_u``.
* ``timing="wallclock"`` steps the :class:`MpcController` and
  :class:`KalmanFilter` objects and measures every controller call.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from . import rng as rngmod
from .control import (
    MEASUREMENT_VARIANCE,
    ControllerFailure,
    ControllerParams,
    KalmanFilter,
    KfConfig,
    MpcController,
)
from .dynamics import Context, DiscretePlant, PlantParams, discretize, perturb

TIMING_MODES = ("synthetic", "wallclock")


@dataclass(frozen=True)
class ReferenceTrajectory:
    values: np.ndarray
    ts: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size < 2:
            raise ValueError("reference needs at least two samples (N >= 1)")
        if not np.all(np.isfinite(v)):
            raise ValueError("reference values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def n_steps(self) -> int:
        return self.values.size - 1

    @property
    def peak(self) -> float:
        return float(np.max(np.abs(self.values)))

    def window(self, k: int, length: int) -> np.ndarray:
        """References ``k+1 .. k+length``, holding the last value past the end."""
        idx = np.minimum(np.arange(k + 1, k + 1 + length), self.n_steps)
        return self.values[idx]

    def preview_matrix(self, length: int) -> np.ndarray:
        idx = np.minimum(np.arange(self.n_steps + 1)[:, None] + np.arange(1, length + 1)[None, :], self.n_steps)
        return self.values[idx]


@dataclass(frozen=True)
class TrapezoidSpec:
    """Rest, ramp up, hold, ramp down, rest (durations in seconds)."""

    n_steps: int = 1500
    peak: float = 1.0
    rest: float = 0.1
    ramp_up: float = 0.25
    hold: float = 1.0
    ramp_down: float = 0.25

    def build(self, ts: float) -> ReferenceTrajectory:
        t = np.arange(self.n_steps + 1) * ts
        knots_t = np.cumsum([0.0, self.rest, self.ramp_up, self.hold, self.ramp_down])
        knots_v = [0.0, 0.0, self.peak, self.peak, 0.0]
        return ReferenceTrajectory(np.interp(t, knots_t, knots_v), ts)


@dataclass(frozen=True)
class StepTimeModel:
    """Synthetic per-step compute time ``c0 + c1 * H_u**3 + jitter``."""

    c0: float = 1.0e-4
    c1: float = 8.45e-8
    jitter_std: float = 2.0e-5

    def nominal(self, control_horizon: int) -> float:
        return self.c0 + self.c1 * float(control_horizon) ** 3

    def sample(self, control_horizon: int, rng: np.random.Generator) -> float:
        return max(self.nominal(control_horizon) + self.jitter_std * rng.standard_normal(), 1e-9)


@dataclass
class EpisodeOutcome:
    ite: float
    overshoot: float
    step_time: float
    failed: bool = False
    trace: dict[str, np.ndarray] | None = field(default=None, repr=False)

    @classmethod
    def failure(cls, trace=None) -> "EpisodeOutcome":
        return cls(ite=float("nan"), overshoot=float("nan"), step_time=float("nan"), failed=True, trace=trace)


def overshoot(trace: np.ndarray, reference: np.ndarray) -> float:
    """Largest exceedance of the velocity above its reference (0 if never above)."""
    trace = np.asarray(trace, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if trace.shape != reference.shape:
        raise ValueError("trace and reference must have equal length")
    return float(max(0.0, np.max(trace - reference)))


def step_time(timing: str, control_horizon: int, measured=None, model: StepTimeModel | None = None, rng=None) -> float:
    if timing == "wallclock":
        return float(np.max(measured))
    if timing == "synthetic":
        return (model or StepTimeModel()).sample(control_horizon, rngmod.as_generator(rng))
    raise ValueError(f"unknown timing mode {timing!r}")


@numba.njit(cache=True)
def _simulate_kernel(A_t, b_t, A_m, b_m, c, d, q_kf, r_kf, k_xi, k_u, k_ref, noise, limit):
    n_samples = k_ref.shape[0]
    nx = A_t.shape[0]
    v_trace = np.zeros(n_samples)
    u_trace = np.zeros(n_samples)
    xhat_trace = np.zeros((n_samples, nx))
    x = np.zeros(nx)
    xh = np.zeros(nx)
    P = np.eye(nx)
    buf = np.zeros(max(d, 1))
    u_prev = 0.0
    tmp = np.zeros(nx)
    Pc = np.zeros(nx)
    gain = np.zeros(nx)
    M = np.zeros((nx, nx))
    for k in range(n_samples):
        v = 0.0
        for i in range(nx):
            v += c[i] * x[i]
        if not np.isfinite(v) or abs(v) > limit:
            return v_trace, u_trace, xhat_trace, True, k
        v_trace[k] = v
        # measurement update, Joseph form
        y = v + noise[k]
        s = r_kf
        innov = y
        for i in range(nx):
            acc = 0.0
            for j in range(nx):
                acc += P[i, j] * c[j]
            Pc[i] = acc
            s += c[i] * acc
            innov -= c[i] * xh[i]
        if not (s > 0.0) or not np.isfinite(s):
            return v_trace, u_trace, xhat_trace, True, k
        for i in range(nx):
            gain[i] = Pc[i] / s
            xh[i] += gain[i] * innov
        # (I - g c) P (I - g c)^T + r g g^T
        for i in range(nx):
            for j in range(nx):
                M[i, j] = P[i, j] - gain[i] * Pc[j]
        for i in range(nx):
            Mc = 0.0
            for l in range(nx):
                Mc += M[i, l] * c[l]
            for j in range(nx):
                P[i, j] = M[i, j] - Mc * gain[j] + r_kf * gain[i] * gain[j]
        for i in range(nx):
            for j in range(i + 1, nx):
                sym = 0.5 * (P[i, j] + P[j, i])
                P[i, j] = sym
                P[j, i] = sym
        xhat_trace[k] = xh
        # control move
        du = k_ref[k] - k_u * u_prev
        for i in range(nx):
            du -= k_xi[i] * xh[i]
        for i in range(d):
            du -= k_xi[nx + i] * buf[i]
        u = u_prev + du
        if not np.isfinite(u):
            return v_trace, u_trace, xhat_trace, True, k
        u_trace[k] = u
        # plant and time update share the delayed input
        if d > 0:
            ud = buf[0]
            for i in range(d - 1):
                buf[i] = buf[i + 1]
            buf[d - 1] = u
        else:
            ud = u
        for i in range(nx):
            tmp[i] = b_t[i] * ud
            for j in range(nx):
                tmp[i] += A_t[i, j] * x[j]
        x[:] = tmp
        for i in range(nx):
            tmp[i] = b_m[i] * ud
            for j in range(nx):
                tmp[i] += A_m[i, j] * xh[j]
        xh[:] = tmp
        # P <- A P A^T + q I
        for i in range(nx):
            for j in range(nx):
                acc = 0.0
                for l in range(nx):
                    acc += A_m[i, l] * P[l, j]
                M[i, j] = acc
        for i in range(nx):
            for j in range(nx):
                acc = 0.0
                for l in range(nx):
                    acc += M[i, l] * A_m[j, l]
                P[i, j] = acc
            P[i, i] += q_kf
        for i in range(nx):
            for j in range(i + 1, nx):
                sym = 0.5 * (P[i, j] + P[j, i])
                P[i, j] = sym
                P[j, i] = sym
        u_prev = u
    return v_trace, u_trace, xhat_trace, False, n_samples


class Simulator:
    """Runs episodes for one nominal plant and one reference trajectory."""

    def __init__(
        self,
        plant: PlantParams | None = None,
        ts: float = 0.002,
        trajectory: ReferenceTrajectory | None = None,
        noise_std: float = float(np.sqrt(MEASUREMENT_VARIANCE)),
        time_model: StepTimeModel | None = None,
        divergence_factor: float = 1e3,
    ):
        self.plant = plant or PlantParams()
        self.ts = ts
        self.trajectory = trajectory or TrapezoidSpec().build(ts)
        if abs(self.trajectory.ts - ts) > 1e-15:
            raise ValueError("trajectory sample time differs from simulator sample time")
        self.noise_std = noise_std
        self.time_model = time_model or StepTimeModel()
        self.divergence_factor = divergence_factor
        self.nominal = discretize(self.plant, ts)
        self._plants: dict[tuple[float, float], DiscretePlant] = {}
        self._controllers: dict[tuple, MpcController] = {}
        self._gains: dict[tuple, tuple[np.ndarray, float, np.ndarray]] = {}
        self.episodes_run = 0

    def true_plant(self, ctx: Context) -> DiscretePlant:
        key = (ctx.stiffness, ctx.damping)
        if key not in self._plants:
            if len(self._plants) > 4096:
                self._plants.clear()
            self._plants[key] = discretize(perturb(self.plant, ctx), self.ts)
        return self._plants[key]

    def run(
        self,
        params: ControllerParams,
        ctx: Context,
        noise_seed: int,
        timing: str = "synthetic",
        record_trace: bool = False,
    ) -> EpisodeOutcome:
        if timing not in TIMING_MODES:
            raise ValueError(f"unknown timing mode {timing!r}")
        self.episodes_run += 1
        gen = rngmod.stream(noise_seed, "measurement")
        noise = self.noise_std * gen.standard_normal(self.trajectory.n_steps + 1)
        true_plant = self.true_plant(ctx)
        try:
            mpc = self._controller(params)
        except ControllerFailure:
            return EpisodeOutcome.failure()
        if timing == "synthetic":
            v, u, xh, failed = self._run_compiled(mpc, params, true_plant, noise)
            t_step = None
        else:
            v, u, xh, failed, t_step = self._run_stepwise(mpc, params, true_plant, noise)
        trace = None
        if record_trace:
            trace = {"k": np.arange(v.size), "v_ref": self.trajectory.values.copy(), "v": v, "u": u, "xhat": xh}
        if failed:
            return EpisodeOutcome.failure(trace)
        ref = self.trajectory.values
        if timing == "synthetic":
            t = self.time_model.sample(params.control_horizon, rngmod.stream(noise_seed, "step-time"))
        else:
            t = float(np.max(t_step))
        return EpisodeOutcome(
            ite=float(np.sum((ref - v) ** 2)), overshoot=overshoot(v, ref), step_time=t, trace=trace
        )

    def _limit(self) -> float:
        return self.divergence_factor * max(self.trajectory.peak, 1e-12)

    def _controller(self, params: ControllerParams) -> MpcController:
        key = (params.control_horizon, params.prediction_horizon, float(params.lambda_mpc))
        if key not in self._controllers:
            if len(self._controllers) > 1024:
                self._controllers.clear()
            self._controllers[key] = MpcController(self.nominal, params)
        return self._controllers[key]

    def _feedback_gains(self, mpc: MpcController, params: ControllerParams):
        key = (params.control_horizon, params.prediction_horizon, float(params.lambda_mpc))
        if key not in self._gains:
            if len(self._gains) > 1024:
                self._gains.clear()
            g = mpc.first_move_gain()
            pred = mpc.predictor
            k_ref = self.trajectory.preview_matrix(pred.hp) @ g
            self._gains[key] = (g @ pred.psi, float(g @ pred.upsilon), k_ref)
        return self._gains[key]

    def _run_compiled(self, mpc: MpcController, params, true_plant: DiscretePlant, noise: np.ndarray):
        k_xi, k_u, k_ref = self._feedback_gains(mpc, params)
        nom = self.nominal
        kf = KfConfig.from_lambda(params.lambda_kf)
        v, u, xh, failed, _ = _simulate_kernel(
            true_plant.A, true_plant.b, nom.A, nom.b, nom.c, nom.delay_steps,
            kf.process_var, kf.measurement_var, k_xi, k_u, k_ref, noise, self._limit(),
        )
        return v, u, xh, bool(failed)

    def _run_stepwise(self, mpc: MpcController, params, true_plant: DiscretePlant, noise: np.ndarray):
        n = self.trajectory.n_steps + 1
        nom = self.nominal
        d = nom.delay_steps
        kf = KalmanFilter(nom, KfConfig.from_lambda(params.lambda_kf))
        v_tr, u_tr = np.zeros(n), np.zeros(n)
        xh_tr = np.zeros((n, nom.order))
        timings = np.zeros(n)
        x = np.zeros(true_plant.order)
        buf = np.zeros(d)
        u_prev = 0.0
        limit = self._limit()
        hp = mpc.predictor.hp
        for k in range(n):
            v = float(true_plant.c @ x)
            if not np.isfinite(v) or abs(v) > limit:
                return v_tr, u_tr, xh_tr, True, timings
            v_tr[k] = v
            try:
                xh = kf.update(v + noise[k])
                xh_tr[k] = xh
                xi = np.concatenate([xh, buf])
                window = self.trajectory.window(k, hp)
                t0 = time.perf_counter()
                u = mpc.control(xi, u_prev, window)
                timings[k] = time.perf_counter() - t0
            except ControllerFailure:
                return v_tr, u_tr, xh_tr, True, timings
            u_tr[k] = u
            if d > 0:
                ud = buf[0]
                buf = np.append(buf[1:], u)
            else:
                ud = u
            x = true_plant.A @ x + true_plant.b * ud
            kf.predict(ud)
            u_prev = u
        return v_tr, u_tr, xh_tr, False, timings


def run_episode(
    params: ControllerParams,
    ctx: Context,
    noise_seed: int,
    simulator: Simulator | None = None,
    timing: str = "synthetic",
    record_trace: bool = False,
) -> EpisodeOutcome:
    return (simulator or Simulator()).run(params, ctx, noise_seed, timing=timing, record_trace=record_trace)


def write_trace_csv(outcome: EpisodeOutcome, path: str | Path) -> Path:
    if outcome.trace is None:
        raise ValueError("episode was run without record_trace=True")
    tr = outcome.trace
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        xh = tr["xhat"]
        w.writerow(["k", "v_ref", "v", "u"] + [f"xhat_{i}" for i in range(xh.shape[1])])
        for k in range(tr["k"].size):
            w.writerow([int(tr["k"][k]), repr(float(tr["v_ref"][k])), repr(float(tr["v"][k])), repr(float(tr["u"][k]))]
                       + [repr(float(val)) for val in xh[k]])
    tmp.replace(path)
    return path
