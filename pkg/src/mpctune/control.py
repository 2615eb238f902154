"""Unconstrained Delta-u MPC and Kalman filter on the nominal plant model.

Both are always built from the *nominal* :class:`DiscretePlant`; only the
simulated plant sees the context perturbation.

The input delay is handled by augmenting the plant state with the buffer of
pending inputs::

    xi = [x_1 .. x_n, u_{k-d}, ..., u_{k-1}]

The buffer entries are known inputs, so the Kalman filter estimates only the
physical state ``x`` and the buffer is carried along exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .dynamics import DiscretePlant

MEASUREMENT_VARIANCE = 0.001


class ControllerFailure(RuntimeError):
    """Numerical breakdown inside the controller or the estimator."""


@dataclass(frozen=True)
class ControllerParams:
    control_horizon: int = 15
    prediction_horizon: int = 15
    lambda_mpc: float = -3.0
    lambda_kf: float = -1.0

    def __post_init__(self):
        if int(self.control_horizon) != self.control_horizon or int(self.prediction_horizon) != self.prediction_horizon:
            raise ValueError("horizons must be integers")
        if self.control_horizon < 1:
            raise ValueError(f"control horizon must be >= 1, got {self.control_horizon}")
        if self.prediction_horizon < self.control_horizon:
            raise ValueError(
                f"prediction horizon ({self.prediction_horizon}) must be >= control horizon ({self.control_horizon})"
            )

    def as_tuple(self) -> tuple[int, int, float, float]:
        return (int(self.control_horizon), int(self.prediction_horizon), float(self.lambda_mpc), float(self.lambda_kf))


@dataclass(frozen=True)
class MpcWeights:
    """Tracking-error weight ``q`` and input-increment weight ``r`` (scalar SISO)."""

    q: float = 1.0
    r: float = 1e-3

    def __post_init__(self):
        if not (self.r > 0 and self.q > 0):
            raise ValueError(f"MPC weights must be positive, got q={self.q}, r={self.r}")

    @classmethod
    def from_lambda(cls, lambda_mpc: float) -> "MpcWeights":
        return cls(q=1.0, r=10.0**lambda_mpc)


@dataclass(frozen=True)
class KfConfig:
    measurement_var: float = MEASUREMENT_VARIANCE
    process_var: float = 0.1

    def __post_init__(self):
        if not (self.measurement_var > 0 and self.process_var > 0):
            raise ValueError("Kalman filter covariances must be positive definite")

    @classmethod
    def from_lambda(cls, lambda_kf: float) -> "KfConfig":
        return cls(measurement_var=MEASUREMENT_VARIANCE, process_var=10.0**lambda_kf)


@dataclass(frozen=True)
class Predictor:
    """Output predictions ``y = psi @ xi + upsilon * u_prev + theta @ dU``.

    Row ``i`` predicts ``y_{k+1+i}``; column ``j`` of ``theta`` is the move
    ``dU_{k+j}``.
    """

    psi: np.ndarray
    upsilon: np.ndarray
    theta: np.ndarray

    @property
    def hp(self) -> int:
        return self.theta.shape[0]

    @property
    def hu(self) -> int:
        return self.theta.shape[1]

    def free_response(self, xi: np.ndarray, u_prev: float) -> np.ndarray:
        return self.psi @ xi + self.upsilon * u_prev


def augment(model: DiscretePlant) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """State-space matrices of the plant with its delay buffer appended."""
    n, d = model.order, model.delay_steps
    if d == 0:
        return model.A.copy(), model.b.copy(), model.c.copy()
    A = np.zeros((n + d, n + d))
    A[:n, :n] = model.A
    A[:n, n] = model.b
    for i in range(d - 1):
        A[n + i, n + i + 1] = 1.0
    b = np.zeros(n + d)
    b[-1] = 1.0
    c = np.concatenate([model.c, np.zeros(d)])
    return A, b, c


def augmented_state(x: np.ndarray, buffer: np.ndarray) -> np.ndarray:
    return np.concatenate([x, buffer])


def build_predictor(model: DiscretePlant, hp: int, hu: int) -> Predictor:
    if not hp >= hu >= 1:
        raise ValueError(f"need hp >= hu >= 1, got hp={hp}, hu={hu}")
    A, b, c = augment(model)
    nx = A.shape[0]
    psi = np.empty((hp, nx))
    markov = np.empty(hp)  # c A^i b
    row = c.copy()
    for i in range(hp):
        markov[i] = row @ b
        row = row @ A
        psi[i] = row
    step = np.cumsum(markov)  # step[i] = response of y_{k+1+i} to a unit step at k
    theta = np.zeros((hp, hu))
    for j in range(hu):
        theta[j:, j] = step[: hp - j]
    return Predictor(psi=psi, upsilon=step.copy(), theta=theta)


class MpcController:
    """Unconstrained MPC minimizing ``q |r - y|^2 + r |dU|^2`` over the horizon.

    The Hessian is constant, so it is factorized once; each call to
    :meth:`control` is one triangular solve.
    """

    def __init__(self, model: DiscretePlant, params: ControllerParams, weights: MpcWeights | None = None):
        self.params = params
        self.weights = weights or MpcWeights.from_lambda(params.lambda_mpc)
        self.predictor = build_predictor(model, int(params.prediction_horizon), int(params.control_horizon))
        theta = self.predictor.theta
        hessian = self.weights.q * theta.T @ theta + self.weights.r * np.eye(theta.shape[1])
        try:
            self._factor = cho_factor(hessian)
        except np.linalg.LinAlgError as exc:
            raise ControllerFailure("MPC Hessian is not positive definite") from exc
        if np.linalg.cond(hessian) > 1e14:
            raise ControllerFailure("MPC Hessian is numerically singular")

    def solve(self, xi_hat: np.ndarray, u_prev: float, ref_window: np.ndarray) -> np.ndarray:
        """Optimal move sequence ``dU``."""
        hp = self.predictor.hp
        ref = np.asarray(ref_window, dtype=float)
        if ref.size < hp:
            ref = np.concatenate([ref, np.full(hp - ref.size, ref[-1])])
        error = ref[:hp] - self.predictor.free_response(xi_hat, u_prev)
        du = cho_solve(self._factor, self.weights.q * self.predictor.theta.T @ error)
        if not np.all(np.isfinite(du)):
            raise ControllerFailure("non-finite MPC solution")
        return du

    def control(self, xi_hat: np.ndarray, u_prev: float, ref_window: np.ndarray) -> float:
        return float(u_prev + self.solve(xi_hat, u_prev, ref_window)[0])

    def first_move_gain(self) -> np.ndarray:
        """Row ``g`` such that ``dU_0 = g @ (ref - free_response)``."""
        theta = self.predictor.theta
        return cho_solve(self._factor, self.weights.q * theta.T)[0]


def mpc_cost(predictor: Predictor, weights: MpcWeights, xi: np.ndarray, u_prev: float, ref: np.ndarray, du: np.ndarray) -> float:
    e = ref[: predictor.hp] - predictor.free_response(xi, u_prev) - predictor.theta @ du
    return float(weights.q * e @ e + weights.r * du @ du)


def kf_predict(
    model: DiscretePlant, x: np.ndarray, P: np.ndarray, u: float, config: KfConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Time update with the (already delayed) input ``u`` acting on the plant."""
    x_pred = model.A @ x + model.b * u
    P_pred = model.A @ P @ model.A.T + config.process_var * np.eye(model.order)
    return x_pred, 0.5 * (P_pred + P_pred.T)


def kf_update(
    model: DiscretePlant, x_pred: np.ndarray, P_pred: np.ndarray, y: float, config: KfConfig
) -> tuple[np.ndarray, np.ndarray]:
    c = model.c
    s = float(c @ P_pred @ c) + config.measurement_var
    if not (np.isfinite(s) and s > 0):
        raise ControllerFailure("innovation covariance is singular")
    gain = P_pred @ c / s
    x = x_pred + gain * (y - c @ x_pred)
    # Joseph form keeps P symmetric positive semidefinite.
    I_KC = np.eye(model.order) - np.outer(gain, c)
    P = I_KC @ P_pred @ I_KC.T + config.measurement_var * np.outer(gain, gain)
    return x, 0.5 * (P + P.T)


class KalmanFilter:
    """Stateful wrapper around :func:`kf_predict` / :func:`kf_update`."""

    def __init__(self, model: DiscretePlant, config: KfConfig):
        self.model = model
        self.config = config
        self.x = np.zeros(model.order)
        self.P = np.eye(model.order)

    def predict(self, u_delayed: float) -> None:
        self.x, self.P = kf_predict(self.model, self.x, self.P, u_delayed, self.config)

    def update(self, y: float) -> np.ndarray:
        self.x, self.P = kf_update(self.model, self.x, self.P, y, self.config)
        return self.x
