"""
Levenberg-Marquardt training of FaceModel.

Residuals are e = z - a, with J = de/dW in the flat parameter layout, so
J^T e is the gradient of L = 1/2 sum(e^2) and every accepted step solves

    (J^T J + mu I) dW = -J^T e

J is never held whole: J^T J and J^T e are accumulated over row batches.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import DataError, FactorizationError
from .face_model import FaceModel, FlatWeights, flatten, parameter_count, predict, unflatten
from .point_cloud import PointCloud

logger = logging.getLogger(__name__)

# Training targets stay clear of the tanh asymptotes.
TARGET_CLAMP = 1.0 - 1e-6
MU_FLOOR = 1e-15
MAX_RETRIES_PER_EPOCH = 50


class StopReason(str, Enum):
    TARGET_MSE = "target_mse"
    MAX_EPOCHS = "max_epochs"
    MU_MAX = "mu_max"
    GRADIENT_MIN = "gradient_min"


@dataclass(frozen=True)
class LmConfig:
    target_mse: float = 0.0002
    max_epochs: int = 1000
    mu_initial: float = 0.001
    beta: float = 10.0
    mu_max: float = 1e10
    gradient_min: float = 1e-7
    seed: int = 0
    hidden_count: int = 500
    batch_size: int = 2048

    def __post_init__(self):
        if not self.target_mse > 0:
            raise DataError("lmtrain: target_mse must be positive")
        if self.max_epochs < 1:
            raise DataError("lmtrain: max_epochs must be >= 1")
        if not 0 < self.mu_initial < self.mu_max:
            raise DataError("lmtrain: need 0 < mu_initial < mu_max")
        if not self.beta > 1:
            raise DataError("lmtrain: beta must be > 1")
        if not self.gradient_min > 0:
            raise DataError("lmtrain: gradient_min must be positive")
        if self.hidden_count < 1:
            raise DataError("lmtrain: hidden_count must be >= 1")
        if self.batch_size < 1:
            raise DataError("lmtrain: batch_size must be >= 1")


@dataclass
class TrainReport:
    final_mse: float
    epochs_used: int
    stop_reason: StopReason
    mse_history: List[float] = field(default_factory=list)
    mu_history: List[float] = field(default_factory=list)
    final_mu: float = 0.0
    gradient_norm: float = 0.0
    regression_r: float = 0.0
    point_count: int = 0
    hidden_count: int = 0


@dataclass(frozen=True, eq=False)
class NormalEquations:
    jtj: np.ndarray
    jte: np.ndarray
    sse: float

    @property
    def gradient_norm(self) -> float:
        return float(np.max(np.abs(self.jte)))


def _training_arrays(cloud: PointCloud) -> Tuple[np.ndarray, np.ndarray]:
    z = np.clip(cloud.z, -TARGET_CLAMP, TARGET_CLAMP)
    return cloud.xy, z


def output_jacobian(model: FaceModel, xy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Network outputs a and da/dW for a batch of inputs, columns in flat layout.

    Sensitivities run backwards from the output: the output layer's
    derivative is 1 - a^2, the hidden layer's is (1 - h^2) times the
    outgoing weight.
    """
    hidden = np.tanh(xy @ model.wi.T + model.bi)                 # (B, M)
    output = np.tanh(hidden @ model.wo + model.bo)              # (B,)

    output_sensitivity = 1.0 - output ** 2                      # (B,)
    hidden_sensitivity = output_sensitivity[:, None] * model.wo * (1.0 - hidden ** 2)

    batch, hidden_count = hidden.shape
    blocks = np.empty((batch, hidden_count, 4))
    blocks[:, :, 0] = hidden_sensitivity * xy[:, 0:1]
    blocks[:, :, 1] = hidden_sensitivity * xy[:, 1:2]
    blocks[:, :, 2] = hidden_sensitivity
    blocks[:, :, 3] = output_sensitivity[:, None] * hidden

    jacobian = np.empty((batch, parameter_count(hidden_count)))
    jacobian[:, :-1] = blocks.reshape(batch, -1)
    jacobian[:, -1] = output_sensitivity
    return output, jacobian


def _normal_equations(model: FaceModel, xy: np.ndarray, z: np.ndarray,
                      batch_size: int) -> NormalEquations:
    size = model.parameter_count
    jtj = np.zeros((size, size))
    jte = np.zeros(size)
    sse = 0.0
    for start in range(0, len(z), batch_size):
        stop = start + batch_size
        output, output_jac = output_jacobian(model, xy[start:stop])
        errors = z[start:stop] - output
        # e = z - a, so J = -da/dW
        jacobian = -output_jac
        jtj += jacobian.T @ jacobian
        jte += jacobian.T @ errors
        sse += float(errors @ errors)
    return NormalEquations(jtj, jte, sse)


def gradient(model: FaceModel, xy: np.ndarray, z: np.ndarray,
             batch_size: int = 2048) -> Tuple[np.ndarray, float]:
    """J^T e and the sum of squared errors, without forming J^T J."""
    jte = np.zeros(model.parameter_count)
    sse = 0.0
    for start in range(0, len(z), batch_size):
        stop = start + batch_size
        output, output_jac = output_jacobian(model, xy[start:stop])
        errors = z[start:stop] - output
        jte -= output_jac.T @ errors
        sse += float(errors @ errors)
    return jte, sse


def accumulate_normal_equations(model: FaceModel, cloud: PointCloud,
                                batch_size: int = 2048) -> NormalEquations:
    if batch_size < 1:
        raise DataError("lmtrain: batch_size must be >= 1")
    xy, z = _training_arrays(cloud)
    return _normal_equations(model, xy, z, batch_size)


def solve_damped(jtj: np.ndarray, jte: np.ndarray, mu: float) -> np.ndarray:
    """dW solving (J^T J + mu I) dW = -J^T e, by Cholesky factorization."""
    system = np.array(jtj, dtype=np.float64, copy=True)
    system[np.diag_indices_from(system)] += mu
    try:
        factor = cho_factor(system, lower=True, check_finite=True)
    except (LinAlgError, ValueError) as exc:
        raise FactorizationError(f"lmtrain: damped system is not positive definite (mu={mu:g})") from exc
    return -cho_solve(factor, jte)


def lm_step(model: FaceModel, neq: NormalEquations, mu: float) -> FaceModel:
    if not mu > 0:
        raise DataError(f"lmtrain: mu must be positive, got {mu}")
    delta = solve_damped(neq.jtj, neq.jte, mu)
    candidate = flatten(model).values + delta
    if not np.all(np.isfinite(candidate)):
        raise FactorizationError("lmtrain: step produced non-finite weights")
    return unflatten(FlatWeights(candidate, model.hidden_count))


def init_weights(hidden_count: int, seed: int) -> FaceModel:
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]; fan_in is 2 for hidden units, M for the output."""
    if hidden_count < 1:
        raise DataError("lmtrain: hidden_count must be >= 1")
    rng = np.random.default_rng(seed)
    hidden_bound = 1.0 / math.sqrt(2.0)
    output_bound = 1.0 / math.sqrt(hidden_count)
    return FaceModel(
        wi=rng.uniform(-hidden_bound, hidden_bound, size=(hidden_count, 2)),
        bi=rng.uniform(-hidden_bound, hidden_bound, size=hidden_count),
        wo=rng.uniform(-output_bound, output_bound, size=hidden_count),
        bo=rng.uniform(-output_bound, output_bound),
    )


def _sse(model: FaceModel, xy: np.ndarray, z: np.ndarray) -> float:
    errors = z - predict(model, xy)
    return float(errors @ errors)


def regression_r(model: FaceModel, cloud: PointCloud) -> float:
    """Pearson correlation between model outputs and cloud depths."""
    outputs = predict(model, cloud.xy)
    if np.std(outputs) == 0 or np.std(cloud.z) == 0:
        return 1.0 if np.allclose(outputs, cloud.z) else 0.0
    return float(np.corrcoef(outputs, cloud.z)[0, 1])


class LmTrainer:
    """Owns one training run; not shareable while training."""

    def __init__(self, config: LmConfig):
        self.config = config
        self.mu = config.mu_initial
        self.model: Optional[FaceModel] = None

    def train(self, cloud: PointCloud, initial: Optional[FaceModel] = None) -> Tuple[FaceModel, TrainReport]:
        config = self.config
        xy, z = _training_arrays(cloud)
        count = len(z)
        hidden_count = initial.hidden_count if initial is not None else config.hidden_count
        if count < parameter_count(hidden_count):
            logger.warning(
                "lmtrain: %d points for %d parameters; the fit is underdetermined",
                count, parameter_count(hidden_count),
            )

        self.model = initial if initial is not None else init_weights(hidden_count, config.seed)
        self.mu = config.mu_initial
        neq = _normal_equations(self.model, xy, z, config.batch_size)
        mse_history = [neq.sse / count]
        mu_history: List[float] = []
        stop_reason: Optional[StopReason] = None
        epochs = 0

        if mse_history[-1] < config.target_mse:
            stop_reason = StopReason.TARGET_MSE

        while stop_reason is None and epochs < config.max_epochs:
            epochs += 1
            if neq.gradient_norm < config.gradient_min:
                stop_reason = StopReason.GRADIENT_MIN
                break

            neq, accepted, stop_reason = self._epoch(neq, xy, z)
            mu_history.append(self.mu)
            if accepted:
                mse_history.append(neq.sse / count)
                logger.debug("lmtrain: epoch %d mse %.3e mu %.1e", epochs, mse_history[-1], self.mu)
            if stop_reason is None and mse_history[-1] < config.target_mse:
                stop_reason = StopReason.TARGET_MSE

        if stop_reason is None:
            stop_reason = StopReason.MAX_EPOCHS

        report = TrainReport(
            final_mse=mse_history[-1],
            epochs_used=epochs,
            stop_reason=stop_reason,
            mse_history=mse_history,
            mu_history=mu_history,
            final_mu=self.mu,
            gradient_norm=neq.gradient_norm,
            regression_r=regression_r(self.model, cloud),
            point_count=count,
            hidden_count=hidden_count,
        )
        logger.info(
            "lmtrain: stopped on %s after %d epochs, mse %.3e",
            stop_reason.value, epochs, report.final_mse,
        )
        return self.model, report

    def _epoch(self, neq: NormalEquations, xy: np.ndarray, z: np.ndarray):
        config = self.config
        for _ in range(MAX_RETRIES_PER_EPOCH):
            try:
                candidate = lm_step(self.model, neq, self.mu)
            except FactorizationError:
                candidate = None

            if candidate is not None and _sse(candidate, xy, z) < neq.sse:
                self.model = candidate
                self.mu = max(self.mu / config.beta, MU_FLOOR)
                return _normal_equations(candidate, xy, z, config.batch_size), True, None

            self.mu *= config.beta
            if self.mu > config.mu_max:
                self.mu = config.mu_max
                return neq, False, StopReason.MU_MAX
        return neq, False, None


def train_lm(cloud: PointCloud, config: Optional[LmConfig] = None,
             initial: Optional[FaceModel] = None) -> Tuple[FaceModel, TrainReport]:
    return LmTrainer(config or LmConfig()).train(cloud, initial)


def train_gd(cloud: PointCloud, learning_rate: float, epochs: int, seed: int,
             hidden_count: int = 50, target_mse: Optional[float] = None,
             initial: Optional[FaceModel] = None,
             batch_size: int = 2048) -> Tuple[FaceModel, TrainReport]:
    """
    Full-batch gradient descent on the mean loss, W -= alpha * J^T e / N.
    A convergence baseline for the LM trainer.
    """
    if not learning_rate > 0:
        raise DataError("lmtrain: learning_rate must be positive")
    if epochs < 1:
        raise DataError("lmtrain: epochs must be >= 1")

    xy, z = _training_arrays(cloud)
    count = len(z)
    model = initial if initial is not None else init_weights(hidden_count, seed)
    jte, sse = gradient(model, xy, z, batch_size)
    mse_history = [sse / count]
    stop_reason = StopReason.MAX_EPOCHS
    used = 0

    for used in range(1, epochs + 1):
        values = flatten(model).values - learning_rate * jte / count
        model = unflatten(FlatWeights(values, model.hidden_count))
        jte, sse = gradient(model, xy, z, batch_size)
        mse_history.append(sse / count)
        if target_mse is not None and mse_history[-1] < target_mse:
            stop_reason = StopReason.TARGET_MSE
            break

    report = TrainReport(
        final_mse=mse_history[-1],
        epochs_used=used,
        stop_reason=stop_reason,
        mse_history=mse_history,
        gradient_norm=float(np.max(np.abs(jte))),
        regression_r=regression_r(model, cloud),
        point_count=count,
        hidden_count=model.hidden_count,
    )
    return model, report
