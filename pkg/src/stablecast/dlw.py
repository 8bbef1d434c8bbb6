"""Dynamic loss weighting: policies that choose the instability weight each iteration.

Every policy exposes ``step(inputs) -> lam``. The returned weight is the one
used for the current update; any internal adaptation happens afterwards
(emit-then-adapt). Policies that own trainable scalars (uncertainty
weighting) also expose them through ``extra_params`` / ``extra_grads`` so the
trainer can hand them to the same Adam optimizer as the network.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

log = logging.getLogger(__name__)

POLICIES = ("static", "rw", "tarw", "gcossim", "weighted_gcossim", "gradnorm", "uw")


class DlwConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DlwConfig:
    policy: str = "static"
    lambda_static: float = 0.15
    kappa: float = 0.35
    alpha: float = 0.0
    lambda0: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise DlwConfigError(f"unknown policy {self.policy!r}; choose from {', '.join(POLICIES)}")
        if not 0.0 < self.kappa <= 1.0:
            raise DlwConfigError(f"kappa must lie in (0, 1], got {self.kappa}")
        if not 0.0 <= self.lambda_static <= 1.0:
            raise DlwConfigError(f"lambda_static must lie in [0, 1], got {self.lambda_static}")
        if not 0.0 <= self.lambda0 <= 1.0:
            raise DlwConfigError(f"lambda0 must lie in [0, 1], got {self.lambda0}")
        if self.alpha < 0.0:
            raise DlwConfigError(f"alpha must be >= 0, got {self.alpha}")


@dataclass
class DlwInputs:
    iteration: int
    loss_error: float
    loss_instability: float
    grad_error: np.ndarray
    grad_instability: np.ndarray
    initial_loss_error: Optional[float] = None
    initial_loss_instability: Optional[float] = None


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    """Cosine of the angle between two flat vectors; None if either is zero."""
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return None
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass
class Policy:
    """Base class; subclasses implement ``_emit``."""

    trajectory: List[float] = field(default_factory=list, init=False)

    def step(self, inputs: DlwInputs) -> float:
        lam = float(self._emit(inputs))
        if not 0.0 <= lam <= 1.0 or math.isnan(lam):
            raise AssertionError(f"{type(self).__name__} emitted lambda {lam} outside [0, 1]")
        self.trajectory.append(lam)
        self._adapt(inputs)
        return lam

    @property
    def last(self) -> Optional[float]:
        return self.trajectory[-1] if self.trajectory else None

    def _emit(self, inputs: DlwInputs) -> float:
        raise NotImplementedError

    def _adapt(self, inputs: DlwInputs) -> None:
        pass

    def extra_params(self) -> Dict[str, np.ndarray]:
        return {}

    def extra_grads(self, inputs: DlwInputs) -> Dict[str, np.ndarray]:
        return {}

    def set_extra_params(self, values: Dict[str, np.ndarray]) -> None:
        pass


@dataclass
class StaticLambda(Policy):
    lam: float = 0.15

    def _emit(self, inputs):
        return self.lam


@dataclass
class RandomWeighting(Policy):
    """lam ~ U(0, kappa); kappa = 1 is plain random weighting."""

    seed: int = 0
    kappa: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.kappa <= 1.0:
            raise DlwConfigError(f"kappa must lie in (0, 1], got {self.kappa}")
        self.rng = np.random.default_rng(self.seed)

    def _emit(self, inputs):
        return self.rng.uniform(0.0, self.kappa)


@dataclass
class GradCosSim(Policy):
    """0.5 when the task gradients point the same way, else 0.

    With ``weighted`` the weight is max(0, cos) / 2 instead.
    """

    weighted: bool = False

    def _emit(self, inputs):
        cos = cosine_similarity(inputs.grad_error, inputs.grad_instability)
        if cos is None:
            log.warning("iteration %d: zero-norm task gradient, cosine undefined; lambda=0", inputs.iteration)
            return 0.0
        if self.weighted:
            return max(0.0, cos) / 2.0
        return 0.5 if cos > 0.0 else 0.0


@dataclass
class GradNorm(Policy):
    """Two-task GradNorm on the shared parameter vector.

    Task weights start at (1 - lambda0, lambda0) and are kept summing to one,
    so the emitted weight is the instability task's weight directly.
    """

    alpha: float = 0.0
    lambda0: float = 0.05
    lr: float = 1e-3
    min_weight: float = 1e-6

    def __post_init__(self):
        self.weights = np.array([1.0 - self.lambda0, self.lambda0])
        self._warned = False

    def _emit(self, inputs):
        return float(self.weights[1])

    def _rates(self, inputs) -> np.ndarray:
        init = np.array([inputs.initial_loss_error or 0.0, inputs.initial_loss_instability or 0.0])
        if np.any(init <= 0.0):
            if not self._warned:
                log.warning("GradNorm: initial loss is zero, training-rate ratio undefined; using r=1")
                self._warned = True
            return np.ones(2)
        ratio = np.array([inputs.loss_error, inputs.loss_instability]) / init
        if ratio.mean() <= 0.0:
            return np.ones(2)
        return ratio / ratio.mean()

    def _adapt(self, inputs):
        norms = np.array([np.linalg.norm(inputs.grad_error), np.linalg.norm(inputs.grad_instability)])
        g = self.weights * norms
        target = g.mean() * self._rates(inputs) ** self.alpha
        # d/dw_k sum_j |G_j - target_j| with the targets held constant
        grad = np.sign(g - target) * norms
        w = np.maximum(self.weights - self.lr * grad, self.min_weight)
        self.weights = w / w.sum()


@dataclass
class UncertaintyWeighting(Policy):
    """Learned log-variances s_k; objective sum_k exp(-s_k) L_k + s_k / 2.

    The emitted weight is the instability share of the precisions.
    """

    log_var_error: float = 0.0
    log_var_instability: float = 0.0

    def _emit(self, inputs):
        return uw_lambda(self.log_var_error, self.log_var_instability)

    def extra_params(self):
        return {"uw.log_var_error": np.array([self.log_var_error]),
                "uw.log_var_instability": np.array([self.log_var_instability])}

    def extra_grads(self, inputs):
        return {
            "uw.log_var_error": np.array([0.5 - math.exp(-self.log_var_error) * inputs.loss_error]),
            "uw.log_var_instability": np.array([0.5 - math.exp(-self.log_var_instability) * inputs.loss_instability]),
        }

    def set_extra_params(self, values):
        self.log_var_error = float(values["uw.log_var_error"][0])
        self.log_var_instability = float(values["uw.log_var_instability"][0])


def uw_lambda(log_var_error: float, log_var_instability: float) -> float:
    # softmax form of exp(-s_s) / (exp(-s_e) + exp(-s_s)), overflow-safe
    d = log_var_instability - log_var_error
    if d >= 0:
        e = math.exp(-d)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(d))


def make_policy(config: DlwConfig, lr: float = 1e-3) -> Policy:
    """Build a policy; ``lr`` is the GradNorm weight learning rate (the network's)."""
    if config.policy == "static":
        return StaticLambda(lam=config.lambda_static)
    if config.policy == "rw":
        return RandomWeighting(seed=config.seed, kappa=1.0)
    if config.policy == "tarw":
        return RandomWeighting(seed=config.seed, kappa=config.kappa)
    if config.policy == "gcossim":
        return GradCosSim(weighted=False)
    if config.policy == "weighted_gcossim":
        return GradCosSim(weighted=True)
    if config.policy == "gradnorm":
        return GradNorm(alpha=config.alpha, lambda0=config.lambda0, lr=lr)
    if config.policy == "uw":
        return UncertaintyWeighting()
    raise DlwConfigError(config.policy)


TRAJECTORY_COLUMNS = ("iteration", "lambda", "cosine_similarity", "L_error", "L_instability")


def write_trajectory(path, records) -> None:
    """Lambda trajectory CSV from trainer records (dicts with the RunLog keys)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for r in records:
            cos = r["cosine_similarity"]
            w.writerow([r["iteration"], repr(r["lambda"]), "" if cos is None else repr(cos),
                        repr(r["L_error"]), repr(r["L_instability"])])
