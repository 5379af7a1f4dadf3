"""SPSA, the ZOPrO direction sampler and the first-order RLOO baseline.

Sign convention: objectives are rewards to maximise, so every step ascends.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .models import MlpPolicy, RewardModel
from .objectives import PromptBatch, rloo_gradient
from .params import (
    NoiseSpec,
    compose_perturbation,
    project_orthogonal,
    sample_gaussian,
)

logger = logging.getLogger(__name__)

# |projected gradient| above this skips the step instead of applying it
DIVERGENCE_LIMIT = 1e6


class ObjectiveDivergence(RuntimeError):
    """The objective returned a non-finite value; ``params`` is the offending point."""

    def __init__(self, message: str, params: np.ndarray | None = None, context: dict | None = None):
        super().__init__(message)
        self.params = params
        self.context = dict(context or {})


@dataclass
class SpsaConfig:
    epsilon: float = 1e-4
    eta: float = 1e-5
    eta_decay: bool = True
    steps_per_iteration: int = 200
    epsilon_decay: bool = False

    def __post_init__(self):
        if not self.epsilon > 0 or not self.eta > 0:
            raise ValueError("epsilon and eta must be positive")
        if self.steps_per_iteration < 0:
            raise ValueError("steps_per_iteration must be non-negative")


@dataclass
class IterationState:
    delta_pi: np.ndarray | None = None
    delta_r: np.ndarray | None = None
    step_index: int = 0
    iteration_index: int = 1

    @property
    def cold(self) -> bool:
        return self.delta_pi is None


def alpha_schedule(step_index: int, steps_per_iteration: int) -> float:
    """Linear decay from 1 at the first step to 0 at the last."""
    if not 0 <= step_index < steps_per_iteration:
        raise ValueError(f"step {step_index} outside [0, {steps_per_iteration})")
    if steps_per_iteration == 1:
        return 0.0
    return 1.0 - step_index / (steps_per_iteration - 1)


def linear_decay(value: float, step: int, total_steps: int) -> float:
    """``value`` decayed linearly to zero over ``total_steps``."""
    if total_steps <= 0:
        return value
    return value * max(0.0, 1.0 - step / total_steps)


class Direction(NamedTuple):
    z: np.ndarray
    u: np.ndarray | None
    alpha: float | None
    flag: str | None


def zopro_direction(state: IterationState, dim: int, noise_seed: int,
                    steps_per_iteration: int) -> Direction:
    """Perturbation direction for the current step.

    On the first iteration this is the raw Gaussian draw. Afterwards the draw
    is projected off the last reward-trunk update, rescaled to the norm of the
    last policy update and blended with it using the alpha schedule.
    """
    g = sample_gaussian(NoiseSpec(noise_seed, dim))
    if state.cold or state.iteration_index <= 1:
        return Direction(g, None, None, "cold-start")
    if state.delta_pi.shape != (dim,):
        raise ValueError("policy delta does not match the parameter dimension")
    flags = []
    if state.delta_r is None:
        u, proj_flag = g, "no-projection"
    else:
        u, proj_flag = project_orthogonal(g, state.delta_r)
    if proj_flag:
        flags.append(proj_flag)
    alpha = alpha_schedule(state.step_index, steps_per_iteration)
    z, comp_flag = compose_perturbation(state.delta_pi, u, alpha)
    if comp_flag:
        flags.append(comp_flag)
    return Direction(z, u, alpha, ",".join(flags) or None)


class SpsaResult(NamedTuple):
    params: np.ndarray
    projected_grad: float
    j_plus: float
    j_minus: float
    skipped: bool


def spsa_step(params: np.ndarray, objective: Callable[[np.ndarray, int], float], z: np.ndarray,
              epsilon: float, eta: float, rollout_seed: int) -> SpsaResult:
    """One two-point SPSA ascent step along ``z``.

    ``objective(theta, rollout_seed)`` is evaluated at ``params +/- epsilon*z``
    with the same seed so both sides share their randomness.
    """
    if not epsilon > 0 or eta < 0:
        raise ValueError("epsilon must be positive and eta non-negative")
    plus = params + epsilon * z
    j_plus = objective(plus, rollout_seed)
    if not np.isfinite(j_plus):
        raise ObjectiveDivergence("objective is not finite at theta + eps*z", plus)
    minus = params - epsilon * z
    j_minus = objective(minus, rollout_seed)
    if not np.isfinite(j_minus):
        raise ObjectiveDivergence("objective is not finite at theta - eps*z", minus)
    pg = (j_plus - j_minus) / (2.0 * epsilon)
    if not np.isfinite(pg) or abs(pg) > DIVERGENCE_LIMIT:
        logger.warning("skipping step: projected gradient %.3g exceeds guard", pg)
        return SpsaResult(params, float(pg), float(j_plus), float(j_minus), True)
    if eta == 0.0:
        return SpsaResult(params, float(pg), float(j_plus), float(j_minus), False)
    updated = params + (eta * pg) * z
    if not np.all(np.isfinite(updated)):
        raise ObjectiveDivergence("update produced non-finite parameters", params)
    return SpsaResult(updated, float(pg), float(j_plus), float(j_minus), False)


def first_order_rloo_step(policy: MlpPolicy, rm: RewardModel, batch: PromptBatch, k: int,
                          eta: float, rollout_seed: int, reference: MlpPolicy | None = None,
                          kl_coef: float = 0.0) -> np.ndarray:
    """Gradient-ascent step on the RLOO objective using backprop."""
    grad = rloo_gradient(policy, rm, batch, k, rollout_seed, reference, kl_coef)
    return policy.params + eta * grad
