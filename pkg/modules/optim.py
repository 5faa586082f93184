"""
Optimisation
============
ADAM with L2 folded into the gradient, and the lambda warm-up schedule
for the adversarial term.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, Tuple

import numpy as np

from modules.error_handler import DimensionMismatch, ValidationError
from modules.model import PARAM_KEYS, Gradients, ModelParams

logger = logging.getLogger("modules.optim")


@dataclass(frozen=True)
class AdamState:
    """Moment accumulators per parameter block, the timestep and the hyper-parameters."""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_adam_state(params: ModelParams, alpha: float = 0.001, beta1: float = 0.9,
                    beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    if alpha <= 0.0 or not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0 or epsilon <= 0.0:
        raise ValidationError(
            f"invalid ADAM hyper-parameters alpha={alpha} beta1={beta1} beta2={beta2} epsilon={epsilon}"
        )
    zeros = {k: np.zeros_like(v) for k, v in params.as_dict().items()}
    return AdamState(zeros, {k: z.copy() for k, z in zeros.items()}, 0, alpha, beta1, beta2, epsilon)


def adam_step(state: AdamState, params: ModelParams, grads: Gradients, l2_strength: float = 0.0,
              frozen: Iterable[str] = ()) -> Tuple[AdamState, ModelParams]:
    """
    One bias-corrected ADAM step on grads + 2 * l2_strength * param.

    Frozen blocks keep their values and their moments. Inputs are not mutated.

    Raises:
        DimensionMismatch: gradient block shapes differ from the parameters
    """
    grads.check_congruent(params)
    frozen = set(frozen)
    t = state.t + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t

    new_m, new_v, new_params = {}, {}, {}
    param_arrays = params.as_dict()
    grad_arrays = grads.as_dict()
    for key in PARAM_KEYS:
        p = param_arrays[key]
        if state.m[key].shape != p.shape:
            raise DimensionMismatch(f"adam_step.{key}", state.m[key].shape, p.shape)
        if key in frozen:
            new_m[key], new_v[key], new_params[key] = state.m[key], state.v[key], p
            continue
        g = grad_arrays[key]
        if l2_strength:
            g = g + 2.0 * l2_strength * p
        m = state.beta1 * state.m[key] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[key] + (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[key] = p - state.alpha * m_hat / (np.sqrt(v_hat) + state.epsilon)
        new_m[key], new_v[key] = m, v

    new_state = AdamState(new_m, new_v, t, state.alpha, state.beta1, state.beta2, state.epsilon)
    return new_state, params.replace(**new_params)


# ============================================================================
# LAMBDA SCHEDULE
# ============================================================================

@dataclass(frozen=True)
class LambdaSchedule:
    """lambda(p) = 2 / (1 + exp(-gamma * p)) - 1, p = step / total_steps."""
    total_steps: int
    gamma: float = 10.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValidationError(f"lambda schedule needs total_steps >= 1, got {self.total_steps}")


def lambda_at(schedule: LambdaSchedule, step: int) -> float:
    """Reversal weight after `step` minibatches; progress is clamped to [0, 1]."""
    p = min(max(step / schedule.total_steps, 0.0), 1.0)
    return 2.0 / (1.0 + math.exp(-schedule.gamma * p)) - 1.0
