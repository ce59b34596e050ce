from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from .autodiff import Parameter
from .errors import InvalidConfig, ShapeError, TrainingDiverged


@dataclass
class AdamState:
    """Hyper-parameters and moment accumulators, keyed by parameter name."""

    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    step_count: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidConfig(f"Learning rate must be positive: {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidConfig(f"Betas must be in [0, 1): {self.beta1}, {self.beta2}")


def adam_step(
    params: Sequence[Parameter],
    state: AdamState,
    grads: Optional[Mapping[str, np.ndarray]] = None,
):
    """
    Apply one bias-corrected Adam update in place.

    Gradients default to the `grad` of each parameter; parameters without a gradient or marked
    non-trainable are skipped.

    Raises:
        TrainingDiverged: If any gradient is NaN or infinite (nothing is updated)
        ShapeError: If a gradient doesn't match its parameter
    """
    updates = []
    for param in params:
        grad = grads.get(param.name) if grads is not None else param.grad
        if grad is None or not param.trainable:
            continue
        if grad.shape != param.shape:
            raise ShapeError(
                f"Gradient of '{param.name}' has shape {grad.shape}, not {param.shape}"
            )
        if not np.all(np.isfinite(grad)):
            raise TrainingDiverged(f"Non-finite gradient for '{param.name}'")
        updates.append((param, grad))

    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t
    for param, grad in updates:
        m = state.first_moment.setdefault(param.name, np.zeros_like(param.data))
        v = state.second_moment.setdefault(param.name, np.zeros_like(param.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(grad)
        param.data -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
