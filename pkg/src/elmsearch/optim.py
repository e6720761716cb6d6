"""Adam with linear warmup then linear decay, over named parameter dicts."""

from __future__ import annotations

import numpy as np

from . import kernels


def warmup_linear_decay(step: int, total_steps: int, warmup_frac: float) -> float:
    """Schedule multiplier in [0, 1]; `step` is 1-based."""
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step <= warmup:
        return step / warmup
    if total_steps <= warmup:
        return 1.0
    return max(0.0, (total_steps - step) / (total_steps - warmup))


class Adam:
    def __init__(
        self,
        params: dict[str, np.ndarray],
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {k: np.zeros_like(v) for k, v in params.items()}
        self._v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr_scale: float = 1.0) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        lr = self.learning_rate * lr_scale
        for name, param in self.params.items():
            kernels.adam_step(
                param.reshape(-1),
                np.ascontiguousarray(grads[name].reshape(-1)),
                self._m[name].reshape(-1),
                self._v[name].reshape(-1),
                lr, self.beta1, self.beta2, self.eps, bc1, bc2,
            )
