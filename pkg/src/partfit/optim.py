"""Adam minimizer with early stopping and best-so-far tracking.

Deterministic for fixed inputs; no global state.
"""

from dataclasses import dataclass

import numpy as np


class NumericFailureError(RuntimeError):
    """Objective or gradient became non-finite mid-run."""

    def __init__(self, step, message="non-finite objective value"):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass
class AdamResult:
    x: np.ndarray
    value: float
    steps_taken: int
    converged: bool
    initial_value: float


def minimize_adam(value_and_grad, x0, max_steps, learning_rate,
                  beta1=0.9, beta2=0.999, eps=1e-8,
                  lr_decay=0.97, lr_decay_every=10,
                  patience=10, min_relative_improvement=1e-5,
                  callback=None):
    """Run Adam on a flat parameter vector.

    `value_and_grad(x)` returns (scalar value, gradient). Stops at
    `max_steps` or when the relative one-step improvement stays below
    `min_relative_improvement` for `patience` consecutive evaluations.
    Returns the best evaluated iterate, never a worse-than-initial one.
    """
    x = np.array(x0, dtype=np.float64)
    m = np.zeros_like(x)
    v = np.zeros_like(x)

    f0, g = value_and_grad(x)
    if not np.isfinite(f0) or not np.all(np.isfinite(g)):
        raise NumericFailureError(0)
    best_x = x.copy()
    best_f = f0
    stall = 0
    steps = 0
    converged = False

    for step in range(1, max_steps + 1):
        lr = learning_rate * lr_decay ** ((step - 1) // lr_decay_every)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** step)
        v_hat = v / (1.0 - beta2 ** step)
        x = x - lr * m_hat / (np.sqrt(v_hat) + eps)
        steps = step

        f, g = value_and_grad(x)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            raise NumericFailureError(step)
        if callback is not None:
            callback(step, x, f)
        # Stall counting is against the best seen value, not the previous
        # step: Adam moves O(lr) per step even from a warm start near the
        # optimum, so step-over-step deltas never settle.
        if (best_f - f) / max(abs(best_f), 1e-12) >= min_relative_improvement:
            stall = 0
        else:
            stall += 1
        if f < best_f:
            best_f = f
            best_x = x.copy()
        if stall >= patience:
            converged = True
            break

    return AdamResult(x=best_x, value=best_f, steps_taken=steps,
                      converged=converged, initial_value=f0)
