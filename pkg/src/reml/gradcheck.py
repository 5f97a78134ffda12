"""Central finite-difference checks for the analytic gradients."""
from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np


def numerical_gradient(f: Callable[[], float], params: dict[str, np.ndarray], h: float = 1e-5) -> dict[str, np.ndarray]:
    """Perturb each entry in place by +-h; every array is restored afterwards."""
    out = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        out[name] = g
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """||a - n|| / max(||a||, ||n||, floor) over the flattened arrays."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


@dataclass
class GradCheck:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def ok(self) -> bool:
        return self.max_error <= self.tolerance


def check_model_gradients(
    model: object,
    access: Sequence[object],
    X: np.ndarray,
    Y: np.ndarray,
    sessions: Sequence[str],
    soft: bool = True,
    temperature: float = 1.0,
    h: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheck:
    theta, omega = model.parameters(access)
    params = {**theta, **omega}

    def loss() -> float:
        return model.batch_loss_and_gradients(X, Y, sessions, access, soft, temperature)[0]

    _, analytic = model.batch_loss_and_gradients(X, Y, sessions, access, soft, temperature)
    numeric = numerical_gradient(loss, params, h)
    errors = {k: relative_error(analytic.get(k, np.zeros_like(numeric[k])), numeric[k]) for k in params}
    return GradCheck(errors, tolerance)
