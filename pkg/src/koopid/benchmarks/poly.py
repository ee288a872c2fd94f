"""Two-state polynomial system with an exact three-dimensional lifting.

    x1' = a x1
    x2' = b x2 - c x1**2

With observables ``(x1, x2, x1**2)`` the lifted dynamics are linear. Lifted
states that do not satisfy ``z3 = z1**2`` do not correspond to any state of
the original system; :func:`koopid.analysis.compliance_residual` measures the
violation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["PolySystem", "poly_step", "poly_lift", "poly_lifted_A", "poly_output_matrix",
           "poly_trajectory", "lifted_trajectory"]


@dataclass(frozen=True)
class PolySystem:
    a: float = 0.99
    b: float = 0.9
    c: float = 0.9

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "c": self.c}


def _state(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 2:
        raise ValueError(f"polynomial system state must have 2 entries, got shape {x.shape}")
    return x


def poly_step(sys: PolySystem, x) -> np.ndarray:
    x = _state(x)
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([sys.a * x1, sys.b * x2 - sys.c * x1**2], axis=-1)


def poly_lift(x) -> np.ndarray:
    x = _state(x)
    return np.concatenate([x, x[..., :1] ** 2], axis=-1)


def poly_lifted_A(sys: PolySystem) -> np.ndarray:
    return np.array([[sys.a, 0.0, 0.0],
                     [0.0, sys.b, -sys.c],
                     [0.0, 0.0, sys.a**2]])


def poly_output_matrix() -> np.ndarray:
    """Output map picking the original states out of the lifted state."""
    return np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def poly_trajectory(sys: PolySystem, x0, steps: int) -> np.ndarray:
    """States ``x[0..steps-1]`` of the nonlinear system."""
    out = np.empty((steps, 2))
    x = _state(x0).copy()
    for k in range(steps):
        out[k] = x
        x = poly_step(sys, x)
    return out


def lifted_trajectory(sys: PolySystem, z0, steps: int) -> np.ndarray:
    """Free response ``z[k] = A^k z0`` of the lifted linear system."""
    A = poly_lifted_A(sys)
    out = np.empty((steps, 3))
    z = np.asarray(z0, dtype=np.float64).copy()
    for k in range(steps):
        out[k] = z
        z = A @ z
    return out
