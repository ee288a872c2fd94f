"""Structural diagnostics and the NRMS metric."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

__all__ = ["ObservabilityReport", "observability_matrix", "observability_rank",
           "compliance_residual", "spectral_radius", "nrms"]


@dataclass
class ObservabilityReport:
    n: int
    rank: int
    n_z: int
    full_rank: bool
    singular_values: list[float]
    tolerance: float

    def to_dict(self) -> dict:
        return asdict(self)


def _square(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"A must be square, got shape {A.shape}")
    return A


def observability_matrix(A, C, n: int) -> np.ndarray:
    """Stacked ``[C; CA; ...; CA^(n-1)]``."""
    A = _square(A)
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    if C.shape[1] != A.shape[0]:
        raise ValueError(f"C has {C.shape[1]} columns but A is {A.shape[0]}x{A.shape[0]}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    blocks = [C]
    for _ in range(n - 1):
        blocks.append(blocks[-1] @ A)
    return np.vstack(blocks)


def observability_rank(A, C, n: int) -> ObservabilityReport:
    """Numerical rank of the linear observability matrix of ``(A, C)`` over ``n`` steps.

    Singular values below ``max(rows, cols) * sigma_max * 1e-12`` count as zero.
    """
    O = observability_matrix(A, C, n)
    s = np.linalg.svd(O, compute_uv=False)
    smax = float(s[0]) if s.size else 0.0
    tol = max(O.shape) * smax * 1e-12
    rank = int(np.sum(s > tol))
    n_z = O.shape[1]
    return ObservabilityReport(n=int(n), rank=rank, n_z=n_z, full_rank=rank == n_z,
                               singular_values=[float(v) for v in s], tolerance=float(tol))


def compliance_residual(z):
    """``z1**2 - z3`` for the polynomial example; zero on the compliant surface.

    Accepts a single lifted state or a batch with states along the last axis.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] < 3:
        raise ValueError(f"lifted state needs at least 3 entries, got shape {z.shape}")
    r = z[..., 0] ** 2 - z[..., 2]
    return float(r) if r.ndim == 0 else r


def spectral_radius(A) -> float:
    A = _square(A)
    if A.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def nrms(y_hat, y, skip: int = 0) -> float:
    """Root-mean-square error normalized by the output standard deviation.

    The first ``skip`` samples are ignored. Both the error and the standard
    deviation (population convention, about the per-channel mean) are taken
    over the remaining samples and pooled across channels::

        sqrt(sum ||y_hat - y||^2 / sum ||y - mean(y)||^2)

    so predicting the mean gives exactly 1.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y_hat.ndim == 1:
        y_hat = y_hat[:, None]
    if y_hat.shape != y.shape:
        raise ValueError(f"prediction shape {y_hat.shape} does not match output shape {y.shape}")
    if skip < 0:
        raise ValueError("skip must be nonnegative")
    y_hat, y = y_hat[skip:], y[skip:]
    if len(y) == 0:
        raise ValueError("no samples left after skipping")
    spread = float(np.sum((y - y.mean(axis=0)) ** 2))
    if not spread > 0.0:
        raise ValueError("output is constant over the scored samples; NRMS is undefined")
    return float(np.sqrt(np.sum((y_hat - y) ** 2) / spread))
