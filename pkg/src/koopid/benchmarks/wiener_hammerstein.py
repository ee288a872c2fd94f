"""Wiener-Hammerstein benchmark and its exact finite-dimensional Koopman form.

Two SISO LTI blocks around a cubic static nonlinearity, with one scalar noise
``e`` entering both blocks and the output::

    x[k+1]    = A1 x[k] + B1 u[k] + K1 e[k],        v[k] = C1 x[k]
    w[k]      = a0 + a1 v + a2 v**2 + a3 v**3
    xb[k+1]   = A2 xb[k] + B2 w[k] + K2 e[k]
    y[k]      = C2 xb[k] + e[k]

Lifting with ``[x, x(2), x(3), xb, 1]`` (Kronecker powers plus a constant
that carries ``a0``) makes the dynamics exactly of the form
``z' = A z + B(z, u) u + K(z, u, e) e``, ``y = C z + e``. The redundant
Kronecker coordinates can be reduced to unique monomials; for two-state blocks
that gives ``2 + 3 + 4 + 2 + 1 = 12`` lifted states.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from itertools import combinations_with_replacement, product

import numpy as np

__all__ = ["WhSystem", "wh_step", "wh_simulate", "WhLiftedModel", "wh_exact_embedding",
           "kron_power", "symmetric_reduction"]


def _vec(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).reshape(-1)


@dataclass
class WhSystem:
    A1: np.ndarray
    B1: np.ndarray
    K1: np.ndarray
    C1: np.ndarray
    A2: np.ndarray
    B2: np.ndarray
    K2: np.ndarray
    C2: np.ndarray
    alpha: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.5, 0.25]))

    def __post_init__(self):
        self.A1 = np.asarray(self.A1, dtype=np.float64)
        self.A2 = np.asarray(self.A2, dtype=np.float64)
        for name in ("B1", "K1", "C1", "B2", "K2", "C2"):
            setattr(self, name, _vec(getattr(self, name)))
        self.alpha = _vec(self.alpha)
        nx, nxb = self.A1.shape[0], self.A2.shape[0]
        if self.A1.shape != (nx, nx) or self.A2.shape != (nxb, nxb):
            raise ValueError("A1 and A2 must be square")
        for name, n in (("B1", nx), ("K1", nx), ("C1", nx), ("B2", nxb), ("K2", nxb), ("C2", nxb)):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have {n} entries")
        if self.alpha.shape != (4,):
            raise ValueError("alpha holds the 4 cubic coefficients a0..a3")

    @property
    def n_x(self) -> int:
        return self.A1.shape[0]

    @property
    def n_xbar(self) -> int:
        return self.A2.shape[0]

    @classmethod
    def random(cls, seed: int | np.random.Generator = 0, n_x: int = 2, n_xbar: int = 2,
               radius: tuple[float, float] = (0.7, 0.9),
               alpha=(0.0, 1.0, 0.5, 0.25), stable_predictor: bool = False,
               predictor_margin: float = 0.95, max_tries: int = 1000) -> "WhSystem":
        """Stable random blocks with spectral radius drawn in ``radius``; unit-norm B, K, C.

        With ``stable_predictor`` the noise directions ``K1``, ``K2`` are
        redrawn until the innovation predictor, linearized at ``v = 0``, has
        spectral radius below ``predictor_margin``. Otherwise the one-step
        predictor of the true system can be unstable.
        """
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

        def stable(n):
            a = rng.standard_normal((n, n))
            rho = np.max(np.abs(np.linalg.eigvals(a)))
            return a * (rng.uniform(*radius) / rho)

        def unit(n):
            v = rng.standard_normal(n)
            return v / np.linalg.norm(v)

        A1 = stable(n_x)
        B1, K1, C1 = unit(n_x), unit(n_x), unit(n_x)
        A2 = stable(n_xbar)
        B2, K2, C2 = unit(n_xbar), unit(n_xbar), unit(n_xbar)
        sys = cls(A1, B1, K1, C1, A2, B2, K2, C2, np.asarray(alpha, dtype=np.float64))
        tries = 0
        while stable_predictor and sys.predictor_radius() >= predictor_margin:
            tries += 1
            if tries > max_tries:
                raise RuntimeError("no noise directions with a stable predictor found")
            sys.K1, sys.K2 = unit(n_x), unit(n_xbar)
        return sys

    def predictor_radius(self) -> float:
        """Spectral radius of the innovation predictor's error dynamics linearized at ``v = 0``."""
        J = np.block([[self.A1, -np.outer(self.K1, self.C2)],
                      [self.alpha[1] * np.outer(self.B2, self.C1), self.A2 - np.outer(self.K2, self.C2)]])
        return float(np.max(np.abs(np.linalg.eigvals(J))))

    @classmethod
    def default(cls) -> "WhSystem":
        """The checked-in default system, ``WhSystem.random(0, stable_predictor=True)``."""
        text = resources.files("koopid.benchmarks").joinpath("wh_default.json").read_text()
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist()
                for k in ("A1", "B1", "K1", "C1", "A2", "B2", "K2", "C2", "alpha")}

    @classmethod
    def from_dict(cls, d: dict) -> "WhSystem":
        return cls(**{k: np.array(d[k], dtype=np.float64)
                      for k in ("A1", "B1", "K1", "C1", "A2", "B2", "K2", "C2", "alpha")})

    def nonlinearity(self, v):
        a0, a1, a2, a3 = self.alpha
        return a0 + a1 * v + a2 * v**2 + a3 * v**3


def wh_step(sys: WhSystem, x, xbar, u, e):
    """One step; returns ``(x_next, xbar_next, y)`` with ``y`` the output at the current time.

    Works on single states or batches (leading batch axis, ``u``/``e`` of shape ``(B,)``).
    """
    x = np.asarray(x, dtype=np.float64)
    xbar = np.asarray(xbar, dtype=np.float64)
    if x.shape[-1] != sys.n_x or xbar.shape[-1] != sys.n_xbar:
        raise ValueError(f"state sizes must be {sys.n_x} and {sys.n_xbar}, got {x.shape}, {xbar.shape}")
    u = np.asarray(u, dtype=np.float64)[..., None]
    e = np.asarray(e, dtype=np.float64)[..., None]
    v = x @ sys.C1
    w = sys.nonlinearity(v)[..., None]
    x_next = x @ sys.A1.T + u * sys.B1 + e * sys.K1
    xbar_next = xbar @ sys.A2.T + w * sys.B2 + e * sys.K2
    y = xbar @ sys.C2 + e[..., 0]
    return x_next, xbar_next, y


def wh_simulate(sys: WhSystem, u, e=None, x0=None, xbar0=None):
    """Run the system on scalar sequences ``u``, ``e``.

    Returns ``(y, x, xbar)`` where ``x[k]``, ``xbar[k]`` are the states at
    time ``k`` (before the step) and ``y[k]`` the measured output.
    """
    u = _vec(u)
    n = len(u)
    e = np.zeros(n) if e is None else _vec(e)
    A1, B1, K1, C1 = sys.A1, sys.B1, sys.K1, sys.C1
    A2, B2, K2, C2 = sys.A2, sys.B2, sys.K2, sys.C2
    a0, a1, a2, a3 = (float(a) for a in sys.alpha)
    x = np.zeros(sys.n_x) if x0 is None else _vec(x0).copy()
    xb = np.zeros(sys.n_xbar) if xbar0 is None else _vec(xbar0).copy()
    ys = np.empty(n)
    xs = np.empty((n, sys.n_x))
    xbs = np.empty((n, sys.n_xbar))
    for k in range(n):
        xs[k] = x
        xbs[k] = xb
        ek = e[k]
        ys[k] = C2 @ xb + ek
        v = C1 @ x
        w = a0 + v * (a1 + v * (a2 + v * a3))
        x = A1 @ x + B1 * u[k] + K1 * ek
        xb = A2 @ xb + B2 * w + K2 * ek
    return ys, xs, xbs


# Kronecker algebra -------------------------------------------------------------


def kron_power(a: np.ndarray, p: int) -> np.ndarray:
    """Row-wise Kronecker power of a batch of vectors ``(B, n) -> (B, n**p)``."""
    out = a
    for _ in range(p - 1):
        out = (out[:, :, None] * a[:, None, :]).reshape(a.shape[0], -1)
    return out


def _kron_rows(*vs: np.ndarray) -> np.ndarray:
    """Batched Kronecker product of several ``(B, n_i)`` factors."""
    out = vs[0]
    for v in vs[1:]:
        out = (out[:, :, None] * v[:, None, :]).reshape(out.shape[0], -1)
    return out


def symmetric_reduction(n: int, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Selection ``R`` and expansion ``E`` between ``x^(p)`` and its unique monomials.

    ``R @ E`` is the identity and ``E @ R`` is the identity on symmetric
    tensors, so ``R`` is an exact left inverse of ``E``.
    """
    monos = list(combinations_with_replacement(range(n), p))
    pos = {m: i for i, m in enumerate(monos)}
    R = np.zeros((len(monos), n**p))
    E = np.zeros((n**p, len(monos)))
    for flat, idx in enumerate(product(range(n), repeat=p)):
        E[flat, pos[tuple(sorted(idx))]] = 1.0
    for i, m in enumerate(monos):
        flat = int(np.ravel_multi_index(m, (n,) * p))
        R[i, flat] = 1.0
    return R, E


class WhLiftedModel:
    """Exact lifted model of a :class:`WhSystem`.

    Coordinates are ``[x, x(2), x(3), xbar, 1]``; with ``reduced=True`` the
    Kronecker blocks keep only unique monomials. ``B`` and ``K`` are evaluated
    at ``x`` read from the first block of ``z``, which is the inverse lifting
    on the compliant set ``z = lift(x, xbar)``.
    """

    def __init__(self, sys: WhSystem, reduced: bool = True):
        self.sys = sys
        self.reduced = bool(reduced)
        nx, nxb = sys.n_x, sys.n_xbar
        self.raw_sizes = (nx, nx**2, nx**3, nxb, 1)
        n_raw = sum(self.raw_sizes)
        self._raw_offsets = np.cumsum((0,) + self.raw_sizes)
        A1 = sys.A1
        A1_2 = np.kron(A1, A1)
        A1_3 = np.kron(A1_2, A1)
        C1_2 = np.kron(sys.C1, sys.C1)
        C1_3 = np.kron(C1_2, sys.C1)
        a0, a1, a2, a3 = sys.alpha
        o = self._raw_offsets
        A = np.zeros((n_raw, n_raw))
        A[o[0]:o[1], o[0]:o[1]] = A1
        A[o[1]:o[2], o[1]:o[2]] = A1_2
        A[o[2]:o[3], o[2]:o[3]] = A1_3
        B2 = sys.B2[:, None]
        A[o[3]:o[4], o[0]:o[1]] = a1 * B2 * sys.C1[None, :]
        A[o[3]:o[4], o[1]:o[2]] = a2 * B2 * C1_2[None, :]
        A[o[3]:o[4], o[2]:o[3]] = a3 * B2 * C1_3[None, :]
        A[o[3]:o[4], o[3]:o[4]] = sys.A2
        A[o[3]:o[4], o[4]] = a0 * sys.B2
        A[o[4], o[4]] = 1.0
        C = np.zeros((1, n_raw))
        C[0, o[3]:o[4]] = sys.C2
        self.A_raw, self.C_raw = A, C
        if self.reduced:
            R2, E2 = symmetric_reduction(nx, 2)
            R3, E3 = symmetric_reduction(nx, 3)
            eye_x, eye_b = np.eye(nx), np.eye(nxb + 1)
            self.R = _block_diag(eye_x, R2, R3, eye_b)
            self.E = _block_diag(eye_x, E2, E3, eye_b)
        else:
            self.R = self.E = np.eye(n_raw)
        self.A = self.R @ A @ self.E
        self.C = C @ self.E

    @property
    def n_z(self) -> int:
        return self.A.shape[0]

    n_u = 1
    n_y = 1

    def lift(self, x, xbar) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        xbar = np.atleast_2d(np.asarray(xbar, dtype=np.float64))
        ones = np.ones((x.shape[0], 1))
        raw = np.concatenate([x, kron_power(x, 2), kron_power(x, 3), xbar, ones], axis=1)
        return raw @ self.R.T

    def states(self, z) -> tuple[np.ndarray, np.ndarray]:
        """Read ``(x, xbar)`` back out of lifted states."""
        raw = np.atleast_2d(np.asarray(z, dtype=np.float64)) @ self.E.T
        o = self._raw_offsets
        return raw[:, o[0]:o[1]], raw[:, o[3]:o[4]]

    def _columns(self, x: np.ndarray, base: np.ndarray, v: np.ndarray, s: np.ndarray,
                 tail: np.ndarray) -> np.ndarray:
        """Raw column ``M`` with ``lift_part(base + v s) - lift_part(base) = M s``.

        ``base`` is ``(B, nx)``, ``v`` a fixed ``(nx,)`` direction, ``s`` a
        ``(B,)`` scalar; ``tail`` fills the ``xbar`` rows.
        """
        batch = x.shape[0]
        vb = np.broadcast_to(v, (batch, v.size))
        sc = s[:, None]
        quad = _kron_rows(base, vb) + _kron_rows(vb, base) + _kron_rows(vb, vb) * sc
        cub = (_kron_rows(base, base, vb) + _kron_rows(base, vb, base) + _kron_rows(vb, base, base)
               + (_kron_rows(base, vb, vb) + _kron_rows(vb, base, vb) + _kron_rows(vb, vb, base)) * sc
               + _kron_rows(vb, vb, vb) * sc**2)
        col = np.concatenate([vb, quad, cub, np.broadcast_to(tail, (batch, tail.size)),
                              np.zeros((batch, 1))], axis=1)
        return col @ self.R.T

    def _split(self, z, u, e=None):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        u = np.asarray(u, dtype=np.float64).reshape(z.shape[0])
        e = None if e is None else np.asarray(e, dtype=np.float64).reshape(z.shape[0])
        x = z[:, :self.sys.n_x]
        return z, x, u, e

    def B_matrix(self, z, u) -> np.ndarray:
        """Input matrix ``(B, n_z, 1)``."""
        z, x, u, _ = self._split(z, u)
        ax = x @ self.sys.A1.T
        return self._columns(x, ax, self.sys.B1, u, np.zeros(self.sys.n_xbar))[:, :, None]

    def K_matrix(self, z, u, e) -> np.ndarray:
        """Innovation matrix ``(B, n_z, 1)``."""
        z, x, u, e = self._split(z, u, e)
        q = x @ self.sys.A1.T + u[:, None] * self.sys.B1
        return self._columns(x, q, self.sys.K1, e, self.sys.K2)[:, :, None]

    def step(self, z, u, e=None):
        """Lifted update; accepts ``(n_z,)`` or ``(B, n_z)`` with matching ``u``/``e``."""
        zz = np.asarray(z, dtype=np.float64)
        single = zz.ndim == 1
        zz = np.atleast_2d(zz)
        u = np.asarray(u, dtype=np.float64).reshape(zz.shape[0])
        e = np.zeros(zz.shape[0]) if e is None else np.asarray(e, dtype=np.float64).reshape(zz.shape[0])
        out = (zz @ self.A.T + self.B_matrix(zz, u)[:, :, 0] * u[:, None]
               + self.K_matrix(zz, u, e)[:, :, 0] * e[:, None])
        return out[0] if single else out

    def output(self, z):
        zz = np.asarray(z, dtype=np.float64)
        return zz @ self.C.T


def _block_diag(*blocks: np.ndarray) -> np.ndarray:
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r:r + b.shape[0], c:c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


def wh_exact_embedding(sys: WhSystem, reduced: bool = True) -> WhLiftedModel:
    return WhLiftedModel(sys, reduced=reduced)
