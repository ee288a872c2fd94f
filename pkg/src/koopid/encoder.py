"""Subspace encoder: past inputs/outputs to the current lifted state.

The encoder sees ``n`` past inputs ``u[k-n .. k-1]`` and ``n + 1`` outputs
``y[k-n .. k]`` and returns an estimate of ``z[k]``. Its network input is the
concatenation ``[u oldest->newest, y oldest->newest]`` with every sample's
channels kept contiguous; this order is part of the saved model format.

The encoder is trained jointly with the model through the multi-step
prediction loss. Nothing in the structure forces it to return a conditional
mean; that behaviour only comes from the squared-error training objective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .koopman import _mlp_from_dict, _mlp_to_dict

__all__ = [
    "LagWindow",
    "Encoder",
    "encode",
    "legal_starts",
    "build_windows",
    "gather_sections",
    "lag_guidance",
]


@dataclass(frozen=True)
class LagWindow:
    """Past data for one encoding: ``u_past`` is ``(n, n_u)``, ``y_past`` is ``(n+1, n_y)``."""

    u_past: np.ndarray
    y_past: np.ndarray

    @property
    def lag(self) -> int:
        return len(self.y_past) - 1


class Encoder:
    """Network encoder with lag ``n`` mapping ``n*n_u + (n+1)*n_y`` inputs to ``n_z``."""

    def __init__(self, lag: int, n_u: int, n_y: int, n_z: int, net: ad.Mlp):
        self.lag = int(lag)
        if self.lag < 0:
            raise ValueError(f"encoder lag must be nonnegative, got {lag}")
        self.n_u, self.n_y, self.n_z = int(n_u), int(n_y), int(n_z)
        if net.n_in != self.input_width or net.n_out != self.n_z:
            raise ShapeError(f"encoder network must map {self.input_width} -> {self.n_z}, "
                             f"got {net.n_in} -> {net.n_out}")
        self.net = net

    @property
    def input_width(self) -> int:
        return self.lag * self.n_u + (self.lag + 1) * self.n_y

    @classmethod
    def initialize(cls, lag: int, n_u: int, n_y: int, n_z: int,
                   seed: int | np.random.Generator = 0, hidden: Sequence[int] = (40,),
                   bypass: bool = True) -> "Encoder":
        width = int(lag) * int(n_u) + (int(lag) + 1) * int(n_y)
        net = ad.xavier_init([width, *[int(h) for h in hidden], int(n_z)], seed, bypass=bypass)
        return cls(lag, n_u, n_y, n_z, net)

    def named_parameters(self, prefix: str = "encoder.") -> dict[str, ad.Parameter]:
        return self.net.named_parameters(prefix)

    def parameters(self) -> list[ad.Parameter]:
        return self.net.parameters()

    def encode_batch(self, u_past, y_past) -> Tensor:
        """Encode a batch: ``u_past`` ``(B, n, n_u)``, ``y_past`` ``(B, n+1, n_y)``."""
        u_past = np.asarray(u_past, dtype=np.float64)
        y_past = np.asarray(y_past, dtype=np.float64)
        n = self.lag
        if y_past.ndim != 3 or y_past.shape[1:] != (n + 1, self.n_y):
            raise ShapeError(f"encoder with lag {n} expects y_past of shape (B, {n + 1}, {self.n_y}), "
                             f"got {y_past.shape}")
        batch = y_past.shape[0]
        if n * self.n_u and u_past.shape != (batch, n, self.n_u):
            raise ShapeError(f"encoder with lag {n} expects u_past of shape ({batch}, {n}, {self.n_u}), "
                             f"got {u_past.shape}")
        flat = np.concatenate([u_past.reshape(batch, n * self.n_u),
                               y_past.reshape(batch, (n + 1) * self.n_y)], axis=1)
        return self.net(ad.constant(flat))

    def encode(self, window: LagWindow) -> Tensor:
        u_past = np.asarray(window.u_past, dtype=np.float64).reshape(-1, self.n_u)
        y_past = np.asarray(window.y_past, dtype=np.float64).reshape(-1, self.n_y)
        if len(u_past) != self.lag or len(y_past) != self.lag + 1:
            raise ShapeError(f"window holds {len(u_past)} inputs and {len(y_past)} outputs; "
                             f"lag {self.lag} expects {self.lag} and {self.lag + 1}")
        z = self.encode_batch(u_past[None], y_past[None])
        return ad.reshape(z, (self.n_z,))

    def to_dict(self) -> dict:
        return {"lag": self.lag, "n_u": self.n_u, "n_y": self.n_y, "n_z": self.n_z,
                "input_order": "u_oldest_first,y_oldest_first",
                "net": _mlp_to_dict(self.net)}

    @classmethod
    def from_dict(cls, d: dict) -> "Encoder":
        return cls(d["lag"], d["n_u"], d["n_y"], d["n_z"], _mlp_from_dict(d["net"]))


def encode(encoder: Encoder, window: LagWindow) -> Tensor:
    return encoder.encode(window)


def legal_starts(length: int, lag: int, horizon: int) -> np.ndarray:
    """Section starts ``k`` with ``lag <= k`` and ``k + horizon - 1 <= length - 1``."""
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    last = length - horizon
    if last < lag:
        return np.zeros(0, dtype=np.int64)
    return np.arange(lag, last + 1, dtype=np.int64)


def _segment_arrays(data, split: str) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(data, "segment"):
        data = data.segment(split)
    if isinstance(data, tuple):
        u, y = data
    else:
        u, y = data.u, data.y
    return np.asarray(u, dtype=np.float64), np.asarray(y, dtype=np.float64)


def build_windows(data, lag: int, k_indices, horizon: int = 1,
                  split: str = "train") -> list[tuple[LagWindow, int]]:
    """Encoder windows for section starts ``k_indices`` within one data split.

    ``data`` is a :class:`~koopid.benchmarks.data.Dataset` (``split`` picks the
    segment), any object with ``u``/``y`` arrays, or a ``(u, y)`` tuple.
    Indices are local to the segment, so windows never cross split boundaries.
    """
    u, y = _segment_arrays(data, split)
    length = len(y)
    out = []
    for k in np.atleast_1d(np.asarray(k_indices, dtype=np.int64)):
        k = int(k)
        if k < lag or k + horizon - 1 > length - 1:
            raise IndexError(f"section start {k} outside [{lag}, {length - horizon}] "
                             f"for lag {lag}, horizon {horizon}, {length} samples")
        out.append((LagWindow(u[k - lag:k].copy(), y[k - lag:k + 1].copy()), k))
    return out


def gather_sections(u: np.ndarray, y: np.ndarray, lag: int, horizon: int, ks):
    """Vectorized windows and futures for many section starts.

    Returns ``(u_past, y_past, u_future, y_future)`` with shapes
    ``(B, lag, n_u)``, ``(B, lag+1, n_y)``, ``(B, T, n_u)``, ``(B, T, n_y)``.
    """
    ks = np.asarray(ks, dtype=np.int64)
    length = len(y)
    if ks.size and (ks.min() < lag or ks.max() + horizon > length):
        raise IndexError(f"section starts must lie in [{lag}, {length - horizon}]")
    past_u = ks[:, None] + np.arange(-lag, 0)[None, :]
    past_y = ks[:, None] + np.arange(-lag, 1)[None, :]
    fut = ks[:, None] + np.arange(horizon)[None, :]
    return u[past_u], y[past_y], u[fut], y[fut]


def lag_guidance(n_x: int) -> dict[str, int]:
    """Encoder lag presets from the true state dimension.

    ``minimal`` is ``n_x - 1`` (local reconstructability); ``conservative`` is
    ``2 n_x`` (a global sufficient condition).
    """
    if n_x < 1:
        raise ValueError("state dimension must be positive")
    return {"minimal": max(n_x - 1, 0), "conservative": 2 * n_x}
