"""Lifted Koopman state-space models with inputs and an innovation channel.

The model is::

    z[k+1] = A z[k] + B(z[k], u[k]) u[k] + K(z[k], u[k], e[k]) e[k]
    y[k]   = C z[k] + e[k]

``B`` and ``K`` are matrix-valued functions whose structure is chosen from
:class:`StructureKind`. All methods accept a single vector (1-D) or a batch
(2-D, batch first) and return :class:`~koopid.autodiff.Tensor` objects that
stay connected to the model parameters.
"""

from __future__ import annotations

from enum import Enum
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor

__all__ = [
    "StructureKind",
    "MatrixFunction",
    "KoopmanModel",
    "step",
    "output",
    "innovation_step",
    "rollout_predictor",
    "simulate",
    "scaled_orthogonal",
]


class StructureKind(str, Enum):
    LINEAR = "linear"
    BILINEAR = "bilinear"
    INPUT_AFFINE = "input_affine"
    GENERAL = "general"
    NONE = "none"

    @classmethod
    def parse(cls, value: "StructureKind | str") -> "StructureKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        try:
            return cls(key)
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown structure kind {value!r}; choose from {choices}") from None


class MatrixFunction:
    """A structured map producing an ``(n_z, n_cols)`` matrix per sample.

    Role ``"B"`` multiplies the input ``u``; role ``"K"`` multiplies the
    innovation ``e``. The network-based kinds see ``z`` (input affine) or
    ``(z, u)`` for B and ``(z, u, e)`` for K (general), and emit the matrix
    flattened row-major.
    """

    def __init__(self, kind: StructureKind | str, role: str, n_z: int, n_cols: int,
                 params: dict[str, Parameter] | None = None, net: ad.Mlp | None = None,
                 n_u: int = 0):
        self.kind = StructureKind.parse(kind)
        if role not in ("B", "K"):
            raise ValueError(f"role must be 'B' or 'K', got {role!r}")
        if self.kind is StructureKind.NONE and role == "B":
            raise ValueError("structure 'none' is only allowed for K")
        self.role = role
        self.n_z = int(n_z)
        self.n_cols = int(n_cols)
        self.n_u = int(n_u) if role == "K" else self.n_cols
        self.params = dict(params or {})
        self.net = net
        self._check()

    def _check(self) -> None:
        nz, m = self.n_z, self.n_cols
        kind = self.kind
        if kind is StructureKind.LINEAR:
            if self.params["W"].shape != (nz, m):
                raise ShapeError(f"{self.role}: linear matrix must be {(nz, m)}")
        elif kind is StructureKind.BILINEAR:
            if self.params["W0"].shape != (nz, m) or self.params["Wz"].shape != (nz, nz * m):
                raise ShapeError(f"{self.role}: bilinear matrices must be {(nz, m)} and {(nz, nz * m)}")
        elif kind in (StructureKind.INPUT_AFFINE, StructureKind.GENERAL):
            width = self.net_input_width(kind, self.role, nz, m, self.n_u)
            if self.net is None or self.net.n_in != width or self.net.n_out != nz * m:
                raise ShapeError(f"{self.role}: network must map {width} -> {nz * m}")

    @staticmethod
    def net_input_width(kind: StructureKind, role: str, n_z: int, n_cols: int, n_u: int) -> int:
        if kind is StructureKind.INPUT_AFFINE:
            return n_z
        if role == "B":
            return n_z + n_cols
        return n_z + n_u + n_cols

    @classmethod
    def initialize(cls, kind: StructureKind | str, role: str, n_z: int, n_cols: int,
                   rng: np.random.Generator, n_u: int = 0, hidden: Sequence[int] = (40,),
                   bypass: bool = True, scale: float = 1.0) -> "MatrixFunction":
        """Xavier-initialized matrix function of the requested structure.

        ``scale`` multiplies the constant matrices, or the output layer and
        bypass of a network, so a function can start small or at zero.
        """
        kind = StructureKind.parse(kind)
        nz, m = int(n_z), int(n_cols)
        params: dict[str, Parameter] = {}
        net = None
        if kind is StructureKind.LINEAR:
            params["W"] = Parameter(ad._xavier(rng, nz, m), name=f"{role}.W")
        elif kind is StructureKind.BILINEAR:
            params["W0"] = Parameter(ad._xavier(rng, nz, m), name=f"{role}.W0")
            params["Wz"] = Parameter(ad._xavier(rng, nz, nz * m), name=f"{role}.Wz")
        elif kind in (StructureKind.INPUT_AFFINE, StructureKind.GENERAL):
            widths = [cls.net_input_width(kind, role, nz, m, n_u), *[int(h) for h in hidden], nz * m]
            net = ad.xavier_init(widths, rng, bypass=bypass)
            net.weights[-1].value = net.weights[-1].value * scale
            if net.bypass is not None:
                net.bypass.value = net.bypass.value * scale
        for p in params.values():
            p.value = p.value * scale
        return cls(kind, role, nz, m, params, net, n_u=n_u)

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out = {f"{prefix}{k}": p for k, p in self.params.items()}
        if self.net is not None:
            out.update(self.net.named_parameters(f"{prefix}net."))
        return out

    def _net_input(self, z: Tensor, u: Tensor, e: Tensor | None) -> Tensor:
        if self.kind is StructureKind.INPUT_AFFINE:
            return z
        if self.role == "B":
            return ad.concat([z, u], axis=-1)
        return ad.concat([z, u, e], axis=-1)

    def matrix(self, z, u=None, e=None) -> Tensor:
        """The structured matrix for a batch, shape ``(batch, n_z, n_cols)``."""
        z = ad.as_tensor(z)
        batch = z.shape[0]
        nz, m = self.n_z, self.n_cols
        kind = self.kind
        if kind is StructureKind.NONE:
            return Tensor(np.zeros((batch, nz, m)))
        if kind is StructureKind.LINEAR:
            return ad.add(ad.reshape(self.params["W"], (1, nz, m)), Tensor(np.zeros((batch, nz, m))))
        if kind is StructureKind.BILINEAR:
            wz = ad.reshape(self.params["Wz"], (1, nz, nz, m))
            zi = ad.reshape(z, (batch, 1, nz, 1))
            return ad.add(ad.sum(ad.mul(zi, wz), axis=2), ad.reshape(self.params["W0"], (1, nz, m)))
        flat = self.net(self._net_input(z, ad.as_tensor(u), None if e is None else ad.as_tensor(e)))
        return ad.reshape(flat, (batch, nz, m))

    def apply(self, z: Tensor, u: Tensor, e: Tensor | None, vec: Tensor) -> Tensor | None:
        """``M(z, u, e) @ vec`` per sample; ``None`` for the empty structure."""
        kind = self.kind
        if kind is StructureKind.NONE or self.n_cols == 0:
            return None
        if kind is StructureKind.LINEAR:
            return ad.linear(vec, self.params["W"])
        if kind is StructureKind.BILINEAR:
            batch = z.shape[0]
            outer = ad.mul(ad.reshape(z, (batch, self.n_z, 1)), ad.reshape(vec, (batch, 1, self.n_cols)))
            return ad.add(ad.linear(vec, self.params["W0"]),
                          ad.linear(ad.reshape(outer, (batch, self.n_z * self.n_cols)), self.params["Wz"]))
        flat = self.net(self._net_input(z, u, e))
        return ad.bmv(ad.reshape(flat, (z.shape[0], self.n_z, self.n_cols)), vec)


def scaled_orthogonal(n: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    """Random orthogonal matrix times ``radius``; every eigenvalue has modulus ``radius``."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q = q * np.sign(np.diag(r))
    return radius * q


class KoopmanModel:
    """Parametrized lifted model ``(A, B, C, K)``.

    Parameters
    ----------
    A : Parameter
        ``(n_z, n_z)`` state matrix.
    C : Parameter or Tensor
        ``(n_y, n_z)`` output matrix. With ``c_identity`` it is the frozen
        block ``[I 0]`` and is not trained.
    B, K : MatrixFunction
        Input and innovation matrix functions.
    """

    def __init__(self, A: Tensor, C: Tensor, B: MatrixFunction, K: MatrixFunction,
                 c_identity: bool = False):
        n_z = A.shape[0]
        if A.shape != (n_z, n_z):
            raise ShapeError(f"A must be square, got {A.shape}")
        if C.ndim != 2 or C.shape[1] != n_z:
            raise ShapeError(f"C must have {n_z} columns, got {C.shape}")
        n_y = C.shape[0]
        if B.n_z != n_z or K.n_z != n_z:
            raise ShapeError("B and K must produce n_z rows")
        if K.n_cols != n_y:
            raise ShapeError(f"K must have n_y={n_y} columns, got {K.n_cols}")
        if c_identity:
            if n_y > n_z:
                raise ShapeError("C = [I 0] needs n_y <= n_z")
            C = Tensor(np.eye(n_y, n_z), name="C")
        self.A = A
        self.C = C
        self.B = B
        self.K = K
        self.c_identity = bool(c_identity)

    @property
    def n_z(self) -> int:
        return self.A.shape[0]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.n_cols

    @classmethod
    def initialize(cls, n_z: int, n_u: int, n_y: int, b_kind="linear", k_kind="none",
                   seed: int | np.random.Generator = 0, b_hidden: Sequence[int] = (40,),
                   k_hidden: Sequence[int] = (80,), bypass: bool = True,
                   c_identity: bool = False, a_radius: float = 0.95,
                   k_scale: float = 1.0, b_scale: float = 1.0) -> "KoopmanModel":
        """Fresh model: ``A`` scaled orthogonal, everything else Xavier-uniform.

        ``k_scale`` shrinks the initial innovation gain; with ``0`` training
        starts from the open-loop predictor, whose rollouts stay bounded.
        ``b_scale`` does the same for the input matrix function.
        """
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        A = Parameter(scaled_orthogonal(n_z, a_radius, rng), name="A")
        C = Parameter(ad._xavier(rng, n_y, n_z), name="C")
        B = MatrixFunction.initialize(b_kind, "B", n_z, n_u, rng, n_u=n_u, hidden=b_hidden, bypass=bypass,
                                      scale=b_scale)
        K = MatrixFunction.initialize(k_kind, "K", n_z, n_y, rng, n_u=n_u, hidden=k_hidden, bypass=bypass,
                                      scale=k_scale)
        return cls(A, C, B, K, c_identity=c_identity)

    def named_parameters(self) -> dict[str, Parameter]:
        out = {"A": self.A}
        if not self.c_identity:
            out["C"] = self.C
        out.update(self.B.named_parameters("B."))
        out.update(self.K.named_parameters("K."))
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    # dynamics -------------------------------------------------------------

    def _batch(self, x, dim: int, what: str) -> tuple[Tensor, bool]:
        x = ad.as_tensor(x)
        if x.ndim == 1:
            x = ad.reshape(x, (1, x.shape[0]))
            squeeze = True
        elif x.ndim == 2:
            squeeze = False
        else:
            raise ShapeError(f"{what} must be 1-D or 2-D, got {x.shape}")
        if x.shape[1] != dim:
            raise ShapeError(f"{what} has dimension {x.shape[1]}, model expects {dim}")
        return x, squeeze

    @staticmethod
    def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
        return ad.reshape(x, (x.shape[1],)) if squeeze else x

    def _step(self, z: Tensor, u: Tensor, e: Tensor) -> Tensor:
        out = ad.linear(z, self.A)
        bu = self.B.apply(z, u, None, u)
        if bu is not None:
            out = ad.add(out, bu)
        ke = self.K.apply(z, u, e, e)
        if ke is not None:
            out = ad.add(out, ke)
        return out

    def step(self, z, u, e=None) -> Tensor:
        """``A z + B(z, u) u + K(z, u, e) e``."""
        z, squeeze = self._batch(z, self.n_z, "z")
        u, _ = self._batch(u, self.n_u, "u")
        e = Tensor(np.zeros((z.shape[0], self.n_y))) if e is None else self._batch(e, self.n_y, "e")[0]
        if not (z.shape[0] == u.shape[0] == e.shape[0]):
            raise ShapeError("z, u and e batch sizes differ")
        return self._unbatch(self._step(z, u, e), squeeze)

    def output(self, z) -> Tensor:
        """Deterministic output ``C z``."""
        z, squeeze = self._batch(z, self.n_z, "z")
        return self._unbatch(ad.linear(z, self.C), squeeze)

    def innovation_step(self, z, u, y) -> tuple[Tensor, Tensor, Tensor]:
        """Predictor update driven by a measured output.

        Returns ``(z_next, y_hat, e_hat)`` with ``y_hat = C z`` and
        ``e_hat = y - y_hat``.
        """
        z, squeeze = self._batch(z, self.n_z, "z")
        u, _ = self._batch(u, self.n_u, "u")
        y, _ = self._batch(y, self.n_y, "y")
        y_hat = ad.linear(z, self.C)
        e_hat = ad.sub(y, y_hat)
        z_next = self._step(z, u, e_hat)
        return (self._unbatch(z_next, squeeze), self._unbatch(y_hat, squeeze),
                self._unbatch(e_hat, squeeze))

    def _windows(self, z0, u_seq, y_seq=None):
        z, squeeze = self._batch(z0, self.n_z, "z0")
        u_arr = np.asarray(u_seq.value if isinstance(u_seq, Tensor) else u_seq, dtype=np.float64)
        if squeeze:
            u_arr = u_arr[None]
        if u_arr.ndim != 3 or u_arr.shape[0] != z.shape[0] or u_arr.shape[2] != self.n_u:
            raise ShapeError(f"input window shape {u_arr.shape} does not match batch "
                             f"{z.shape[0]} and n_u={self.n_u}")
        steps = u_arr.shape[1]
        if steps < 1:
            raise ValueError("windows must hold at least one sample")
        u_t = np.ascontiguousarray(np.swapaxes(u_arr, 0, 1))
        y_t = None
        if y_seq is not None:
            y_arr = np.asarray(y_seq.value if isinstance(y_seq, Tensor) else y_seq, dtype=np.float64)
            if squeeze:
                y_arr = y_arr[None]
            if y_arr.shape != (z.shape[0], steps, self.n_y):
                raise ShapeError(f"output window shape {y_arr.shape} != {(z.shape[0], steps, self.n_y)}")
            y_t = np.ascontiguousarray(np.swapaxes(y_arr, 0, 1))
        return z, squeeze, u_t, y_t

    def rollout_predictor(self, z0, u_window, y_window) -> Tensor:
        """One-step-ahead predictions along a window started at ``z0``.

        ``u_window``/``y_window`` are ``(T, n)`` for a single ``z0`` or
        ``(batch, T, n)``. Output ``i`` is ``C z_i`` where ``z_i`` has seen
        measurements ``0..i-1``.
        """
        z, squeeze, u_t, y_t = self._windows(z0, u_window, y_window)
        no_innovation = self.K.kind is StructureKind.NONE
        zero_e = ad.constant(np.zeros((z.shape[0], self.n_y)))
        preds = []
        steps = u_t.shape[0]
        for t in range(steps):
            y_hat = ad.linear(z, self.C)
            preds.append(y_hat)
            if t + 1 < steps:
                if no_innovation:
                    e_hat = zero_e
                else:
                    e_hat = ad.sub(ad.constant(y_t[t]), y_hat)
                z = self._step(z, ad.constant(u_t[t]), e_hat)
        out = ad.stack(preds, axis=1)
        return ad.reshape(out, out.shape[1:]) if squeeze else out

    def simulate(self, z0, u_sequence) -> Tensor:
        """Free run with zero innovation; emits ``C z`` before each step."""
        z, squeeze, u_t, _ = self._windows(z0, u_sequence)
        zero_e = Tensor(np.zeros((z.shape[0], self.n_y)))
        preds = []
        steps = u_t.shape[0]
        for t in range(steps):
            preds.append(ad.linear(z, self.C))
            if t + 1 < steps:
                z = self._step(z, ad.constant(u_t[t]), zero_e)
        out = ad.stack(preds, axis=1)
        return ad.reshape(out, out.shape[1:]) if squeeze else out

    # serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        def mf(f: MatrixFunction) -> dict:
            d = {"kind": f.kind.value, "n_cols": f.n_cols,
                 "params": {k: p.value.tolist() for k, p in f.params.items()}}
            if f.net is not None:
                d["net"] = _mlp_to_dict(f.net)
            return d

        return {
            "n_z": self.n_z, "n_u": self.n_u, "n_y": self.n_y,
            "c_identity": self.c_identity,
            "A": self.A.value.tolist(),
            "C": self.C.value.tolist(),
            "B": mf(self.B), "K": mf(self.K),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KoopmanModel":
        n_z, n_u, n_y = int(d["n_z"]), int(d["n_u"]), int(d["n_y"])

        def mf(spec: dict, role: str) -> MatrixFunction:
            m = int(spec["n_cols"])
            params = {k: Parameter(np.array(v, dtype=np.float64).reshape(_param_shape(k, n_z, m)),
                                   name=f"{role}.{k}")
                      for k, v in spec["params"].items()}
            net = _mlp_from_dict(spec["net"]) if "net" in spec else None
            return MatrixFunction(spec["kind"], role, n_z, m, params, net, n_u=n_u)

        A = Parameter(np.array(d["A"], dtype=np.float64).reshape(n_z, n_z), name="A")
        C = Parameter(np.array(d["C"], dtype=np.float64).reshape(n_y, n_z), name="C")
        return cls(A, C, mf(d["B"], "B"), mf(d["K"], "K"), c_identity=bool(d.get("c_identity", False)))


def _param_shape(key: str, n_z: int, m: int) -> tuple[int, int]:
    return (n_z, n_z * m) if key == "Wz" else (n_z, m)


def _mlp_to_dict(net: ad.Mlp) -> dict:
    d = {"widths": list(net.widths),
         "weights": [w.value.tolist() for w in net.weights],
         "biases": [b.value.tolist() for b in net.biases]}
    if net.bypass is not None:
        d["bypass"] = net.bypass.value.tolist()
    return d


def _mlp_from_dict(d: dict) -> ad.Mlp:
    widths = [int(w) for w in d["widths"]]
    weights = [Parameter(np.array(w, dtype=np.float64).reshape(widths[i + 1], widths[i]), name=f"W{i}")
               for i, w in enumerate(d["weights"])]
    biases = [Parameter(np.array(b, dtype=np.float64).reshape(widths[i + 1]), name=f"b{i}")
              for i, b in enumerate(d["biases"])]
    bypass = None
    if d.get("bypass") is not None:
        bypass = Parameter(np.array(d["bypass"], dtype=np.float64).reshape(widths[-1], widths[0]), name="bypass")
    return ad.Mlp(widths, weights, biases, bypass)


# functional aliases ----------------------------------------------------------


def step(model: KoopmanModel, z, u, e=None) -> Tensor:
    return model.step(z, u, e)


def output(model: KoopmanModel, z) -> Tensor:
    return model.output(z)


def innovation_step(model: KoopmanModel, z, u, y_measured):
    return model.innovation_step(z, u, y_measured)


def rollout_predictor(model: KoopmanModel, z0, u_window, y_window) -> Tensor:
    return model.rollout_predictor(z0, u_window, y_window)


def simulate(model: KoopmanModel, z0, u_sequence) -> Tensor:
    return model.simulate(z0, u_sequence)
