"""Benchmark datasets: generation with calibrated noise, splits and CSV files.

Each split is simulated from its own input realization after a burn-in, so the
splits are independent experiments that share the system. Inputs and noise
come from separately seeded streams, which makes the noiseless dataset
(``snr_db=None``) an exact twin of a noisy one with the same seed: identical
inputs, zero noise.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .poly import PolySystem, poly_trajectory
from .wiener_hammerstein import WhSystem, wh_simulate

__all__ = ["SPLITS", "DataError", "LinearSystem", "Segment", "Dataset", "generate_dataset",
           "write_csv", "read_csv", "write_dataset", "read_dataset", "dumps_json"]

SPLITS = ("train", "val", "test")
FORMAT_VERSION = 1


class DataError(ValueError):
    """Malformed or inconsistent dataset files."""


@dataclass
class LinearSystem:
    """LTI system ``x' = A x + B u + K e``, ``y = C x + e``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    K: np.ndarray | None = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        n = self.A.shape[0]
        self.B = np.asarray(self.B, dtype=np.float64).reshape(n, -1)
        self.C = np.atleast_2d(np.asarray(self.C, dtype=np.float64))
        if self.A.shape != (n, n) or self.C.shape[1] != n:
            raise ValueError("inconsistent LTI dimensions")
        if self.K is not None:
            self.K = np.asarray(self.K, dtype=np.float64).reshape(n, self.C.shape[0])

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]

    @classmethod
    def random(cls, n_x: int = 4, n_u: int = 1, n_y: int = 1,
               seed: int | np.random.Generator = 0, radius: tuple[float, float] = (0.7, 0.9),
               with_noise: bool = False) -> "LinearSystem":
        """Random stable system; eigenvalue magnitudes of ``A`` lie in ``radius``."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        # real block-diagonal form with random moduli and angles, then a random similarity
        blocks = []
        left = n_x
        while left > 0:
            r = rng.uniform(*radius)
            if left >= 2:
                th = rng.uniform(0.1, np.pi - 0.1)
                blocks.append(r * np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]]))
                left -= 2
            else:
                blocks.append(np.array([[r * rng.choice([-1.0, 1.0])]]))
                left -= 1
        D = np.zeros((n_x, n_x))
        i = 0
        for b in blocks:
            D[i:i + len(b), i:i + len(b)] = b
            i += len(b)
        Q, _ = np.linalg.qr(rng.standard_normal((n_x, n_x)))
        A = Q @ D @ Q.T
        B = rng.standard_normal((n_x, n_u)) / np.sqrt(n_x)
        C = rng.standard_normal((n_y, n_x)) / np.sqrt(n_x)
        K = rng.standard_normal((n_x, n_y)) / np.sqrt(n_x) if with_noise else None
        return cls(A, B, C, K)

    def simulate(self, u, e=None, x0=None):
        """Returns ``(y, x)`` with ``x[k]`` the state before step ``k``."""
        u = np.asarray(u, dtype=np.float64).reshape(-1, self.n_u)
        n = len(u)
        e = np.zeros((n, self.n_y)) if e is None else np.asarray(e, dtype=np.float64).reshape(n, self.n_y)
        x = np.zeros(self.n_x) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
        ys = np.empty((n, self.n_y))
        xs = np.empty((n, self.n_x))
        for k in range(n):
            xs[k] = x
            ys[k] = self.C @ x + e[k]
            x = self.A @ x + self.B @ u[k]
            if self.K is not None:
                x = x + self.K @ e[k]
        return ys, xs

    def to_dict(self) -> dict:
        d = {"A": self.A.tolist(), "B": self.B.tolist(), "C": self.C.tolist()}
        if self.K is not None:
            d["K"] = self.K.tolist()
        return d


@dataclass
class Segment:
    name: str
    u: np.ndarray
    y: np.ndarray
    start: int

    def __len__(self) -> int:
        return len(self.y)

    @property
    def k(self) -> np.ndarray:
        return np.arange(self.start, self.start + len(self.y))


@dataclass
class Dataset:
    """Aligned ``u`` ``(N, n_u)`` and ``y`` ``(N, n_y)`` with contiguous train/val/test splits.

    ``boundaries = (b1, b2)`` puts train at ``[0, b1)``, validation at
    ``[b1, b2)`` and test at ``[b2, N)``.
    """

    u: np.ndarray
    y: np.ndarray
    boundaries: tuple[int, int]
    meta: dict = field(default_factory=dict)
    e: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.u.ndim == 1:
            self.u = self.u[:, None]
        if self.u.size == 0:
            self.u = self.u.reshape(len(self.y), 0)
        if self.u.ndim != 2 or self.y.ndim != 2 or len(self.u) != len(self.y):
            raise DataError(f"u {self.u.shape} and y {self.y.shape} must be aligned 2-D arrays")
        b1, b2 = (int(b) for b in self.boundaries)
        if not 0 <= b1 <= b2 <= len(self.y):
            raise DataError(f"split boundaries {self.boundaries} invalid for {len(self.y)} samples")
        self.boundaries = (b1, b2)

    @property
    def N(self) -> int:
        return len(self.y)

    @property
    def n_u(self) -> int:
        return self.u.shape[1]

    @property
    def n_y(self) -> int:
        return self.y.shape[1]

    def bounds(self, name: str) -> tuple[int, int]:
        b1, b2 = self.boundaries
        spans = {"train": (0, b1), "val": (b1, b2), "test": (b2, self.N)}
        if name not in spans:
            raise KeyError(f"unknown split {name!r}; expected one of {SPLITS}")
        return spans[name]

    def segment(self, name: str) -> Segment:
        lo, hi = self.bounds(name)
        return Segment(name, self.u[lo:hi], self.y[lo:hi], lo)


def _rng(seed: int, stream: int, split: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream, split]))


def _run(system, u: np.ndarray, e: np.ndarray, burn_in: int, rng_x0: np.random.Generator):
    """Simulate one split; returns ``(y, initial_state)`` after discarding the burn-in."""
    if isinstance(system, WhSystem):
        y, xs, xbs = wh_simulate(system, u[:, 0], e[:, 0])
        return y[burn_in:, None], {"x": xs[burn_in].tolist(), "xbar": xbs[burn_in].tolist()}
    if isinstance(system, LinearSystem):
        y, xs = system.simulate(u, e)
        return y[burn_in:], {"x": xs[burn_in].tolist()}
    if isinstance(system, PolySystem):
        x0 = rng_x0.uniform(-1.0, 1.0, 2)
        y = poly_trajectory(system, x0, len(u))
        return y, {"x": x0.tolist()}
    raise TypeError(f"unsupported system type {type(system).__name__}")


def _dims(system) -> tuple[int, int, str]:
    if isinstance(system, WhSystem):
        return 1, 1, "wh"
    if isinstance(system, LinearSystem):
        return system.n_u, system.n_y, "linear"
    if isinstance(system, PolySystem):
        return 0, 2, "poly"
    raise TypeError(f"unsupported system type {type(system).__name__}")


def generate_dataset(system, n_train: int, n_val: int, n_test: int,
                     snr_db: float | None = None, seed: int = 0, burn_in: int = 200) -> Dataset:
    """Simulate train/validation/test splits with ``u ~ U(-1, 1)`` and calibrated noise.

    The noise level is set on a noise-free pilot run of the training split so
    that ``10 log10(var(y_clean) / sigma_e**2) = snr_db``. ``snr_db=None``
    gives noiseless data. The polynomial system is autonomous: it has no input,
    no burn-in, and each split starts from a random state in ``[-1, 1]**2``.
    """
    n_u, n_y, name = _dims(system)
    lengths = [int(n_train), int(n_val), int(n_test)]
    if min(lengths) < 0:
        raise ValueError("split lengths must be nonnegative")
    if name == "poly":
        if snr_db is not None:
            raise ValueError("the polynomial benchmark is noiseless; snr_db must be None")
        burn_in = 0
    us, rngs_e = [], []
    for s, length in enumerate(lengths):
        us.append(_rng(seed, 0, s).uniform(-1.0, 1.0, (burn_in + length, n_u)))
        rngs_e.append(_rng(seed, 1, s))
    sigma_e = 0.0
    if snr_db is not None:
        snr_db = float(snr_db)
        if not np.isfinite(snr_db):
            raise ValueError(f"invalid SNR {snr_db}")
        pilot, _ = _run(system, us[0], np.zeros((len(us[0]), n_y)), burn_in, _rng(seed, 2, 0))
        power = float(np.mean(np.var(pilot, axis=0)))
        if not power > 0.0:
            raise ValueError("noise-free output has zero variance; the SNR cannot be reached")
        sigma_e = float(np.sqrt(power / 10.0 ** (snr_db / 10.0)))
    ys, es, init = [], [], {}
    for s, (u, length) in enumerate(zip(us, lengths)):
        e = sigma_e * rngs_e[s].standard_normal((len(u), n_y)) if sigma_e > 0 else np.zeros((len(u), n_y))
        y, x0 = _run(system, u, e, burn_in, _rng(seed, 2, s))
        ys.append(y)
        es.append(e[burn_in:])
        init[SPLITS[s]] = x0
    b1 = lengths[0]
    b2 = b1 + lengths[1]
    meta = {
        "format_version": FORMAT_VERSION,
        "system": name,
        "system_params": system.to_dict(),
        "seed": int(seed),
        "snr_db": snr_db,
        "sigma_e": sigma_e,
        "burn_in": int(burn_in),
        "n_u": n_u,
        "n_y": n_y,
        "boundaries": [b1, b2],
        "initial_state": init,
    }
    u_all = np.concatenate([u[burn_in:] for u in us], axis=0)
    return Dataset(u_all, np.concatenate(ys), (b1, b2), meta, np.concatenate(es))


# files -------------------------------------------------------------------------


def dumps_json(obj) -> str:
    """Deterministic JSON text (sorted keys, shortest round-trip floats)."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_csv(path, k, u, y, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write ``k,u0..,y0..`` rows (plus optional named columns) with exact float text."""
    k = np.asarray(k)
    u = np.asarray(u, dtype=np.float64).reshape(len(k), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(k), -1)
    extra = extra or {}
    header = (["k"] + [f"u{i}" for i in range(u.shape[1])] + [f"y{i}" for i in range(y.shape[1])]
              + list(extra))
    cols = [np.asarray(v, dtype=np.float64).reshape(len(k)) for v in extra.values()]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(k)):
            w.writerow([str(int(k[i]))] + [repr(float(v)) for v in u[i]]
                       + [repr(float(v)) for v in y[i]] + [repr(float(c[i])) for c in cols])


def read_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read a ``k,u0..,y0..`` file; extra columns are ignored."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows or not rows[0] or rows[0][0] != "k":
        raise DataError(f"{path}: missing 'k,u0..,y0..' header")
    header = rows[0]
    ui = [i for i, h in enumerate(header) if h.startswith("u") and h[1:].isdigit()]
    yi = [i for i, h in enumerate(header) if h.startswith("y") and h[1:].isdigit()]
    if not yi:
        raise DataError(f"{path}: no output columns")
    try:
        table = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(-1, len(header))
    except ValueError as exc:
        raise DataError(f"{path}: malformed row ({exc})") from exc
    k = table[:, 0].astype(np.int64)
    if len(k) > 1 and np.any(np.diff(k) != 1):
        raise DataError(f"{path}: sample index k is not contiguous")
    return k, table[:, ui], table[:, yi]


def write_dataset(ds: Dataset, outdir) -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in SPLITS:
        seg = ds.segment(name)
        p = outdir / f"{name}.csv"
        write_csv(p, seg.k, seg.u, seg.y)
        paths.append(p)
    meta = dict(ds.meta)
    meta["boundaries"] = list(ds.boundaries)
    meta["n_u"], meta["n_y"] = ds.n_u, ds.n_y
    p = outdir / "meta.json"
    p.write_text(dumps_json(meta))
    paths.append(p)
    return paths


def read_dataset(outdir) -> Dataset:
    outdir = Path(outdir)
    meta_path = outdir / "meta.json"
    meta = {}
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{meta_path}: invalid JSON ({exc})") from exc
    parts = {name: read_csv(outdir / f"{name}.csv") for name in SPLITS}
    start = 0
    for name in SPLITS:
        k = parts[name][0]
        if len(k) and k[0] != start:
            raise DataError(f"{name}.csv starts at k={k[0]}, expected {start}")
        start += len(k)
    widths = {(p[1].shape[1], p[2].shape[1]) for p in parts.values()}
    if len(widths) != 1:
        raise DataError("splits disagree on the number of input/output channels")
    u = np.concatenate([parts[n][1] for n in SPLITS])
    y = np.concatenate([parts[n][2] for n in SPLITS])
    b1 = len(parts["train"][0])
    b2 = b1 + len(parts["val"][0])
    if "boundaries" in meta and list(meta["boundaries"]) != [b1, b2]:
        raise DataError(f"meta.json boundaries {meta['boundaries']} disagree with the CSV files")
    return Dataset(u, y, (b1, b2), meta)
