"""Multiple-shooting prediction-error training and evaluation.

A training section starts at a legal index ``k`` (``lag <= k <= L - T``): the
encoder estimates ``z[k]`` from the past window, the innovation predictor runs
``T`` steps using the measured outputs, and the section loss is the mean over
those steps of the squared output error. A batch loss averages section losses
over distinct starts; ``venc`` averages over every legal start, so the batch
loss over the full index set equals ``venc`` exactly.

All training happens in standardized units (per-channel mean and standard
deviation of the training split); :func:`evaluate` and :func:`predict` map
back to original units.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .analysis import nrms
from .autodiff import Tensor
from .encoder import Encoder, _segment_arrays, gather_sections, legal_starts
from .koopman import KoopmanModel, StructureKind

__all__ = ["TrainConfig", "TrainReport", "Scaler", "DivergenceError", "ConfigError",
           "section_loss", "batch_loss", "venc", "train", "predict", "evaluate"]


class ConfigError(ValueError):
    """Invalid training or run configuration."""


class DivergenceError(RuntimeError):
    """A loss or gradient became non-finite; ``report`` holds the partial trace."""

    def __init__(self, message: str, report: "TrainReport | None" = None):
        super().__init__(message)
        self.report = report


@dataclass
class TrainConfig:
    """Everything that determines a training run.

    Defaults follow the Wiener-Hammerstein setting: 12 lifted states, encoder
    lag 12, horizon 51, batches of 256 sections, Adam at ``1e-3``, a network
    input matrix ``B(z, u)`` and a constant innovation gain.
    """

    n_z: int = 12
    lag: int = 12
    horizon: int = 51
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 2000
    patience: int = 20
    seed: int = 0
    b_kind: str = "general"
    k_kind: str = "linear"
    encoder_hidden: tuple[int, ...] = (40,)
    b_hidden: tuple[int, ...] = (40,)
    k_hidden: tuple[int, ...] = (80,)
    bypass: bool = True
    c_identity: bool = False
    weight_decay: float = 0.0
    a_radius: float = 0.95
    k_init_scale: float = 0.0
    b_init_scale: float = 0.1

    def validate(self) -> "TrainConfig":
        def positive(name):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")

        for name in ("n_z", "horizon", "batch_size", "max_epochs", "patience"):
            positive(name)
        if self.lag < 0:
            raise ConfigError(f"lag must be >= 0, got {self.lag}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not self.a_radius > 0:
            raise ConfigError("a_radius must be positive")
        for name in ("b_kind", "k_kind"):
            try:
                kind = StructureKind.parse(getattr(self, name))
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            if name == "b_kind" and kind is StructureKind.NONE:
                raise ConfigError("b_kind cannot be 'none'")
        for name in ("encoder_hidden", "b_hidden", "k_hidden"):
            widths = tuple(getattr(self, name))
            if any(int(w) < 1 for w in widths):
                raise ConfigError(f"{name} widths must be positive, got {widths}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("encoder_hidden", "b_hidden", "k_hidden"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        kw = dict(d)
        for name in ("encoder_hidden", "b_hidden", "k_hidden"):
            if name in kw:
                kw[name] = tuple(int(w) for w in kw[name])
        return cls(**kw)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_nrms: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    epochs_run: int = 0
    stopped_early: bool = False
    batch_size: int = 0
    batches_per_epoch: int = 0
    n_parameters: int = 0
    wall_time: float = 0.0

    def to_dict(self, include_wall_time: bool = False) -> dict:
        d = asdict(self)
        if not include_wall_time:
            d.pop("wall_time")
        return d


@dataclass
class Scaler:
    """Per-channel standardization ``(x - mean) / std`` for inputs and outputs."""

    u_mean: np.ndarray
    u_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    def __post_init__(self):
        for name in ("u_mean", "u_std", "y_mean", "y_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(-1))
        if np.any(~(self.u_std > 0)) or np.any(~(self.y_std > 0)):
            raise ValueError("constant channel: standard deviation must be positive")

    @classmethod
    def fit(cls, u, y) -> "Scaler":
        u = np.asarray(u, dtype=np.float64).reshape(len(y), -1)
        y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
        return cls(u.mean(axis=0), u.std(axis=0), y.mean(axis=0), y.std(axis=0))

    @classmethod
    def identity(cls, n_u: int, n_y: int) -> "Scaler":
        return cls(np.zeros(n_u), np.ones(n_u), np.zeros(n_y), np.ones(n_y))

    def scale_u(self, u):
        return (np.asarray(u, dtype=np.float64) - self.u_mean) / self.u_std

    def scale_y(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def unscale_y(self, y):
        return np.asarray(y, dtype=np.float64) * self.y_std + self.y_mean

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("u_mean", "u_std", "y_mean", "y_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(**{k: np.array(d[k], dtype=np.float64) for k in ("u_mean", "u_std", "y_mean", "y_std")})


# losses --------------------------------------------------------------------------


def _sections_sq_error(model: KoopmanModel, encoder: Encoder, u_past, y_past, u_fut, y_fut) -> Tensor:
    """Summed squared prediction error over a batch of sections."""
    z0 = encoder.encode_batch(u_past, y_past)
    y_hat = model.rollout_predictor(z0, u_fut, y_fut)
    return ad.sum(ad.square(ad.sub(y_hat, ad.constant(y_fut))))


def _l2(params: Sequence[Tensor]) -> Tensor:
    total = ad.sum(ad.square(params[0]))
    for p in params[1:]:
        total = ad.add(total, ad.sum(ad.square(p)))
    return total


def section_loss(model: KoopmanModel, encoder: Encoder, data, k: int, horizon: int,
                 split: str = "train") -> tuple[Tensor, np.ndarray]:
    """Loss of the section starting at ``k`` and its predicted outputs ``(T, n_y)``."""
    u, y = _segment_arrays(data, split)
    ks = legal_starts(len(y), encoder.lag, horizon)
    if not (ks.size and ks[0] <= k <= ks[-1]):
        raise IndexError(f"section start {k} outside the legal range [{encoder.lag}, {len(y) - horizon}]")
    up, yp, uf, yf = gather_sections(u, y, encoder.lag, horizon, [k])
    z0 = encoder.encode_batch(up, yp)
    y_hat = model.rollout_predictor(z0, uf, yf)
    loss = ad.mul(ad.sum(ad.square(ad.sub(y_hat, ad.constant(yf)))), 1.0 / horizon)
    return loss, y_hat.value[0].copy()


def batch_loss(model: KoopmanModel, encoder: Encoder, data, ks, horizon: int,
               weight_decay: float = 0.0, batch_size: int | None = None,
               split: str = "train") -> Tensor:
    """Mean section loss over distinct starts ``ks`` plus ``weight_decay * ||params||^2``."""
    u, y = _segment_arrays(data, split)
    ks = np.asarray(ks, dtype=np.int64).reshape(-1)
    if batch_size is not None and ks.size != batch_size:
        raise ValueError(f"batch holds {ks.size} sections, expected {batch_size}")
    if ks.size == 0:
        raise ValueError("empty batch")
    if np.unique(ks).size != ks.size:
        raise ValueError("section starts within a batch must be distinct")
    legal = legal_starts(len(y), encoder.lag, horizon)
    if not legal.size or ks.min() < legal[0] or ks.max() > legal[-1]:
        raise IndexError(f"section starts must lie in [{encoder.lag}, {len(y) - horizon}]")
    sections = gather_sections(u, y, encoder.lag, horizon, ks)
    loss = ad.mul(_sections_sq_error(model, encoder, *sections), 1.0 / (ks.size * horizon))
    if weight_decay:
        loss = ad.add(loss, ad.mul(_l2(model.parameters() + encoder.parameters()), weight_decay))
    return loss


def _venc_arrays(model, encoder, u, y, horizon, chunk: int = 4096) -> float:
    ks = legal_starts(len(y), encoder.lag, horizon)
    if not ks.size:
        raise ValueError(f"{len(y)} samples are too few for lag {encoder.lag} and horizon {horizon}")
    total = 0.0
    with ad.no_grad():
        for i in range(0, ks.size, chunk):
            sections = gather_sections(u, y, encoder.lag, horizon, ks[i:i + chunk])
            total += _sections_sq_error(model, encoder, *sections).item()
    return total / (ks.size * horizon)


def venc(model: KoopmanModel, encoder: Encoder, data, horizon: int, split: str = "train") -> float:
    """Mean squared prediction error over every legal section of a split."""
    u, y = _segment_arrays(data, split)
    return _venc_arrays(model, encoder, u, y, horizon)


# training ------------------------------------------------------------------------


def _snapshot(params: dict[str, ad.Parameter]) -> dict[str, np.ndarray]:
    return {k: p.value.copy() for k, p in params.items()}


def _restore(params: dict[str, ad.Parameter], values: dict[str, np.ndarray]) -> None:
    for k, p in params.items():
        p.value = values[k].copy()


def train(dataset, config: TrainConfig | None = None,
          progress: Callable[[int, float, float, float], None] | None = None,
          on_improve: Callable[[KoopmanModel, Encoder, Scaler, TrainReport], None] | None = None):
    """Fit a model and encoder on the ``train`` split with early stopping on ``val``.

    Returns ``(model, encoder, scaler, report)`` holding the parameters of the
    epoch with the lowest validation loss. ``progress(epoch, train, val, nrms)``
    runs after every epoch and ``on_improve`` whenever the best loss improves.

    Raises
    ------
    DivergenceError
        If a batch loss or gradient is not finite.
    """
    import time

    config = (config or TrainConfig()).validate()
    tr, va = dataset.segment("train"), dataset.segment("val")
    n, T = config.lag, config.horizon
    for seg in (tr, va):
        if len(seg) < n + T:
            raise ValueError(f"{seg.name} split has {len(seg)} samples; lag {n} and horizon {T} "
                             f"need at least {n + T}")
    scaler = Scaler.fit(tr.u, tr.y)
    u_tr, y_tr = scaler.scale_u(tr.u), scaler.scale_y(tr.y)
    u_va, y_va = scaler.scale_u(va.u), scaler.scale_y(va.y)
    n_u, n_y = u_tr.shape[1], y_tr.shape[1]

    ss_model, ss_enc, ss_shuffle = np.random.SeedSequence(config.seed).spawn(3)
    model = KoopmanModel.initialize(config.n_z, n_u, n_y, config.b_kind, config.k_kind,
                                    seed=np.random.default_rng(ss_model),
                                    b_hidden=config.b_hidden, k_hidden=config.k_hidden,
                                    bypass=config.bypass, c_identity=config.c_identity,
                                    a_radius=config.a_radius, k_scale=config.k_init_scale,
                                    b_scale=config.b_init_scale)
    encoder = Encoder.initialize(n, n_u, n_y, config.n_z, seed=np.random.default_rng(ss_enc),
                                 hidden=config.encoder_hidden, bypass=config.bypass)
    shuffle = np.random.default_rng(ss_shuffle)
    params = {**model.named_parameters(), **encoder.named_parameters()}
    opt = ad.Adam(params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)

    ks = legal_starts(len(y_tr), n, T)
    all_sections = gather_sections(u_tr, y_tr, n, T, ks)
    bs = min(config.batch_size, ks.size)
    n_batches = ks.size // bs
    val_spread = float(np.sum((y_va[n:] - y_va[n:].mean(axis=0)) ** 2) / len(y_va[n:]))

    report = TrainReport(batch_size=bs, batches_per_epoch=n_batches,
                         n_parameters=ad.parameter_count(params.values()))
    best = _snapshot(params)
    wait = 0
    start = time.perf_counter()
    for epoch in range(config.max_epochs):
        order = shuffle.permutation(ks.size)
        total = 0.0
        for b in range(n_batches):
            idx = order[b * bs:(b + 1) * bs]
            loss = ad.mul(_sections_sq_error(model, encoder, *(a[idx] for a in all_sections)),
                          1.0 / (bs * T))
            if config.weight_decay:
                loss = ad.add(loss, ad.mul(_l2(list(params.values())), config.weight_decay))
            value = loss.item()
            grads = ad.backward(loss)
            if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                report.epochs_run = epoch
                report.wall_time = time.perf_counter() - start
                raise DivergenceError(f"non-finite loss or gradient in epoch {epoch}, batch {b}", report)
            opt.step(grads)
            total += value
        try:
            val = _venc_arrays(model, encoder, u_va, y_va, T)
        except ValueError:
            val = float("nan")
        if not np.isfinite(val):
            report.epochs_run = epoch + 1
            report.wall_time = time.perf_counter() - start
            raise DivergenceError(f"non-finite validation loss in epoch {epoch}", report)
        val_nrms = float(np.sqrt(val / (n_y * val_spread))) if val_spread > 0 else float("nan")
        report.train_loss.append(total / n_batches)
        report.val_loss.append(val)
        report.val_nrms.append(val_nrms)
        report.epochs_run = epoch + 1
        if progress is not None:
            progress(epoch, total / n_batches, val, val_nrms)
        if val < report.best_val_loss:
            report.best_val_loss = val
            report.best_epoch = epoch
            best = _snapshot(params)
            wait = 0
            if on_improve is not None:
                on_improve(model, encoder, scaler, report)
        else:
            wait += 1
            if wait >= config.patience:
                report.stopped_early = True
                break
    _restore(params, best)
    report.wall_time = time.perf_counter() - start
    return model, encoder, scaler, report


# evaluation ----------------------------------------------------------------------


def _np(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def predict(model, encoder: Encoder | None, u, y, mode: str = "simulation",
            scaler: Scaler | None = None, z_start=None) -> tuple[np.ndarray, int]:
    """Predicted outputs for one contiguous record, in original units.

    Without ``z_start`` the state at sample ``n`` (the encoder lag) comes from
    the encoder and rows ``0..n-1`` of the result are NaN. With ``z_start``
    (the true lifted state at sample 0, for oracle models) prediction starts at
    sample 0. ``mode`` is ``"simulation"`` (free run, zero innovation) or
    ``"one-step"`` (innovation predictor fed with the measured outputs).

    ``model`` only needs ``step(z, u, e)`` and ``output(z)`` on batches.
    Returns ``(y_hat, n)`` where ``n`` is the number of samples to skip when
    scoring.
    """
    if mode not in ("simulation", "one-step"):
        raise ValueError(f"mode must be 'simulation' or 'one-step', got {mode!r}")
    y = np.asarray(y, dtype=np.float64)
    y = y.reshape(len(y), -1)
    u = np.asarray(u, dtype=np.float64).reshape(len(y), -1)
    n = encoder.lag if encoder is not None else 0
    if len(y) < n + 2:
        raise ValueError(f"record of {len(y)} samples is shorter than lag + 2 = {n + 2}")
    scaler = scaler or Scaler.identity(u.shape[1], y.shape[1])
    us, ys = scaler.scale_u(u), scaler.scale_y(y)
    out = np.full(y.shape, np.nan)
    with ad.no_grad():
        if z_start is not None:
            z = np.asarray(z_start, dtype=np.float64).reshape(1, -1)
            k0 = 0
        else:
            if encoder is None:
                raise ValueError("an encoder or an initial state is required")
            z = _np(encoder.encode_batch(us[None, :n], ys[None, :n + 1]))
            k0 = n
        for k in range(k0, len(y)):
            y_hat = _np(model.output(z))
            out[k] = y_hat[0]
            if k + 1 < len(y):
                e = ys[k:k + 1] - y_hat if mode == "one-step" else np.zeros_like(y_hat)
                z = _np(model.step(z, us[k:k + 1], e))
    out[k0:] = scaler.unscale_y(out[k0:])
    return out, n


def evaluate(model, encoder: Encoder | None, dataset, mode: str = "simulation",
             scaler: Scaler | None = None, splits: Sequence[str] = ("train", "val", "test"),
             z_start: dict | None = None, skip: int | None = None) -> dict[str, float]:
    """NRMS per split, scoring samples from the encoder lag onward.

    ``z_start`` optionally maps split names to true initial lifted states (see
    :func:`predict`); ``skip`` overrides the number of unscored samples.
    """
    result = {}
    for name in splits:
        seg = dataset.segment(name)
        zs = None if z_start is None else z_start.get(name)
        y_hat, n = predict(model, encoder, seg.u, seg.y, mode, scaler, zs)
        result[name] = nrms(y_hat, seg.y, skip=n if skip is None else skip)
    return result
