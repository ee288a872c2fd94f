"""Command-line interface: ``koopid generate | train | eval | diagnose``.

Options can come from a flat ``key = value`` config file (``--config``); a
flag given on the command line wins over the file, which wins over the
built-in default. Unknown keys are rejected before any work starts.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
divergence.
"""

from __future__ import annotations

import argparse
import ast
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from . import autodiff as ad
from .analysis import nrms, observability_rank, spectral_radius
from .benchmarks.data import (DataError, Dataset, Segment, dumps_json, generate_dataset, read_csv,
                              read_dataset, write_csv, write_dataset)
from .benchmarks.poly import PolySystem, poly_lifted_A, poly_output_matrix
from .benchmarks.wiener_hammerstein import WhLiftedModel, WhSystem
from .io import load_bundle, save_bundle
from .training import ConfigError, DivergenceError, TrainConfig, predict, train

__all__ = ["main", "parse_config_text", "EXIT_OK", "EXIT_CONFIG", "EXIT_DATA", "EXIT_DIVERGED"]

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


# option parsing --------------------------------------------------------------------


def _widths(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    text = str(text).strip().strip("[]()")
    if not text:
        return ()
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text):
    if text is None or str(text).strip().lower() in ("none", "null", ""):
        return None
    return float(text)


@dataclass(frozen=True)
class Opt:
    name: str
    kind: Callable[[Any], Any]
    default: Any
    help: str
    choices: tuple | None = None


_TRAIN_OPTS = [
    Opt("data", str, None, "dataset directory (train/val/test CSV files)"),
    Opt("out", str, "run", "output directory for model.json and report.json"),
    Opt("n_z", int, 12, "lifted state dimension"),
    Opt("lag", int, 12, "encoder lag n"),
    Opt("horizon", int, 51, "prediction horizon T of each section"),
    Opt("batch_size", int, 256, "sections per batch"),
    Opt("lr", float, 1e-3, "Adam step size"),
    Opt("beta1", float, 0.9, "Adam first-moment decay"),
    Opt("beta2", float, 0.999, "Adam second-moment decay"),
    Opt("eps", float, 1e-8, "Adam epsilon"),
    Opt("max_epochs", int, 2000, "epoch limit"),
    Opt("patience", int, 20, "early-stopping patience in epochs"),
    Opt("seed", int, 0, "random seed"),
    Opt("b_structure", str, "general", "input matrix structure",
        ("linear", "bilinear", "input_affine", "general")),
    Opt("k_structure", str, "linear", "innovation matrix structure",
        ("none", "linear", "bilinear", "input_affine", "general")),
    Opt("encoder_hidden", _widths, (40,), "encoder hidden widths, comma separated"),
    Opt("b_hidden", _widths, (40,), "B network hidden widths"),
    Opt("k_hidden", _widths, (80,), "K network hidden widths"),
    Opt("bypass", _bool, True, "linear bypass in every network"),
    Opt("c_identity", _bool, False, "fix C = [I 0]"),
    Opt("weight_decay", float, 0.0, "l2 penalty on all parameters"),
    Opt("b_init_scale", float, 0.1, "initial scale of the B output layer"),
    Opt("k_init_scale", float, 0.0, "initial scale of the K output layer"),
    Opt("quiet", _bool, False, "suppress per-epoch progress lines"),
]

_GENERATE_OPTS = [
    Opt("system", str, "wh", "benchmark system", ("wh", "poly")),
    Opt("snr", _optional_float, None, "signal-to-noise ratio in dB ('none' for noiseless)"),
    Opt("seed", int, 0, "random seed"),
    Opt("n_train", int, None, "training samples (wh: 12000, poly: 1000)"),
    Opt("n_val", int, None, "validation samples (wh: 4000, poly: 500)"),
    Opt("n_test", int, None, "test samples (wh: 4000, poly: 500)"),
    Opt("burn_in", int, 200, "discarded transient samples per split"),
    Opt("out", str, "data", "output directory"),
]

_EVAL_OPTS = [
    Opt("model", str, None, "model file written by train"),
    Opt("data", str, None, "dataset directory"),
    Opt("out", str, "eval", "output directory for metrics.json and trace CSVs"),
    Opt("oracle", _bool, False, "evaluate the exact lifted model of the generating system"),
]

_DIAGNOSE_OPTS = [
    Opt("model", str, None, "model file written by train"),
    Opt("builtin", str, None, "diagnose a built-in exact lifted model instead", ("wh", "poly")),
    Opt("horizon", int, None, "number of observability blocks (default n_z)"),
    Opt("out", str, None, "write the JSON report here as well as to stdout"),
]

_COMMANDS = {"generate": _GENERATE_OPTS, "train": _TRAIN_OPTS, "eval": _EVAL_OPTS,
             "diagnose": _DIAGNOSE_OPTS}


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if not key:
            raise ConfigError(f"config line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = ast.literal_eval(value)
        out[key] = value
    return out


def _resolve(command: str, args: argparse.Namespace) -> dict[str, Any]:
    opts = _COMMANDS[command]
    file_values: dict[str, str] = {}
    if args.config:
        try:
            file_values = parse_config_text(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        unknown = set(file_values) - {o.name for o in opts}
        if unknown:
            raise ConfigError(f"unknown keys in config file for '{command}': {sorted(unknown)}")
    resolved = {}
    for o in opts:
        cli_value = getattr(args, o.name)
        if cli_value is not None:
            raw, source = cli_value, "command line"
        elif o.name in file_values:
            raw, source = file_values[o.name], "config file"
        else:
            resolved[o.name] = o.default
            continue
        try:
            value = o.kind(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid value for {o.name} from {source}: {raw!r} ({exc})") from None
        if o.choices and value not in o.choices:
            raise ConfigError(f"{o.name} must be one of {list(o.choices)}, got {value!r}")
        resolved[o.name] = value
    return resolved


def _json_ready(config: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in config.items()}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="koopid", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"koopid {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in _COMMANDS.items():
        p = sub.add_parser(name, help=f"{name} command")
        p.add_argument("--config", default=None, help="flat 'key = value' config file")
        for o in opts:
            default = "none" if o.default is None else o.default
            if isinstance(default, tuple):
                default = ",".join(str(v) for v in default)
            help_text = f"{o.help} (default: {default})"
            flag = "--" + o.name.replace("_", "-")
            if o.kind is _bool:
                p.add_argument(flag, dest=o.name, default=None, metavar="BOOL",
                               nargs="?", const="true", help=help_text)
            else:
                p.add_argument(flag, dest=o.name, default=None, help=help_text,
                               choices=list(o.choices) if o.choices else None)
    return parser


# commands --------------------------------------------------------------------------


def _envelope(command: str, config: dict) -> dict:
    return {"command": command, "version": __version__, "config": _json_ready(config)}


def cmd_generate(cfg: dict) -> int:
    wh = cfg["system"] == "wh"
    sizes = (12000, 4000, 4000) if wh else (1000, 500, 500)
    lengths = [cfg[k] if cfg[k] is not None else d for k, d in zip(("n_train", "n_val", "n_test"), sizes)]
    cfg = {**cfg, "n_train": lengths[0], "n_val": lengths[1], "n_test": lengths[2]}
    if min(lengths) < 2:
        raise ConfigError("every split needs at least 2 samples")
    if cfg["burn_in"] < 0:
        raise ConfigError("burn_in must be >= 0")
    system = WhSystem.default() if wh else PolySystem()
    try:
        ds = generate_dataset(system, *lengths, snr_db=cfg["snr"], seed=cfg["seed"], burn_in=cfg["burn_in"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ds.meta["generator"] = _envelope("generate", cfg)
    clean = None
    if cfg["snr"] is not None:
        # noiseless twin of the test split: same inputs, but its own true initial state
        clean = generate_dataset(system, *lengths, snr_db=None, seed=cfg["seed"], burn_in=cfg["burn_in"])
        ds.meta["initial_state_clean"] = clean.meta["initial_state"]
    out = Path(cfg["out"])
    try:
        paths = write_dataset(ds, out)
        if clean is not None:
            seg = clean.segment("test")
            write_csv(out / "test_clean.csv", seg.k, seg.u, seg.y)
            paths.append(out / "test_clean.csv")
    except OSError as exc:
        raise DataError(f"cannot write dataset: {exc}") from exc
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    if not cfg["data"]:
        raise ConfigError("train needs --data")
    tc = TrainConfig(n_z=cfg["n_z"], lag=cfg["lag"], horizon=cfg["horizon"],
                     batch_size=cfg["batch_size"], lr=cfg["lr"], beta1=cfg["beta1"],
                     beta2=cfg["beta2"], eps=cfg["eps"], max_epochs=cfg["max_epochs"],
                     patience=cfg["patience"], seed=cfg["seed"], b_kind=cfg["b_structure"],
                     k_kind=cfg["k_structure"], encoder_hidden=cfg["encoder_hidden"],
                     b_hidden=cfg["b_hidden"], k_hidden=cfg["k_hidden"], bypass=cfg["bypass"],
                     c_identity=cfg["c_identity"], weight_decay=cfg["weight_decay"],
                     b_init_scale=cfg["b_init_scale"], k_init_scale=cfg["k_init_scale"]).validate()
    ds = read_dataset(cfg["data"])
    for name in ("train", "val"):
        if len(ds.segment(name)) < tc.lag + tc.horizon:
            raise DataError(f"{name} split is shorter than lag + horizon = {tc.lag + tc.horizon}")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    envelope = _envelope("train", cfg)
    envelope["train_config"] = tc.to_dict()

    def progress(epoch, tl, vl, vn):
        if not cfg["quiet"]:
            print(f"epoch {epoch + 1} train_loss {tl:.6e} val_loss {vl:.6e} val_nrms {vn:.6f}", flush=True)

    def checkpoint(model, encoder, scaler, report):
        save_bundle(out / "model.json", model, encoder, scaler,
                    {"best_epoch": report.best_epoch, "train_config": tc.to_dict()})

    try:
        model, encoder, scaler, report = train(ds, tc, progress=progress, on_improve=checkpoint)
    except DivergenceError as exc:
        envelope["status"] = "diverged"
        envelope["error"] = str(exc)
        envelope["report"] = exc.report.to_dict() if exc.report else None
        (out / "report.json").write_text(dumps_json(envelope))
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_bundle(out / "model.json", model, encoder, scaler,
                {"best_epoch": report.best_epoch, "train_config": tc.to_dict()})
    envelope["status"] = "ok"
    envelope["report"] = report.to_dict()
    (out / "report.json").write_text(dumps_json(envelope))
    print(f"best epoch {report.best_epoch + 1} val_loss {report.best_val_loss:.6e}")
    return EXIT_OK


def _oracle(ds: Dataset):
    meta = ds.meta
    if meta.get("system") != "wh":
        raise DataError("the oracle model needs a dataset generated from the W-H system")
    model = WhLiftedModel(WhSystem.from_dict(meta["system_params"]))
    z_start = {name: model.lift(np.array(s["x"]), np.array(s["xbar"]))[0]
               for name, s in meta["initial_state"].items()}
    if "initial_state_clean" in meta:
        s = meta["initial_state_clean"]["test"]
        z_start["test_clean"] = model.lift(np.array(s["x"]), np.array(s["xbar"]))[0]
    return model, z_start


def cmd_eval(cfg: dict) -> int:
    if not cfg["data"]:
        raise ConfigError("eval needs --data")
    ds = read_dataset(cfg["data"])
    z_start = None
    if cfg["oracle"]:
        model, z_start = _oracle(ds)
        encoder = scaler = None
    else:
        if not cfg["model"]:
            raise ConfigError("eval needs --model (or --oracle)")
        model, encoder, scaler, _ = load_bundle(cfg["model"])
        if (model.n_u, model.n_y) != (ds.n_u, ds.n_y):
            raise DataError(f"model expects n_u={model.n_u}, n_y={model.n_y}; "
                            f"dataset has n_u={ds.n_u}, n_y={ds.n_y}")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    metrics = _envelope("eval", cfg)
    skip = encoder.lag if encoder is not None else 0
    metrics["skip"] = skip
    records = {name: ds.segment(name) for name in ("train", "val", "test")}
    clean_path = Path(cfg["data"]) / "test_clean.csv"
    if clean_path.exists():
        k, u, y = read_csv(clean_path)
        records["test_clean"] = Segment("test_clean", u, y, int(k[0]) if len(k) else 0)
    results: dict[str, dict[str, float]] = {"simulation": {}, "one-step": {}}
    for name, seg in records.items():
        zs = None if z_start is None else z_start.get(name)
        if z_start is not None and zs is None:
            raise DataError(f"no true initial state recorded for {name}")
        preds = {}
        for mode in ("simulation", "one-step"):
            try:
                y_hat, n = predict(model, encoder, seg.u, seg.y, mode, scaler, zs)
                results[mode][name] = nrms(y_hat, seg.y, skip=n)
            except ValueError as exc:
                raise DataError(f"{name}: {exc}") from exc
            preds[mode] = y_hat
        extra = {}
        for j in range(seg.y.shape[1]):
            extra[f"sim_y{j}"] = preds["simulation"][:, j]
            extra[f"onestep_y{j}"] = preds["one-step"][:, j]
        write_csv(out / f"trace_{name}.csv", seg.k, seg.u, seg.y, extra)
    metrics["nrms"] = results
    (out / "metrics.json").write_text(dumps_json(metrics))
    print(dumps_json(results), end="")
    return EXIT_OK


def cmd_diagnose(cfg: dict) -> int:
    report = _envelope("diagnose", cfg)
    if cfg["builtin"] == "wh":
        lifted = WhLiftedModel(WhSystem.default())
        A, C = lifted.A, lifted.C
        report["parameter_count"] = None
    elif cfg["builtin"] == "poly":
        A, C = poly_lifted_A(PolySystem()), poly_output_matrix()
        report["parameter_count"] = None
    else:
        if not cfg["model"]:
            raise ConfigError("diagnose needs --model or --builtin")
        model, encoder, _, _ = load_bundle(cfg["model"])
        A, C = model.A.value, model.C.value
        counts = {"A": int(model.A.size), "C": 0 if model.c_identity else int(model.C.size),
                  "B": ad.parameter_count(model.B.named_parameters().values()),
                  "K": ad.parameter_count(model.K.named_parameters().values()),
                  "encoder": ad.parameter_count(encoder.parameters())}
        counts["total"] = sum(counts.values())
        report["parameter_count"] = counts
    horizon = cfg["horizon"] if cfg["horizon"] is not None else A.shape[0]
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    report["observability"] = observability_rank(A, C, horizon).to_dict()
    report["spectral_radius"] = spectral_radius(A)
    text = dumps_json(report)
    if cfg["out"]:
        Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
        Path(cfg["out"]).write_text(text)
    print(text, end="")
    return EXIT_OK


_HANDLERS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "diagnose": cmd_diagnose}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_CONFIG
    try:
        cfg = _resolve(args.command, args)
        return _HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
