"""Model bundle files: model, encoder and scaler in one JSON document.

Floats are written with their shortest round-trip representation, so loading
a bundle restores every parameter bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

from . import __version__
from .benchmarks.data import DataError, dumps_json
from .encoder import Encoder
from .koopman import KoopmanModel
from .training import Scaler

__all__ = ["BUNDLE_FORMAT", "bundle_dict", "save_bundle", "load_bundle"]

BUNDLE_FORMAT = "koopid-model/1"


def bundle_dict(model: KoopmanModel, encoder: Encoder, scaler: Scaler,
                extra: dict | None = None) -> dict:
    d = {
        "format": BUNDLE_FORMAT,
        "version": __version__,
        "model": model.to_dict(),
        "encoder": encoder.to_dict(),
        "scaler": scaler.to_dict(),
    }
    if extra:
        d.update(extra)
    return d


def save_bundle(path, model: KoopmanModel, encoder: Encoder, scaler: Scaler,
                extra: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(dumps_json(bundle_dict(model, encoder, scaler, extra)))
    tmp.replace(path)


def load_bundle(path) -> tuple[KoopmanModel, Encoder, Scaler, dict]:
    """Returns ``(model, encoder, scaler, document)``."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model file {path}: {exc}") from exc
    if doc.get("format") != BUNDLE_FORMAT:
        raise DataError(f"{path} is not a model file (format {doc.get('format')!r})")
    model = KoopmanModel.from_dict(doc["model"])
    encoder = Encoder.from_dict(doc["encoder"])
    scaler = Scaler.from_dict(doc["scaler"])
    return model, encoder, scaler, doc
