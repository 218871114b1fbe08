"""Self-describing model checkpoints.

A checkpoint is a single ``.npz`` file with a versioned JSON header under the
``__meta__`` key (format version, full model config, seed, and optionally the
label vocabulary and speaker roster) plus one array entry per parameter path
prefixed with ``param/``. Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import dataclasses
import json
import os
import tempfile
import zipfile
from typing import Optional

import numpy as np

from .capsnet import ModelConfig
from .errors import FormatError
from .numeric import Params

FORMAT_VERSION = 1


def save_checkpoint(path: str, config: ModelConfig, params: Params,
                    vocab_payload: Optional[dict] = None) -> None:
    meta = {
        "format": "capsintent-checkpoint",
        "version": FORMAT_VERSION,
        "config": dataclasses.asdict(config),
        "seed": config.seed,
    }
    if vocab_payload is not None:
        meta["vocab"] = vocab_payload
    arrays = {f"param/{name}": value for name, value in params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".npz.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_checkpoint(path: str):
    """Returns (config, params, vocab_payload or None)."""
    try:
        with np.load(path) as data:
            if "__meta__" not in data:
                raise FormatError(f"{path} is not a capsintent checkpoint (missing header)")
            meta = json.loads(bytes(data["__meta__"]).decode())
            if meta.get("format") != "capsintent-checkpoint":
                raise FormatError(f"{path} has unknown checkpoint format {meta.get('format')!r}")
            if meta.get("version") != FORMAT_VERSION:
                raise FormatError(f"unsupported checkpoint version {meta.get('version')!r}")
            params = {
                key[len("param/"):]: np.array(data[key])
                for key in data.files if key.startswith("param/")
            }
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    config = ModelConfig(**meta["config"])
    return config, params, meta.get("vocab")
