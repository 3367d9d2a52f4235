"""Checkpoint container: a JSON manifest plus raw little-endian float32 blobs.

One blob per parameter, named by its canonical path; batch-norm running
statistics go in a separate ``buffers/`` group so parameter counts stay
comparable with the cost accounting. Stored as an uncompressed zip, so
round-trips are bit-exact.
"""

from __future__ import annotations

import json
import zipfile

import numpy as np

from .errors import ConfigMismatch
from .models import Model, ModelConfig, build_model

__all__ = ["save_checkpoint", "load_checkpoint", "FORMAT_VERSION"]

FORMAT_VERSION = 1
_BLOB_DTYPE = "<f4"


def save_checkpoint(model: Model, path, epoch: int = 0, metrics: dict | None = None,
                    extra: dict | None = None) -> None:
    """Write the model's parameters and buffers plus a manifest to ``path``."""
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "epoch": int(epoch),
        "metrics": metrics or {},
    }
    if extra:
        manifest.update(extra)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for name, p in model.named_parameters():
            zf.writestr(f"params/{name}", np.ascontiguousarray(p.data, dtype=_BLOB_DTYPE).tobytes())
        for name, b in model.named_buffers():
            zf.writestr(f"buffers/{name}", np.ascontiguousarray(b, dtype=_BLOB_DTYPE).tobytes())


def read_manifest(path) -> dict:
    with zipfile.ZipFile(path, "r") as zf:
        return json.loads(zf.read("manifest.json"))


def load_checkpoint(path, expect_primitive: str | None = None,
                    expect_size: str | None = None) -> tuple[Model, dict]:
    """Rebuild the model described by the manifest and restore every blob.

    ``expect_primitive`` / ``expect_size`` assert compatibility with a
    requested configuration and raise ConfigMismatch on disagreement.
    """
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        config = ModelConfig.from_dict(manifest["model_config"])
        if expect_primitive is not None and expect_primitive != config.primitive:
            raise ConfigMismatch(
                f"checkpoint primitive {config.primitive!r} != requested {expect_primitive!r}")
        if expect_size is not None and expect_size != config.size_class:
            raise ConfigMismatch(
                f"checkpoint size {config.size_class!r} != requested {expect_size!r}")
        model = build_model(config, seed=0, dtype=np.float32)
        for name, p in model.named_parameters():
            raw = np.frombuffer(zf.read(f"params/{name}"), dtype=_BLOB_DTYPE)
            if raw.size != p.size:
                raise ConfigMismatch(f"blob {name} holds {raw.size} scalars, expected {p.size}")
            p.data = raw.reshape(p.shape).astype(np.float32)
        for name, b in model.named_buffers():
            raw = np.frombuffer(zf.read(f"buffers/{name}"), dtype=_BLOB_DTYPE)
            b[...] = raw.reshape(b.shape).astype(b.dtype)
    return model, manifest
