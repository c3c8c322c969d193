"""Export embeddings from a user-supplied encoder into PEMB files.

The model is plugged in as a "module:attr" string naming a callable that maps
a list of inputs (image paths or caption strings) to a (mu, log_var) pair,
where mu is array-like of shape (B, D) and log_var is either the same shape
or None for deterministic models. Inference runs sequentially batch by batch;
the output file is owned exclusively by the writer.
"""

from __future__ import annotations

import importlib
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_MAGIC = b"PEMB"
_VERSION = 1
_HEADER = struct.Struct("<IIQI")
_MODALITY_WIRE = {"untagged": 0, "visual": 1, "textual": 2}


class ExportError(Exception):
    pass


class ModelLoadError(ExportError):
    """The model spec did not resolve to a callable."""


class DimMismatch(ExportError):
    """Model output shape disagrees with the manifest or with itself."""


@dataclass(frozen=True)
class ExportManifest:
    """One export job: which model, which inputs, where the file goes.

    Exactly one of images / caption_file must be set. dim is optional; when
    given, every model batch is checked against it, and it is the only way to
    write a well-formed empty file. Caption files are read as UTF-8, one
    caption per line, ids assigned by 1-based line number; image ids are the
    file names.
    """

    model: str
    output: str
    modality: str = "untagged"
    batch_size: int = 64
    images: Sequence[str] | None = None
    caption_file: str | None = None
    dim: int | None = None

    def __post_init__(self):
        if (self.images is None) == (self.caption_file is None):
            raise ValueError("set exactly one of images or caption_file")
        if self.modality not in _MODALITY_WIRE:
            raise ValueError(
                f"modality must be one of {sorted(_MODALITY_WIRE)}, got {self.modality!r}"
            )
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.dim is not None and self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")


@dataclass(frozen=True)
class ExportReport:
    output: str
    count: int
    dim: int
    has_log_var: bool
    modality: str

    def to_dict(self) -> dict:
        return {
            "output": self.output,
            "count": self.count,
            "dim": self.dim,
            "has_log_var": self.has_log_var,
            "modality": self.modality,
        }


def resolve_model(spec: str) -> Callable:
    """Import "module:attr" and return the callable it names."""
    mod_name, sep, attr = spec.partition(":")
    if not sep or not mod_name or not attr:
        raise ModelLoadError(f"model spec must look like module:attr, got {spec!r}")
    try:
        module = importlib.import_module(mod_name)
    except ImportError as e:
        raise ModelLoadError(f"cannot import {mod_name!r}: {e}") from e
    try:
        fn = getattr(module, attr)
    except AttributeError:
        raise ModelLoadError(f"module {mod_name!r} has no attribute {attr!r}") from None
    if not callable(fn):
        raise ModelLoadError(f"{spec!r} is not callable")
    return fn


def _gather_inputs(manifest: ExportManifest) -> tuple[list[str], list[str]]:
    """Return (ids, raw inputs) in processing order."""
    if manifest.images is not None:
        inputs = [str(p) for p in manifest.images]
        ids = [os.path.basename(p) for p in inputs]
    else:
        with open(manifest.caption_file, "r", encoding="utf-8") as f:
            inputs = f.read().splitlines()
        ids = [f"line{i:06d}" for i in range(1, len(inputs) + 1)]
    if len(set(ids)) != len(ids):
        raise ValueError("input ids collide; image file names must be unique")
    return ids, inputs


def _check_batch(out, expect_dim, expect_lv, batch_len, spec):
    """Normalize one model return into float64 arrays and enforce shape."""
    if not isinstance(out, tuple) or len(out) != 2:
        raise ModelLoadError(f"{spec!r} must return a (mu, log_var) pair")
    mu_raw, lv_raw = out
    mu = np.asarray(mu_raw, dtype=np.float64)
    if mu.ndim != 2 or mu.shape[0] != batch_len:
        raise DimMismatch(
            f"model returned mu of shape {mu.shape} for a batch of {batch_len}"
        )
    if expect_dim is not None and mu.shape[1] != expect_dim:
        raise DimMismatch(
            f"model produced dim {mu.shape[1]}, expected {expect_dim}"
        )
    if lv_raw is None:
        lv = None
        has_lv = False
    else:
        lv = np.asarray(lv_raw, dtype=np.float64)
        if lv.shape != mu.shape:
            raise DimMismatch(
                f"log_var shape {lv.shape} does not match mu shape {mu.shape}"
            )
        has_lv = True
    if expect_lv is not None and has_lv != expect_lv:
        raise DimMismatch("model switched log_var on or off between batches")
    if not np.isfinite(mu).all() or (lv is not None and not np.isfinite(lv).all()):
        raise ValueError("model produced non-finite values")
    return mu, lv, mu.shape[1], has_lv


def export_embeddings(manifest: ExportManifest) -> ExportReport:
    """Run the manifest's model over its inputs and write one PEMB file."""
    model = resolve_model(manifest.model)
    ids, inputs = _gather_inputs(manifest)

    mu_parts: list[np.ndarray] = []
    lv_parts: list[np.ndarray] = []
    dim = manifest.dim
    has_lv: bool | None = None
    for start in range(0, len(inputs), manifest.batch_size):
        batch = inputs[start : start + manifest.batch_size]
        mu, lv, dim, has_lv = _check_batch(
            model(batch), dim, has_lv, len(batch), manifest.model
        )
        mu_parts.append(mu)
        if lv is not None:
            lv_parts.append(lv)

    if dim is None:
        raise ValueError("an export with no inputs needs an explicit dim")
    if has_lv is None:
        has_lv = False
    mu_all = np.concatenate(mu_parts) if mu_parts else np.zeros((0, dim))
    lv_all = np.concatenate(lv_parts) if has_lv else None

    _write_pemb(manifest.output, ids, mu_all, lv_all, manifest.modality, dim)
    return ExportReport(
        output=manifest.output,
        count=len(ids),
        dim=dim,
        has_log_var=has_lv,
        modality=manifest.modality,
    )


def _write_pemb(path, ids, mu, log_var, modality, dim):
    # layout: magic, u32 version, u32 flags, u64 count, u32 dim, then
    # length-prefixed utf-8 ids, f32 mu rows, optional f32 log-var rows
    flags = (1 if log_var is not None else 0) | (_MODALITY_WIRE[modality] << 1)
    encoded = []
    for id_ in ids:
        raw = id_.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"id too long for the format: {id_[:40]!r}...")
        encoded.append(raw)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(_HEADER.pack(_VERSION, flags, len(ids), dim))
        for raw in encoded:
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
        f.write(np.ascontiguousarray(mu, dtype="<f4").tobytes())
        if log_var is not None:
            f.write(np.ascontiguousarray(log_var, dtype="<f4").tobytes())
