"""Binary and line-delimited interchange formats.

PEMB layout, all little-endian:

    magic  "PEMB"            4 bytes
    version u32              currently 1
    flags   u32              bit 0: log-variance section present
                             bits 1-2: modality (0 untagged, 1 visual, 2 textual)
    count   u64
    dim     u32
    count * [id_len u16, id bytes UTF-8]
    count * dim  f32         mu, row-major
    count * dim  f32         log sigma^2, row-major, only if flag bit 0

Storage is 32-bit; everything promotes to float64 on read. A file's byte
length must match the header arithmetic exactly.

Annotations are line-delimited JSON, one query per line, either
{"query": q, "positives": [ids]} or {"query": q, "relevance": {id: value}}.
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .core import (
    BadConfig,
    BadMagic,
    DuplicateId,
    EmbeddingSet,
    MatchTable,
    Modality,
    OutOfRange,
    TruncatedFile,
    VersionUnsupported,
)

_MAGIC = b"PEMB"
_VERSION = 1
_FLAG_LOG_VAR = 0x1
_MODALITY_SHIFT = 1
_KNOWN_FLAGS = 0x7
_HEADER = struct.Struct("<IIQI")  # version, flags, count, dim (after the magic)


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFile(f"wanted {n} bytes for {what}, got {len(buf)}")
    return buf


def write_pemb(embeddings: EmbeddingSet, path) -> None:
    flags = 0
    if embeddings.has_log_var:
        flags |= _FLAG_LOG_VAR
    flags |= embeddings.modality.wire_value << _MODALITY_SHIFT

    encoded_ids = []
    for id_ in embeddings.ids:
        raw = id_.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise OutOfRange(f"id {id_[:32]!r}... exceeds 65535 encoded bytes")
        encoded_ids.append(raw)

    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(_HEADER.pack(_VERSION, flags, len(embeddings), embeddings.dim))
        for raw in encoded_ids:
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
        f.write(embeddings.mu.astype("<f4").tobytes())
        if embeddings.has_log_var:
            f.write(embeddings.log_var.astype("<f4").tobytes())


def read_pemb(path) -> EmbeddingSet:
    """Sequential single-pass read; sections are sized from the header, so
    nothing beyond the current section is ever buffered."""
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise BadMagic(f"expected {_MAGIC!r}, got {magic!r}")
        version, flags, count, dim = _HEADER.unpack(
            _read_exact(f, _HEADER.size, "header")
        )
        if version != _VERSION:
            raise VersionUnsupported(f"version {version}; this reader handles {_VERSION}")
        if flags & ~_KNOWN_FLAGS:
            raise VersionUnsupported(f"unknown flag bits 0x{flags & ~_KNOWN_FLAGS:x}")
        has_log_var = bool(flags & _FLAG_LOG_VAR)
        modality = Modality.from_wire((flags >> _MODALITY_SHIFT) & 0x3)

        ids = []
        seen = set()
        for i in range(count):
            (id_len,) = struct.unpack("<H", _read_exact(f, 2, f"id length {i}"))
            id_ = _read_exact(f, id_len, f"id {i}").decode("utf-8")
            if id_ in seen:
                raise DuplicateId(f"id {id_!r} appears twice")
            seen.add(id_)
            ids.append(id_)

        section = count * dim * 4
        mu = np.frombuffer(_read_exact(f, section, "mu values"), dtype="<f4")
        mu = mu.reshape(count, dim).astype(np.float64)
        log_var = None
        if has_log_var:
            log_var = np.frombuffer(
                _read_exact(f, section, "log-variance values"), dtype="<f4"
            )
            log_var = log_var.reshape(count, dim).astype(np.float64)
        if f.read(1):
            # reuses the framing error: length disagrees with header arithmetic
            raise TruncatedFile("trailing bytes after the last section")

    return EmbeddingSet(ids, modality=modality, dim=dim, mu=mu, log_var=log_var)


# ---------------------------------------------------------------------------
# annotations


def read_annotations(path, gallery_ids: Sequence[str] | None = None) -> MatchTable:
    """Parse a JSONL annotation file into a MatchTable.

    The gallery universe is every id mentioned in the file, in first-mention
    order, extended by gallery_ids (so items that are pure negatives still
    count as known).
    """
    queries: list[str] = []
    gallery: list[str] = []
    known = set()
    relevance: dict[tuple[str, str], float] = {}

    def note(g: str):
        if g not in known:
            known.add(g)
            gallery.append(g)

    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise BadConfig(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
            if not isinstance(rec, dict) or "query" not in rec:
                raise BadConfig(f"{path}:{lineno}: expected an object with a 'query' key")
            q = str(rec["query"])
            has_pos = "positives" in rec
            has_rel = "relevance" in rec
            if has_pos == has_rel:
                raise BadConfig(
                    f"{path}:{lineno}: need exactly one of 'positives' or 'relevance'"
                )
            queries.append(q)
            if has_pos:
                for g in rec["positives"]:
                    g = str(g)
                    note(g)
                    relevance[(q, g)] = 1.0
            else:
                if not isinstance(rec["relevance"], dict):
                    raise BadConfig(f"{path}:{lineno}: 'relevance' must be an object")
                for g, v in rec["relevance"].items():
                    g = str(g)
                    note(g)
                    relevance[(q, g)] = float(v)

    for g in gallery_ids or ():
        note(str(g))
    # MatchTable validates uniqueness and the [0, 1] range
    return MatchTable(tuple(queries), tuple(gallery), relevance)


def write_annotations(table: MatchTable, path) -> None:
    """One line per query; binary rows compress to the positives form."""
    by_query: dict[str, dict[str, float]] = {q: {} for q in table.query_ids}
    for (q, g), v in table.relevance.items():
        by_query[q][g] = v
    with open(path, "w", encoding="utf-8") as f:
        for q in table.query_ids:
            row = by_query[q]
            if all(v == 1.0 for v in row.values()):
                rec = {"query": q, "positives": sorted(row)}
            else:
                rec = {"query": q, "relevance": {g: row[g] for g in sorted(row)}}
            f.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# JSONL embeddings (the text twin of PEMB, for the convert command)

_JSONL_TAG = "pemb_jsonl"


def write_embeddings_jsonl(embeddings: EmbeddingSet, path) -> None:
    """Text form of a PEMB file. Values are rounded to 32-bit before writing,
    so converting either direction is lossless at that precision."""
    head = {
        _JSONL_TAG: 1,
        "count": len(embeddings),
        "dim": embeddings.dim,
        "modality": embeddings.modality.value,
        "has_log_var": embeddings.has_log_var,
    }
    mu32 = embeddings.mu.astype(np.float32)
    lv32 = embeddings.log_var.astype(np.float32) if embeddings.has_log_var else None
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(head, sort_keys=True) + "\n")
        for i, id_ in enumerate(embeddings.ids):
            rec = {"id": id_, "mu": [float(x) for x in mu32[i]]}
            if lv32 is not None:
                rec["log_var"] = [float(x) for x in lv32[i]]
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_embeddings_jsonl(path) -> EmbeddingSet:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln for ln in (raw.strip() for raw in f) if ln]
    if not lines:
        raise TruncatedFile(f"{path}: empty file")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise BadConfig(f"{path}:1: invalid JSON ({e.msg})") from e
    if not isinstance(head, dict) or _JSONL_TAG not in head:
        raise BadMagic(f"{path}: first line is not a {_JSONL_TAG} header")
    dim = int(head["dim"])
    modality = Modality(head["modality"])
    has_log_var = bool(head["has_log_var"])

    ids = []
    mu_rows = []
    lv_rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise BadConfig(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
        if "id" not in rec or "mu" not in rec:
            raise BadConfig(f"{path}:{lineno}: record needs 'id' and 'mu'")
        if ("log_var" in rec) != has_log_var:
            raise BadConfig(
                f"{path}:{lineno}: log_var presence disagrees with the header"
            )
        if len(rec["mu"]) != dim or (has_log_var and len(rec["log_var"]) != dim):
            raise BadConfig(f"{path}:{lineno}: vector length differs from header dim")
        ids.append(str(rec["id"]))
        mu_rows.append(rec["mu"])
        if has_log_var:
            lv_rows.append(rec["log_var"])
    if len(ids) != int(head["count"]):
        raise TruncatedFile(
            f"{path}: header says {head['count']} records, found {len(ids)}"
        )

    mu = np.asarray(mu_rows, dtype=np.float64).reshape(len(ids), dim)
    log_var = (
        np.asarray(lv_rows, dtype=np.float64).reshape(len(ids), dim)
        if has_log_var
        else None
    )
    return EmbeddingSet(ids, modality=modality, dim=dim, mu=mu, log_var=log_var)
