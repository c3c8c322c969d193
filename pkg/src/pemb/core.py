"""Core value types: Gaussian embeddings, embedding sets, match tables.

Every input is modeled as a diagonal Gaussian N(mu, diag(sigma^2)). The
canonical stored parameterization is log sigma^2, so variances are positive
by construction and all downstream math converts via exp exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np


# ---------------------------------------------------------------------------
# errors

class PembError(Exception):
    """Base class for all toolkit errors."""


class DimensionMismatch(PembError):
    pass


class NonFiniteValue(PembError):
    pass


class NonFiniteGradient(PembError):
    pass


class DuplicateId(PembError):
    pass


class UnknownId(PembError):
    pass


class OutOfRange(PembError):
    pass


class ShapeMismatch(PembError):
    pass


class LengthMismatch(PembError):
    pass


class EmptyBatch(PembError):
    pass


class EmptyGallery(PembError):
    pass


class EmptyClass(PembError):
    pass


class NoNegative(PembError):
    pass


class VarianceUnderflow(PembError):
    pass


class BadNlist(PembError):
    pass


class ShortlistTooSmall(PembError):
    pass


class DegenerateRange(PembError):
    pass


class BadMagic(PembError):
    pass


class VersionUnsupported(PembError):
    pass


class TruncatedFile(PembError):
    pass


class BadConfig(PembError):
    pass


# ---------------------------------------------------------------------------
# embeddings

def _as_float_vector(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatch(f"{name} must be a 1-D vector, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class GaussianEmbedding:
    """One input's distribution parameters: mean vector and log-variance vector."""

    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        mu = _as_float_vector(self.mu, "mu")
        log_var = _as_float_vector(self.log_var, "log_var")
        if mu.shape[0] != log_var.shape[0]:
            raise DimensionMismatch(
                f"mu has length {mu.shape[0]} but log_var has length {log_var.shape[0]}"
            )
        if mu.shape[0] < 1:
            raise DimensionMismatch("embedding dimension must be >= 1")
        if not (np.isfinite(mu).all() and np.isfinite(log_var).all()):
            raise NonFiniteValue("embedding parameters must be finite")
        mu = mu.copy()
        log_var = log_var.copy()
        mu.setflags(write=False)
        log_var.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_var", log_var)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)


def make_embedding(mu, log_var) -> GaussianEmbedding:
    """Validate and construct a GaussianEmbedding from raw vectors."""
    return GaussianEmbedding(mu=np.asarray(mu), log_var=np.asarray(log_var))


def uncertainty_mass(e: GaussianEmbedding) -> float:
    """Scalar uncertainty of an embedding: ||sigma^2||_1 = sum_i exp(log_var_i)."""
    return float(np.sum(np.exp(np.asarray(e.log_var, dtype=np.float64))))


class Modality(Enum):
    UNTAGGED = "untagged"
    VISUAL = "visual"
    TEXTUAL = "textual"

    @property
    def wire_value(self) -> int:
        # stable on-disk encoding shared with the PEMB flag bits
        return {"untagged": 0, "visual": 1, "textual": 2}[self.value]

    @classmethod
    def from_wire(cls, value: int) -> "Modality":
        table = {0: cls.UNTAGGED, 1: cls.VISUAL, 2: cls.TEXTUAL}
        if value not in table:
            raise OutOfRange(f"unknown modality code {value}")
        return table[value]


class EmbeddingSet:
    """An ordered collection of Gaussian embeddings with unique string ids.

    Internally column-stacked into (N, D) float64 matrices so batched
    operations never rebuild arrays. Immutable after construction.

    A set built without log-variances is mean-only (a deterministic encoder's
    output). Its uncertainty masses are zero; accessing log_var, var, or
    individual distribution objects raises BadConfig.
    """

    def __init__(
        self,
        ids: Sequence[str],
        embeddings: Sequence[GaussianEmbedding] | None = None,
        modality: Modality = Modality.UNTAGGED,
        dim: int | None = None,
        *,
        mu: np.ndarray | None = None,
        log_var: np.ndarray | None = None,
    ):
        ids = [str(i) for i in ids]
        if len(set(ids)) != len(ids):
            raise DuplicateId("embedding ids must be unique within a set")
        if any(len(i) == 0 for i in ids):
            raise OutOfRange("embedding ids must be non-empty strings")

        if embeddings is not None:
            if mu is not None or log_var is not None:
                raise BadConfig("pass either embeddings or (mu, log_var), not both")
            if len(embeddings) != len(ids):
                raise LengthMismatch(
                    f"{len(ids)} ids but {len(embeddings)} embeddings"
                )
            if embeddings:
                dims = {e.dim for e in embeddings}
                if len(dims) != 1:
                    raise DimensionMismatch(f"mixed embedding dimensions {sorted(dims)}")
                inferred = dims.pop()
                if dim is not None and dim != inferred:
                    raise DimensionMismatch(f"dim={dim} but embeddings have D={inferred}")
                dim = inferred
                mu = np.stack([e.mu for e in embeddings]).astype(np.float64)
                log_var = np.stack([e.log_var for e in embeddings]).astype(np.float64)
            else:
                if dim is None:
                    raise DimensionMismatch("empty set requires an explicit dim")
                mu = np.empty((0, dim), dtype=np.float64)
                log_var = np.empty((0, dim), dtype=np.float64)
        else:
            if mu is None:
                raise BadConfig("pass embeddings or a mu array (log_var optional)")
            mu = np.asarray(mu, dtype=np.float64)
            if mu.ndim != 2:
                raise ShapeMismatch(f"mu must be (N, D), got shape {mu.shape}")
            if log_var is not None:
                log_var = np.asarray(log_var, dtype=np.float64)
                if log_var.shape != mu.shape:
                    raise ShapeMismatch(
                        f"mu shape {mu.shape} and log_var shape {log_var.shape} must be equal (N, D)"
                    )
            if mu.shape[0] != len(ids):
                raise LengthMismatch(f"{len(ids)} ids but {mu.shape[0]} rows")
            if dim is not None and mu.shape[1] != dim:
                raise DimensionMismatch(f"dim={dim} but arrays have D={mu.shape[1]}")
            if mu.shape[1] < 1:
                raise DimensionMismatch("embedding dimension must be >= 1")
            if not np.isfinite(mu).all():
                raise NonFiniteValue("embedding parameters must be finite")
            if log_var is not None and not np.isfinite(log_var).all():
                raise NonFiniteValue("embedding parameters must be finite")
            dim = mu.shape[1]
            mu = mu.copy()
            log_var = log_var.copy() if log_var is not None else None

        mu.setflags(write=False)
        if log_var is not None:
            log_var.setflags(write=False)
        self._ids: tuple[str, ...] = tuple(ids)
        self._index = {i: k for k, i in enumerate(ids)}
        self._mu = mu
        self._log_var = log_var
        self._dim = int(dim)
        self._modality = modality

    @classmethod
    def from_arrays(
        cls,
        ids: Sequence[str],
        mu: np.ndarray,
        log_var: np.ndarray | None = None,
        modality: Modality = Modality.UNTAGGED,
    ) -> "EmbeddingSet":
        return cls(ids, modality=modality, mu=mu, log_var=log_var)

    @property
    def ids(self) -> tuple[str, ...]:
        return self._ids

    @property
    def mu(self) -> np.ndarray:
        return self._mu

    @property
    def has_log_var(self) -> bool:
        return self._log_var is not None

    @property
    def log_var(self) -> np.ndarray:
        if self._log_var is None:
            raise BadConfig("set is mean-only: no log-variance data")
        return self._log_var

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def modality(self) -> Modality:
        return self._modality

    @property
    def embeddings(self) -> list[GaussianEmbedding]:
        return [GaussianEmbedding(self._mu[i], self.log_var[i]) for i in range(len(self))]

    def __len__(self) -> int:
        return self._mu.shape[0]

    def __getitem__(self, key: int | str) -> GaussianEmbedding:
        if isinstance(key, str):
            if key not in self._index:
                raise UnknownId(f"no embedding with id {key!r}")
            key = self._index[key]
        return GaussianEmbedding(self._mu[key], self.log_var[key])

    def __iter__(self) -> Iterator[GaussianEmbedding]:
        for i in range(len(self)):
            yield self[i]

    def index_of(self, id_: str) -> int:
        if id_ not in self._index:
            raise UnknownId(f"no embedding with id {id_!r}")
        return self._index[id_]

    def masses(self) -> np.ndarray:
        """Per-item uncertainty mass ||sigma^2||_1 as an (N,) vector.

        Mean-only sets are point masses, so their uncertainty is exactly zero.
        """
        if self._log_var is None:
            return np.zeros(len(self), dtype=np.float64)
        return np.exp(self._log_var).sum(axis=1)


@dataclass(frozen=True)
class MatchTable:
    """Sparse query-gallery relevance in [0, 1]; unlisted pairs are 0."""

    query_ids: tuple[str, ...]
    gallery_ids: tuple[str, ...]
    relevance: Mapping[tuple[str, str], float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "query_ids", tuple(str(q) for q in self.query_ids))
        object.__setattr__(self, "gallery_ids", tuple(str(g) for g in self.gallery_ids))
        if len(set(self.query_ids)) != len(self.query_ids):
            raise DuplicateId("query ids must be unique")
        if len(set(self.gallery_ids)) != len(self.gallery_ids):
            raise DuplicateId("gallery ids must be unique")
        qset = set(self.query_ids)
        gset = set(self.gallery_ids)
        rel = {}
        for (q, g), v in dict(self.relevance).items():
            if q not in qset:
                raise UnknownId(f"relevance references unknown query {q!r}")
            if g not in gset:
                raise UnknownId(f"relevance references unknown gallery id {g!r}")
            v = float(v)
            if not (0.0 <= v <= 1.0):
                raise OutOfRange(f"relevance for ({q!r}, {g!r}) is {v}, outside [0, 1]")
            rel[(q, g)] = v
        object.__setattr__(self, "relevance", rel)

    def value(self, query_id: str, gallery_id: str) -> float:
        return self.relevance.get((query_id, gallery_id), 0.0)

    def positives(self, query_id: str, threshold: float = 0.5) -> set[str]:
        return {
            g for (q, g), v in self.relevance.items()
            if q == query_id and v >= threshold
        }

    def dense(
        self,
        query_ids: Sequence[str] | None = None,
        gallery_ids: Sequence[str] | None = None,
    ) -> np.ndarray:
        """Materialize a (Q, G) label matrix for the given id subsets."""
        qs = list(query_ids) if query_ids is not None else list(self.query_ids)
        gs = list(gallery_ids) if gallery_ids is not None else list(self.gallery_ids)
        qset = set(self.query_ids)
        gset = set(self.gallery_ids)
        for q in qs:
            if q not in qset:
                raise UnknownId(f"unknown query {q!r}")
        for g in gs:
            if g not in gset:
                raise UnknownId(f"unknown gallery id {g!r}")
        out = np.zeros((len(qs), len(gs)), dtype=np.float64)
        gpos = {g: j for j, g in enumerate(gs)}
        qpos = {q: i for i, q in enumerate(qs)}
        for (q, g), v in self.relevance.items():
            if q in qpos and g in gpos:
                out[qpos[q], gpos[g]] = v
        return out
