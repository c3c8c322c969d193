"""Gaussian-embedding retrieval.

The ranking key is the expected squared distance, which splits into a
mu-space Euclidean term plus per-item uncertainty masses. The query's own
mass is constant across the gallery, so ranking only needs
||mu_q - mu_g||^2 + mass(g); the reported score adds the query mass back so
scores equal the true expected squared distance. Exact search and the
two-stage pipeline (mu-space shortlist, mass re-rank) therefore order ties
identically by construction.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import BinaryIO, Optional, Sequence

import numpy as np

from ._kernels import kmeans_assign
from .core import (
    BadConfig,
    BadMagic,
    BadNlist,
    EmbeddingSet,
    EmptyGallery,
    GaussianEmbedding,
    OutOfRange,
    ShortlistTooSmall,
    TruncatedFile,
    VersionUnsupported,
)

_INDEX_MAGIC = b"PIDX"
_INDEX_VERSION = 1
_FLAG_IVF = 0x1


@dataclass(frozen=True)
class CoarseConfig:
    """IVF coarse quantizer settings: k-means cells over gallery mu vectors."""

    nlist: int
    training_iters: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.nlist < 1:
            raise BadNlist(f"nlist must be >= 1, got {self.nlist}")
        if self.training_iters < 1:
            raise OutOfRange(f"training_iters must be >= 1, got {self.training_iters}")


@dataclass(frozen=True)
class RankedList:
    query_id: str
    items: tuple[tuple[str, float], ...]

    def __post_init__(self):
        ids = [g for g, _ in self.items]
        if len(set(ids)) != len(ids):
            raise BadConfig("ranked list contains a duplicate gallery id")
        scores = [s for _, s in self.items]
        if any(b < a for a, b in zip(scores, scores[1:])):
            raise BadConfig("ranked list scores must be non-decreasing")

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(g for g, _ in self.items)

    @property
    def scores(self) -> tuple[float, ...]:
        return tuple(s for _, s in self.items)


class ProbIndex:
    """Immutable search structure: gallery mu rows plus a per-item mass vector.

    Optionally carries an IVF partition of the gallery for coarse probing.
    """

    def __init__(
        self,
        ids: Sequence[str],
        mu: np.ndarray,
        mass: np.ndarray,
        centroids: np.ndarray | None = None,
        postings: Sequence[np.ndarray] | None = None,
    ):
        self._ids = tuple(str(i) for i in ids)
        self._mu = np.ascontiguousarray(mu, dtype=np.float64)
        self._mass = np.asarray(mass, dtype=np.float64).copy()
        if self._mu.ndim != 2 or self._mu.shape[0] != len(self._ids):
            raise BadConfig("index mu must be (N, D) matching ids")
        if self._mass.shape != (len(self._ids),):
            raise BadConfig("index mass must be a length-N vector")
        if (centroids is None) != (postings is None):
            raise BadConfig("IVF needs both centroids and posting lists")
        self._mu.setflags(write=False)
        self._mass.setflags(write=False)
        if centroids is not None:
            self._centroids = np.ascontiguousarray(centroids, dtype=np.float64)
            self._postings = tuple(
                np.asarray(p, dtype=np.int64).copy() for p in postings
            )
            covered = np.concatenate([p for p in self._postings]) if self._postings else np.empty(0)
            if len(covered) != len(self._ids) or len(np.unique(covered)) != len(self._ids):
                raise BadConfig("posting lists must partition the gallery exactly once")
            self._centroids.setflags(write=False)
            for p in self._postings:
                p.setflags(write=False)
        else:
            self._centroids = None
            self._postings = None

    @property
    def ids(self) -> tuple[str, ...]:
        return self._ids

    @property
    def mu(self) -> np.ndarray:
        return self._mu

    @property
    def mass(self) -> np.ndarray:
        return self._mass

    @property
    def dim(self) -> int:
        return self._mu.shape[1]

    @property
    def has_coarse(self) -> bool:
        return self._centroids is not None

    @property
    def nlist(self) -> int:
        return 0 if self._centroids is None else self._centroids.shape[0]

    @property
    def centroids(self) -> np.ndarray | None:
        return self._centroids

    @property
    def postings(self) -> tuple[np.ndarray, ...] | None:
        return self._postings

    def __len__(self) -> int:
        return len(self._ids)


def _kmeans_pp_init(mu: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = mu.shape[0]
    centroids = np.empty((k, mu.shape[1]), dtype=np.float64)
    first = int(rng.integers(0, n))
    centroids[0] = mu[first]
    # squared distance to the nearest chosen centroid, updated incrementally
    d2 = ((mu - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with a chosen centroid
            centroids[j] = mu[int(rng.integers(0, n))]
        else:
            pick = int(rng.choice(n, p=d2 / total))
            centroids[j] = mu[pick]
        d2 = np.minimum(d2, ((mu - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _train_ivf(mu: np.ndarray, cfg: CoarseConfig) -> tuple[np.ndarray, list[np.ndarray]]:
    rng = np.random.default_rng(cfg.seed)
    centroids = _kmeans_pp_init(mu, cfg.nlist, rng)
    assign, _ = kmeans_assign(mu, centroids)
    for _ in range(cfg.training_iters):
        for j in range(cfg.nlist):
            members = mu[assign == j]
            if members.shape[0] > 0:
                centroids[j] = members.mean(axis=0)
            # empty cell keeps its previous centroid
        new_assign, _ = kmeans_assign(mu, centroids)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    postings = [np.flatnonzero(assign == j) for j in range(cfg.nlist)]
    return centroids, postings


def build_index(gallery: EmbeddingSet, coarse: Optional[CoarseConfig] = None) -> ProbIndex:
    """Index a gallery for expected-squared-distance search.

    coarse adds an IVF partition trained by k-means on the mu vectors; it
    changes only how two-stage search forms its candidate pool.
    """
    if len(gallery) == 0:
        raise EmptyGallery("cannot index an empty gallery")
    if coarse is not None and coarse.nlist > len(gallery):
        raise BadNlist(
            f"nlist={coarse.nlist} exceeds gallery size {len(gallery)}"
        )
    mass = gallery.masses()
    if coarse is None:
        return ProbIndex(gallery.ids, gallery.mu, mass)
    centroids, postings = _train_ivf(gallery.mu, coarse)
    return ProbIndex(gallery.ids, gallery.mu, mass, centroids, postings)


def _mu_sq_dist(index: ProbIndex, query_mu: np.ndarray, rows: np.ndarray | None = None):
    mu = index.mu if rows is None else index.mu[rows]
    diff = mu - query_mu[None, :]
    return (diff * diff).sum(axis=1)


def _query_parts(query: GaussianEmbedding | tuple, dim: int) -> tuple[np.ndarray, float]:
    if isinstance(query, GaussianEmbedding):
        q_mu, q_mass = query.mu, float(np.sum(np.exp(query.log_var)))
    else:
        q_mu, q_mass = np.asarray(query[0], dtype=np.float64), float(query[1])
    if q_mu.shape != (dim,):
        raise BadConfig(f"query dimension {q_mu.shape} does not match index dim {dim}")
    return q_mu, q_mass


def search_exact(
    index: ProbIndex, query: GaussianEmbedding, k: int, query_id: str = ""
) -> RankedList:
    """Top-k gallery items by expected squared distance, ties by insertion order."""
    if k < 1:
        raise OutOfRange(f"k must be >= 1, got {k}")
    q_mu, q_mass = _query_parts(query, index.dim)
    key = _mu_sq_dist(index, q_mu) + index.mass
    order = np.argsort(key, kind="stable")[: min(k, len(index))]
    items = tuple((index.ids[i], float(key[i] + q_mass)) for i in order)
    return RankedList(query_id=query_id, items=items)


def search_two_stage(
    index: ProbIndex,
    query: GaussianEmbedding,
    k: int,
    shortlist_k: int,
    nprobe: int | None = None,
    query_id: str = "",
) -> RankedList:
    """Shortlist by mu distance, then re-rank the shortlist with gallery masses.

    Stage 1 scans the whole gallery unless nprobe is given, in which case only
    the nprobe nearest IVF cells are probed (requires a coarse index). With
    shortlist_k >= N and no probing, output matches search_exact exactly.
    """
    if k < 1:
        raise OutOfRange(f"k must be >= 1, got {k}")
    if shortlist_k < k:
        raise ShortlistTooSmall(f"shortlist_k={shortlist_k} is below k={k}")
    q_mu, q_mass = _query_parts(query, index.dim)

    if nprobe is not None:
        if not index.has_coarse:
            raise BadConfig("nprobe given but the index has no coarse structure")
        if nprobe < 1:
            raise OutOfRange(f"nprobe must be >= 1, got {nprobe}")
        cent_d = ((index.centroids - q_mu[None, :]) ** 2).sum(axis=1)
        probe = np.argsort(cent_d, kind="stable")[: min(nprobe, index.nlist)]
        candidates = np.concatenate([index.postings[j] for j in probe])
        # global insertion order restores exact-search tie behavior
        candidates = np.sort(candidates)
    else:
        candidates = np.arange(len(index))

    stage1 = _mu_sq_dist(index, q_mu, candidates)
    keep = np.argsort(stage1, kind="stable")[: min(shortlist_k, candidates.size)]
    shortlist = candidates[keep]
    shortlist = np.sort(shortlist)

    key = _mu_sq_dist(index, q_mu, shortlist) + index.mass[shortlist]
    order = np.argsort(key, kind="stable")[: min(k, shortlist.size)]
    items = tuple(
        (index.ids[shortlist[i]], float(key[i] + q_mass)) for i in order
    )
    return RankedList(query_id=query_id, items=items)


def batch_search(
    index: ProbIndex,
    queries: EmbeddingSet,
    k: int,
    shortlist_k: int | None = None,
    nprobe: int | None = None,
    threads: int = 1,
) -> list[RankedList]:
    """Search every query; two-stage when shortlist_k is given, exact otherwise.

    Results keep query order and are identical for any thread count.
    """
    if threads < 1:
        raise OutOfRange(f"threads must be >= 1, got {threads}")
    masses = queries.masses()

    def one(i: int) -> RankedList:
        q = (queries.mu[i], masses[i])
        if shortlist_k is None:
            return search_exact(index, q, k, query_id=queries.ids[i])
        return search_two_stage(
            index, q, k, shortlist_k, nprobe=nprobe, query_id=queries.ids[i]
        )

    if threads == 1 or len(queries) <= 1:
        return [one(i) for i in range(len(queries))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(len(queries))))


def _read_exact(fh: BinaryIO, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise TruncatedFile(f"expected {count} bytes, got {len(data)}")
    return data


def save_index(index: ProbIndex, path: str) -> None:
    """Persist an index; numeric payload stays 64-bit so a reloaded index
    reproduces every ranking bit-for-bit."""
    flags = _FLAG_IVF if index.has_coarse else 0
    with open(path, "wb") as fh:
        fh.write(_INDEX_MAGIC)
        fh.write(struct.pack("<IIQI", _INDEX_VERSION, flags, len(index), index.dim))
        for id_ in index.ids:
            raw = id_.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        fh.write(np.ascontiguousarray(index.mu, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(index.mass, dtype="<f8").tobytes())
        if index.has_coarse:
            fh.write(struct.pack("<I", index.nlist))
            fh.write(np.ascontiguousarray(index.centroids, dtype="<f8").tobytes())
            for posting in index.postings:
                fh.write(struct.pack("<Q", posting.size))
                fh.write(np.ascontiguousarray(posting, dtype="<q").tobytes())


def load_index(path: str) -> ProbIndex:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != _INDEX_MAGIC:
            raise BadMagic(f"not an index file (magic {magic!r})")
        version, flags, count, dim = struct.unpack("<IIQI", _read_exact(fh, 20))
        if version != _INDEX_VERSION:
            raise VersionUnsupported(f"index version {version} not supported")
        ids = []
        for _ in range(count):
            (id_len,) = struct.unpack("<H", _read_exact(fh, 2))
            ids.append(_read_exact(fh, id_len).decode("utf-8"))
        mu = np.frombuffer(_read_exact(fh, count * dim * 8), dtype="<f8").reshape(count, dim)
        mass = np.frombuffer(_read_exact(fh, count * 8), dtype="<f8")
        centroids = None
        postings = None
        if flags & _FLAG_IVF:
            (nlist,) = struct.unpack("<I", _read_exact(fh, 4))
            centroids = np.frombuffer(
                _read_exact(fh, nlist * dim * 8), dtype="<f8"
            ).reshape(nlist, dim)
            postings = []
            for _ in range(nlist):
                (plen,) = struct.unpack("<Q", _read_exact(fh, 8))
                postings.append(np.frombuffer(_read_exact(fh, plen * 8), dtype="<q"))
        return ProbIndex(ids, mu, mass, centroids, postings)
