"""Distances between diagonal-Gaussian embeddings.

The primary metric is the closed-form expected squared distance

    csd(Zv, Zt) = E||Zv - Zt||_2^2 = ||mu_v - mu_t||_2^2 + sum_i (var_v_i + var_t_i)

whose self-distance 2*||sigma^2||_1 is deliberately nonzero: an uncertain
input is far from everything, including itself. The remaining kinds exist for
ablation: Wasserstein-2 (squared), KL, Jensen-Shannon (MC), Bhattacharyya,
expected-likelihood kernel (negative log), the sampled matching probability,
and the mu-only Euclidean baseline.

All math runs in float64 regardless of input storage precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import _kernels
from .core import (
    BadConfig,
    DimensionMismatch,
    EmbeddingSet,
    GaussianEmbedding,
    VarianceUnderflow,
)

# guards the logs/denominators of the density-based kinds; csd and
# wasserstein2 are polynomial in the parameters and need no floor
VARIANCE_FLOOR = 1e-12


class DistanceKind(Enum):
    CSD = "csd"
    WASSERSTEIN2 = "wasserstein2"
    KL = "kl"
    JS_MC = "js_mc"
    BHATTACHARYYA = "bhattacharyya"
    ELK = "elk"
    PCME_MATCH_PROB_MC = "pcme_match_prob_mc"
    EUCLIDEAN_MU_ONLY = "euclidean_mu_only"

    @property
    def requires_mc(self) -> bool:
        return self in (DistanceKind.JS_MC, DistanceKind.PCME_MATCH_PROB_MC)

    @property
    def has_closed_form(self) -> bool:
        return not self.requires_mc

    @property
    def higher_is_closer(self) -> bool:
        # the sampled matching probability is a similarity, not a distance;
        # ranking layers negate it
        return self is DistanceKind.PCME_MATCH_PROB_MC


@dataclass(frozen=True)
class McConfig:
    """Sample count and seed for the Monte Carlo kinds."""

    num_samples: int = 8
    seed: int = 0

    def __post_init__(self):
        if int(self.num_samples) < 1:
            raise BadConfig(f"num_samples must be >= 1, got {self.num_samples}")
        object.__setattr__(self, "num_samples", int(self.num_samples))
        object.__setattr__(self, "seed", int(self.seed))


def _pair(zv: GaussianEmbedding, zt: GaussianEmbedding):
    if zv.dim != zt.dim:
        raise DimensionMismatch(f"dimension mismatch: {zv.dim} vs {zt.dim}")
    mu_v = np.asarray(zv.mu, dtype=np.float64)
    mu_t = np.asarray(zt.mu, dtype=np.float64)
    var_v = np.exp(np.asarray(zv.log_var, dtype=np.float64))
    var_t = np.exp(np.asarray(zt.log_var, dtype=np.float64))
    return mu_v, var_v, mu_t, var_t


def _check_floor(*variances: np.ndarray):
    for v in variances:
        if np.min(v) < VARIANCE_FLOOR:
            raise VarianceUnderflow(
                f"variance {np.min(v):.3e} below floor {VARIANCE_FLOOR:.0e}"
            )


# ---------------------------------------------------------------------------
# scalar operations

def csd(zv: GaussianEmbedding, zt: GaussianEmbedding) -> float:
    """Closed-form expected squared Euclidean distance between two embeddings."""
    mu_v, var_v, mu_t, var_t = _pair(zv, zt)
    return float(((mu_v - mu_t) ** 2).sum() + var_v.sum() + var_t.sum())


def wasserstein2_sq(zv: GaussianEmbedding, zt: GaussianEmbedding) -> float:
    """Squared 2-Wasserstein distance: ||mu_v - mu_t||^2 + ||sigma_v - sigma_t||^2."""
    mu_v, var_v, mu_t, var_t = _pair(zv, zt)
    return float(((mu_v - mu_t) ** 2).sum() + ((np.sqrt(var_v) - np.sqrt(var_t)) ** 2).sum())


def kl_gaussian(zv: GaussianEmbedding, zt: GaussianEmbedding) -> float:
    """KL(first || second) for diagonal Gaussians; asymmetric."""
    mu_v, var_v, mu_t, var_t = _pair(zv, zt)
    _check_floor(var_v, var_t)
    return float(
        0.5 * (np.log(var_t / var_v) + (var_v + (mu_v - mu_t) ** 2) / var_t - 1.0).sum()
    )


def bhattacharyya(zv: GaussianEmbedding, zt: GaussianEmbedding) -> float:
    """Bhattacharyya distance for diagonal Gaussians."""
    mu_v, var_v, mu_t, var_t = _pair(zv, zt)
    _check_floor(var_v, var_t)
    vbar = 0.5 * (var_v + var_t)
    quad = 0.125 * (((mu_v - mu_t) ** 2) / vbar).sum()
    logs = 0.5 * (np.log(vbar) - 0.5 * (np.log(var_v) + np.log(var_t))).sum()
    return float(quad + logs)


def elk_neglog(zv: GaussianEmbedding, zt: GaussianEmbedding) -> float:
    """Negative log of the expected likelihood kernel integral N(mu_v - mu_t; 0, var_v + var_t)."""
    mu_v, var_v, mu_t, var_t = _pair(zv, zt)
    _check_floor(var_v, var_t)
    vsum = var_v + var_t
    return float(0.5 * (np.log(2.0 * np.pi * vsum) + ((mu_v - mu_t) ** 2) / vsum).sum())


def euclidean_mu_only(zv: GaussianEmbedding, zt: GaussianEmbedding) -> float:
    """Plain Euclidean distance between the means, ignoring variances."""
    mu_v, _, mu_t, _ = _pair(zv, zt)
    return float(np.sqrt(((mu_v - mu_t) ** 2).sum()))


def _gaussian_logpdf(x: np.ndarray, mu: np.ndarray, var: np.ndarray) -> np.ndarray:
    # x: (J, D) samples -> (J,) log densities
    return -0.5 * (np.log(2.0 * np.pi * var) + (x - mu) ** 2 / var).sum(axis=1)


def js_mc(zv: GaussianEmbedding, zt: GaussianEmbedding, cfg: McConfig) -> float:
    """Monte Carlo Jensen-Shannon divergence 0.5*KL(P||M) + 0.5*KL(Q||M).

    M is the equal mixture; no closed form exists for Gaussian mixtures, so
    both KL terms are estimated with cfg.num_samples reparameterized draws.
    Deterministic given cfg.seed.
    """
    mu_v, var_v, mu_t, var_t = _pair(zv, zt)
    _check_floor(var_v, var_t)
    rng = np.random.default_rng(cfg.seed)
    j = cfg.num_samples
    xs_p = mu_v + np.sqrt(var_v) * rng.standard_normal((j, mu_v.shape[0]))
    xs_q = mu_t + np.sqrt(var_t) * rng.standard_normal((j, mu_t.shape[0]))

    def kl_to_mixture(xs, mu_own, var_own):
        log_own = _gaussian_logpdf(xs, mu_own, var_own)
        log_p = _gaussian_logpdf(xs, mu_v, var_v)
        log_q = _gaussian_logpdf(xs, mu_t, var_t)
        log_m = np.logaddexp(log_p, log_q) - np.log(2.0)
        return (log_own - log_m).mean()

    return float(0.5 * kl_to_mixture(xs_p, mu_v, var_v) + 0.5 * kl_to_mixture(xs_q, mu_t, var_t))


def pcme_match_prob(
    zv: GaussianEmbedding,
    zt: GaussianEmbedding,
    cfg: McConfig,
    a: float,
    b: float,
) -> float:
    """Sampled matching probability (1/J^2) sum_ij sigmoid(-a*||zv_i - zt_j|| + b).

    Samples come from the reparameterization z = mu + sigma * eps. Note the
    norm inside the sigmoid is not squared. Returns a value in (0, 1).
    """
    mu_v, var_v, mu_t, var_t = _pair(zv, zt)
    rng = np.random.default_rng(cfg.seed)
    j = cfg.num_samples
    zv_s = mu_v + np.sqrt(var_v) * rng.standard_normal((j, mu_v.shape[0]))
    zt_s = mu_t + np.sqrt(var_t) * rng.standard_normal((j, mu_t.shape[0]))
    total = _kernels.pcme_accum(zv_s, zt_s, float(a), float(b))
    return float(total) / (j * j)


# ---------------------------------------------------------------------------
# batched form

def _csd_matrix(mu_q, var_q, mu_g, var_g):
    sq_q = (mu_q ** 2).sum(axis=1)
    sq_g = (mu_g ** 2).sum(axis=1)
    mu_term = sq_q[:, None] + sq_g[None, :] - 2.0 * mu_q @ mu_g.T
    return mu_term + var_q.sum(axis=1)[:, None] + var_g.sum(axis=1)[None, :]


def _w2_matrix(mu_q, var_q, mu_g, var_g):
    sd_q = np.sqrt(var_q)
    sd_g = np.sqrt(var_g)
    mu_term = (
        (mu_q ** 2).sum(axis=1)[:, None]
        + (mu_g ** 2).sum(axis=1)[None, :]
        - 2.0 * mu_q @ mu_g.T
    )
    sd_term = (
        (sd_q ** 2).sum(axis=1)[:, None]
        + (sd_g ** 2).sum(axis=1)[None, :]
        - 2.0 * sd_q @ sd_g.T
    )
    return mu_term + sd_term


def _kl_matrix(mu_q, var_q, mu_g, var_g):
    inv_g = 1.0 / var_g
    log_term = np.log(var_g).sum(axis=1)[None, :] - np.log(var_q).sum(axis=1)[:, None]
    trace_term = var_q @ inv_g.T
    quad_term = (
        (mu_q ** 2) @ inv_g.T
        - 2.0 * mu_q @ (mu_g * inv_g).T
        + ((mu_g ** 2) * inv_g).sum(axis=1)[None, :]
    )
    d = mu_q.shape[1]
    return 0.5 * (log_term + trace_term + quad_term - d)


def _euclidean_matrix(mu_q, mu_g):
    sq = (
        (mu_q ** 2).sum(axis=1)[:, None]
        + (mu_g ** 2).sum(axis=1)[None, :]
        - 2.0 * mu_q @ mu_g.T
    )
    return np.sqrt(np.maximum(sq, 0.0))


def pairwise_distance_matrix(
    queries: EmbeddingSet,
    gallery: EmbeddingSet,
    kind: DistanceKind,
    cfg: McConfig | None = None,
    a: float | None = None,
    b: float | None = None,
) -> np.ndarray:
    """(N, M) matrix whose entry (i, j) is the scalar kind applied to (queries[i], gallery[j]).

    MC kinds require cfg; each row draws from a generator seeded by
    (cfg.seed, row index) so results do not depend on evaluation order.
    The matching-probability kind additionally requires (a, b).
    """
    if queries.dim != gallery.dim:
        raise DimensionMismatch(f"dimension mismatch: {queries.dim} vs {gallery.dim}")
    mu_q = queries.mu
    mu_g = gallery.mu
    var_q = np.exp(queries.log_var)
    var_g = np.exp(gallery.log_var)

    if kind is DistanceKind.CSD:
        return _csd_matrix(mu_q, var_q, mu_g, var_g)
    if kind is DistanceKind.WASSERSTEIN2:
        return _w2_matrix(mu_q, var_q, mu_g, var_g)
    if kind is DistanceKind.EUCLIDEAN_MU_ONLY:
        return _euclidean_matrix(mu_q, mu_g)
    if kind is DistanceKind.KL:
        _check_floor(var_q, var_g)
        return _kl_matrix(mu_q, var_q, mu_g, var_g)
    if kind is DistanceKind.BHATTACHARYYA:
        _check_floor(var_q, var_g)
        return np.asarray(_kernels.bhattacharyya_matrix(mu_q, var_q, mu_g, var_g))
    if kind is DistanceKind.ELK:
        _check_floor(var_q, var_g)
        return np.asarray(_kernels.elk_matrix(mu_q, var_q, mu_g, var_g))

    if cfg is None:
        raise BadConfig(f"{kind.value} requires an McConfig")
    out = np.empty((len(queries), len(gallery)), dtype=np.float64)
    if kind is DistanceKind.JS_MC:
        for i in range(len(queries)):
            row_cfg = McConfig(cfg.num_samples, _row_seed(cfg.seed, i))
            q = queries[i]
            for jdx in range(len(gallery)):
                out[i, jdx] = js_mc(q, gallery[jdx], row_cfg)
        return out
    if kind is DistanceKind.PCME_MATCH_PROB_MC:
        if a is None or b is None:
            raise BadConfig("pcme_match_prob_mc requires scalars a and b")
        for i in range(len(queries)):
            row_cfg = McConfig(cfg.num_samples, _row_seed(cfg.seed, i))
            q = queries[i]
            for jdx in range(len(gallery)):
                out[i, jdx] = pcme_match_prob(q, gallery[jdx], row_cfg, a, b)
        return out
    raise BadConfig(f"unhandled distance kind {kind}")


def _row_seed(seed: int, row: int) -> int:
    # stable per-row derivation; SeedSequence hashes the pair
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(row,)).generate_state(1)[0])


def distance(
    kind: DistanceKind,
    zv: GaussianEmbedding,
    zt: GaussianEmbedding,
    cfg: McConfig | None = None,
    a: float | None = None,
    b: float | None = None,
) -> float:
    """Scalar dispatch over DistanceKind."""
    if kind is DistanceKind.CSD:
        return csd(zv, zt)
    if kind is DistanceKind.WASSERSTEIN2:
        return wasserstein2_sq(zv, zt)
    if kind is DistanceKind.KL:
        return kl_gaussian(zv, zt)
    if kind is DistanceKind.BHATTACHARYYA:
        return bhattacharyya(zv, zt)
    if kind is DistanceKind.ELK:
        return elk_neglog(zv, zt)
    if kind is DistanceKind.EUCLIDEAN_MU_ONLY:
        return euclidean_mu_only(zv, zt)
    if kind is DistanceKind.JS_MC:
        if cfg is None:
            raise BadConfig("js_mc requires an McConfig")
        return js_mc(zv, zt, cfg)
    if kind is DistanceKind.PCME_MATCH_PROB_MC:
        if cfg is None or a is None or b is None:
            raise BadConfig("pcme_match_prob_mc requires an McConfig and scalars a, b")
        return pcme_match_prob(zv, zt, cfg, a, b)
    raise BadConfig(f"unhandled distance kind {kind}")
