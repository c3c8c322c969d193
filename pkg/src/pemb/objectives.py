"""Training objectives and their analytic gradients.

The matching loss is a binary cross entropy on the logit (-a*d + b): pairs
with smooth label m in [0, 1] contribute

    -m * log s(-a*d + b) - (1 - m) * log s(a*d - b)

with learnable scalars a > 0 and b. On top of it sit the pseudo-positive
relabeling loss (gallery items at least as close as the ground-truth positive
inherit its label value) and the variational information bottleneck
regularizer toward N(0, I):

    total = match + alpha * pp + beta * vib

Gradients with respect to every mu, log sigma^2, a and b are computed
analytically for each closed-form distance kind; the pseudo-positive mask is
recomputed from current distances but held constant under differentiation.
Triplet (hardest-negative / sum) and a symmetric InfoNCE are provided as
baselines, plus the smooth-label mixing helper.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import (
    BadConfig,
    EmbeddingSet,
    EmptyBatch,
    MatchTable,
    NoNegative,
    NonFiniteValue,
    OutOfRange,
    ShapeMismatch,
)
from .distances import DistanceKind


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z: np.ndarray) -> np.ndarray:
    # log(1 + e^z) without overflow
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


@dataclass(frozen=True)
class ObjectiveParams:
    """Scalars steering the total objective; defaults follow the reference setup."""

    a: float = 5.0
    b: float = 5.0
    alpha: float = 0.1
    beta: float = 1e-4
    distance: DistanceKind = DistanceKind.CSD

    def __post_init__(self):
        if not self.a > 0:
            raise OutOfRange(f"a must be > 0, got {self.a}")
        if self.alpha < 0:
            raise OutOfRange(f"alpha must be >= 0, got {self.alpha}")
        if self.beta < 0:
            raise OutOfRange(f"beta must be >= 0, got {self.beta}")


@dataclass(frozen=True)
class LossReport:
    match_loss: float
    pp_loss: float
    vib_loss: float
    total: float
    num_pseudo_positives: int


@dataclass(frozen=True)
class GradientBundle:
    d_mu_v: np.ndarray
    d_logvar_v: np.ndarray
    d_mu_t: np.ndarray
    d_logvar_t: np.ndarray
    d_a: float
    d_b: float


def _check_matrix_pair(dist_matrix, labels):
    d = np.asarray(dist_matrix, dtype=np.float64)
    m = np.asarray(labels, dtype=np.float64)
    if d.ndim != 2:
        raise ShapeMismatch(f"distance matrix must be 2-D, got shape {d.shape}")
    if m.shape != d.shape:
        raise ShapeMismatch(f"labels shape {m.shape} != distances shape {d.shape}")
    if not np.isfinite(d).all():
        raise NonFiniteValue("distance matrix contains non-finite entries")
    if m.min() < 0.0 or m.max() > 1.0:
        raise OutOfRange("labels must lie in [0, 1]")
    return d, m


def match_loss(dist_matrix, labels, a: float, b: float) -> float:
    """Mean BCE over all pairs with match probability modeled as s(-a*d + b)."""
    d, m = _check_matrix_pair(dist_matrix, labels)
    z = a * d - b
    return float((m * _softplus(z) + (1.0 - m) * _softplus(-z)).mean())


def find_pseudo_positives(dist_matrix, labels) -> np.ndarray:
    """Boolean matrix marking columns at least as close as each row's anchor positive.

    The anchor is the column with the maximum label value (ties: lowest
    index); the mark uses d <= d_anchor, so the anchor itself and exact ties
    are included. Rows whose maximum label is 0 have no positives and produce
    an all-False row.
    """
    d, m = _check_matrix_pair(dist_matrix, labels)
    out = np.zeros(d.shape, dtype=bool)
    if d.shape[1] == 0:
        return out
    anchors = np.argmax(m, axis=1)
    has_positive = m.max(axis=1) > 0.0
    anchor_d = d[np.arange(d.shape[0]), anchors]
    out[has_positive] = d[has_positive] <= anchor_d[has_positive, None]
    return out


def _pp_labels(dist_matrix, labels):
    """Labels with pseudo-positive positions overwritten by the row's max label value."""
    d, m = _check_matrix_pair(dist_matrix, labels)
    mask = find_pseudo_positives(d, m)
    out = m.copy()
    rows = np.where(m.max(axis=1) > 0.0)[0]
    for i in rows:
        out[i, mask[i]] = m[i].max()
    return out, mask


def vib_loss(batch) -> float:
    """Mean KL regularizer toward N(0, I): -0.5 * (1 + log var - mu^2 - var), averaged."""
    if isinstance(batch, EmbeddingSet):
        mu, log_var = batch.mu, batch.log_var
    else:
        mu, log_var = batch
        mu = np.asarray(mu, dtype=np.float64)
        log_var = np.asarray(log_var, dtype=np.float64)
    if mu.size == 0:
        raise EmptyBatch("vib_loss requires a nonempty batch")
    var = np.exp(log_var)
    return float((-0.5 * (1.0 + log_var - mu ** 2 - var)).mean())


# ---------------------------------------------------------------------------
# distance forward/backward in batch form
#
# backprop contracts: given G[i, j] = dL/dD[i, j], return the gradients with
# respect to mu and log_var of both sides. Everything that decomposes into
# row/column terms uses BLAS; the coupled kinds fall back to kernels.

def _forward(kind, mu_v, var_v, mu_t, var_t):
    if kind is DistanceKind.CSD:
        mu_term = (
            (mu_v ** 2).sum(axis=1)[:, None]
            + (mu_t ** 2).sum(axis=1)[None, :]
            - 2.0 * mu_v @ mu_t.T
        )
        return mu_term + var_v.sum(axis=1)[:, None] + var_t.sum(axis=1)[None, :]
    if kind is DistanceKind.WASSERSTEIN2:
        sd_v, sd_t = np.sqrt(var_v), np.sqrt(var_t)
        mu_term = (
            (mu_v ** 2).sum(axis=1)[:, None]
            + (mu_t ** 2).sum(axis=1)[None, :]
            - 2.0 * mu_v @ mu_t.T
        )
        sd_term = (
            var_v.sum(axis=1)[:, None] + var_t.sum(axis=1)[None, :] - 2.0 * sd_v @ sd_t.T
        )
        return mu_term + sd_term
    if kind is DistanceKind.KL:
        inv_t = 1.0 / var_t
        log_term = np.log(var_t).sum(axis=1)[None, :] - np.log(var_v).sum(axis=1)[:, None]
        trace_term = var_v @ inv_t.T
        quad_term = (
            (mu_v ** 2) @ inv_t.T
            - 2.0 * mu_v @ (mu_t * inv_t).T
            + ((mu_t ** 2) * inv_t).sum(axis=1)[None, :]
        )
        return 0.5 * (log_term + trace_term + quad_term - mu_v.shape[1])
    if kind is DistanceKind.BHATTACHARYYA:
        return np.asarray(_kernels.bhattacharyya_matrix(mu_v, var_v, mu_t, var_t))
    if kind is DistanceKind.ELK:
        return np.asarray(_kernels.elk_matrix(mu_v, var_v, mu_t, var_t))
    if kind is DistanceKind.EUCLIDEAN_MU_ONLY:
        sq = (
            (mu_v ** 2).sum(axis=1)[:, None]
            + (mu_t ** 2).sum(axis=1)[None, :]
            - 2.0 * mu_v @ mu_t.T
        )
        return np.sqrt(np.maximum(sq, 0.0))
    raise BadConfig(f"no closed-form gradients for distance kind {kind.value}")


def _backward(kind, mu_v, var_v, mu_t, var_t, dist, grad):
    row = grad.sum(axis=1)[:, None]
    col = grad.sum(axis=0)[:, None]
    if kind is DistanceKind.CSD:
        d_mu_v = 2.0 * (row * mu_v - grad @ mu_t)
        d_mu_t = 2.0 * (col * mu_t - grad.T @ mu_v)
        return d_mu_v, row * var_v, d_mu_t, col * var_t
    if kind is DistanceKind.WASSERSTEIN2:
        sd_v, sd_t = np.sqrt(var_v), np.sqrt(var_t)
        d_mu_v = 2.0 * (row * mu_v - grad @ mu_t)
        d_mu_t = 2.0 * (col * mu_t - grad.T @ mu_v)
        d_lv_v = row * var_v - sd_v * (grad @ sd_t)
        d_lv_t = col * var_t - sd_t * (grad.T @ sd_v)
        return d_mu_v, d_lv_v, d_mu_t, d_lv_t
    if kind is DistanceKind.KL:
        inv_t = 1.0 / var_t
        g_inv = grad @ inv_t
        d_mu_v = mu_v * g_inv - grad @ (mu_t * inv_t)
        d_lv_v = 0.5 * (var_v * g_inv - row)
        d_mu_t = inv_t * (mu_t * col - grad.T @ mu_v)
        quad_col = (
            grad.T @ (var_v + mu_v ** 2)
            - 2.0 * mu_t * (grad.T @ mu_v)
            + (mu_t ** 2) * col
        )
        d_lv_t = 0.5 * (col - inv_t * quad_col)
        return d_mu_v, d_lv_v, d_mu_t, d_lv_t
    if kind is DistanceKind.BHATTACHARYYA:
        return _kernels.bhattacharyya_backprop(mu_v, var_v, mu_t, var_t, grad)
    if kind is DistanceKind.ELK:
        return _kernels.elk_backprop(mu_v, var_v, mu_t, var_t, grad)
    if kind is DistanceKind.EUCLIDEAN_MU_ONLY:
        safe = np.maximum(dist, 1e-30)
        w = grad / safe
        d_mu_v = w.sum(axis=1)[:, None] * mu_v - w @ mu_t
        d_mu_t = w.sum(axis=0)[:, None] * mu_t - w.T @ mu_v
        zeros_v = np.zeros_like(var_v)
        zeros_t = np.zeros_like(var_t)
        return d_mu_v, zeros_v, d_mu_t, zeros_t
    raise BadConfig(f"no closed-form gradients for distance kind {kind.value}")


def total_objective(
    visual: EmbeddingSet,
    textual: EmbeddingSet,
    labels,
    params: ObjectiveParams,
    frozen_pp_labels: np.ndarray | None = None,
) -> tuple[LossReport, GradientBundle]:
    """Full training objective with analytic gradients.

    labels may be a dense (N, M) array in [0, 1] or a MatchTable covering the
    two sets' ids. frozen_pp_labels bypasses the pseudo-positive relabeling
    with a fixed label matrix; gradient checkers use it to hold the mask
    constant while probing parameters.

    Trainers stepping params.a with GradientBundle.d_a should clamp a at
    1e-6 after each update; the loss itself never enforces positivity.
    """
    if not params.distance.has_closed_form:
        raise BadConfig(
            f"total_objective needs a closed-form distance, got {params.distance.value}"
        )
    if len(visual) == 0 or len(textual) == 0:
        raise EmptyBatch("both batches must be nonempty")
    if isinstance(labels, MatchTable):
        labels = labels.dense(visual.ids, textual.ids)
    m = np.asarray(labels, dtype=np.float64)
    if m.shape != (len(visual), len(textual)):
        raise ShapeMismatch(
            f"labels shape {m.shape} != ({len(visual)}, {len(textual)})"
        )

    mu_v, lv_v = visual.mu, visual.log_var
    mu_t, lv_t = textual.mu, textual.log_var
    var_v, var_t = np.exp(lv_v), np.exp(lv_t)
    n, mm = m.shape
    a, b = params.a, params.b

    dist = _forward(params.distance, mu_v, var_v, mu_t, var_t)
    z = a * dist - b
    sz = _sigmoid(z)

    loss_match = float((m * _softplus(z) + (1.0 - m) * _softplus(-z)).mean())

    if frozen_pp_labels is not None:
        m_pp = np.asarray(frozen_pp_labels, dtype=np.float64)
        if m_pp.shape != m.shape:
            raise ShapeMismatch("frozen_pp_labels shape mismatch")
        num_pp = int(find_pseudo_positives(dist, m).sum())
    else:
        m_pp, mask = _pp_labels(dist, m)
        num_pp = int(mask.sum())
    loss_pp = float((m_pp * _softplus(z) + (1.0 - m_pp) * _softplus(-z)).mean())

    loss_vib = vib_loss((mu_v, lv_v)) + vib_loss((mu_t, lv_t))
    total = loss_match + params.alpha * loss_pp + params.beta * loss_vib

    # dL/dz for a BCE with target m is s(z) - (1 - m); combine both BCE terms
    # before the single chain through the distance matrix
    r_match = sz - (1.0 - m)
    r_pp = sz - (1.0 - m_pp)
    r = (r_match + params.alpha * r_pp) / (n * mm)
    g_dist = a * r

    d_mu_v, d_lv_v, d_mu_t, d_lv_t = _backward(
        params.distance, mu_v, var_v, mu_t, var_t, dist, g_dist
    )
    d_a = float((r * dist).sum())
    d_b = float(-r.sum())

    # VIB: mean over each batch of -0.5 * (1 + log var - mu^2 - var)
    d_mu_v = d_mu_v + params.beta * mu_v / mu_v.size
    d_lv_v = d_lv_v + params.beta * 0.5 * (var_v - 1.0) / lv_v.size
    d_mu_t = d_mu_t + params.beta * mu_t / mu_t.size
    d_lv_t = d_lv_t + params.beta * 0.5 * (var_t - 1.0) / lv_t.size

    report = LossReport(
        match_loss=loss_match,
        pp_loss=loss_pp,
        vib_loss=loss_vib,
        total=total,
        num_pseudo_positives=num_pp,
    )
    grads = GradientBundle(
        d_mu_v=d_mu_v,
        d_logvar_v=d_lv_v,
        d_mu_t=d_mu_t,
        d_logvar_t=d_lv_t,
        d_a=d_a,
        d_b=d_b,
    )
    return report, grads


# ---------------------------------------------------------------------------
# baselines

def triplet_loss(dist_matrix, labels, margin: float = 0.2, mode: str = "hardest_negative") -> float:
    """Row-anchored triplet hinge loss.

    Rows are anchors; labels >= 0.5 mark positive columns. hardest_negative
    compares each positive against the row's closest negative (mean over
    positive pairs); sum enumerates every (positive, negative) pair (mean
    over triples). Rows with no positive contribute nothing; a row with
    positives but no negative raises NoNegative.
    """
    if margin <= 0:
        raise OutOfRange(f"margin must be > 0, got {margin}")
    if mode not in ("hardest_negative", "sum"):
        raise BadConfig(f"unknown triplet mode {mode!r}")
    d, m = _check_matrix_pair(dist_matrix, labels)
    pos = m >= 0.5
    total = 0.0
    count = 0
    for i in range(d.shape[0]):
        p = np.where(pos[i])[0]
        if p.size == 0:
            continue
        ng = np.where(~pos[i])[0]
        if ng.size == 0:
            raise NoNegative(f"row {i} has positives but no negative column")
        if mode == "hardest_negative":
            hardest = d[i, ng].min()
            total += np.maximum(0.0, d[i, p] - hardest + margin).sum()
            count += p.size
        else:
            hinge = d[i, p][:, None] - d[i, ng][None, :] + margin
            total += np.maximum(0.0, hinge).sum()
            count += p.size * ng.size
    return float(total / count) if count else 0.0


def infonce_loss(dist_matrix, labels, temperature: float = 1.0) -> float:
    """Symmetric cross entropy over softmaxed negated distances.

    Requires exactly one positive per row and per column (the standard
    batch-contrastive setup); averaged over both directions.
    """
    if temperature <= 0:
        raise OutOfRange(f"temperature must be > 0, got {temperature}")
    d, m = _check_matrix_pair(dist_matrix, labels)
    pos = m >= 0.5
    if not (pos.sum(axis=1) == 1).all() or not (pos.sum(axis=0) == 1).all():
        raise ShapeMismatch("infonce needs exactly one positive per row and per column")
    logits = -d / temperature

    def direction(lg, p):
        lse = np.log(np.exp(lg - lg.max(axis=1, keepdims=True)).sum(axis=1)) + lg.max(axis=1)
        pos_logit = lg[p]
        return float((lse - pos_logit).mean())

    rows = direction(logits, (np.arange(d.shape[0]), np.argmax(pos, axis=1)))
    cols = direction(logits.T, (np.arange(d.shape[1]), np.argmax(pos, axis=0)))
    return 0.5 * (rows + cols)


def mix_labels(lam: float, first, second) -> np.ndarray:
    """Smooth labels for a mixed sample: lam toward first source, (1 - lam) toward second."""
    if not (0.0 <= lam <= 1.0):
        raise OutOfRange(f"lambda must lie in [0, 1], got {lam}")
    a = np.asarray(first, dtype=np.float64)
    b = np.asarray(second, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"label shapes differ: {a.shape} vs {b.shape}")
    return lam * a + (1.0 - lam) * b
