"""Synthetic 2-D benchmark: direct optimization of per-point (mu, log sigma^2).

Three Gaussian clusters, 500 points each; 150 points per class additionally
carry the next class's label (the "confusing" points whose supervision is
contradictory). Each point's distribution parameters are free variables
updated by Adam under the pairwise matching loss. Distances that price
uncertainty separately (csd) should leave confusing points with visibly
larger variance than certain ones; the Wasserstein-2 objective should not
separate the groups. Triplet baselines run on mu only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import BadConfig, OutOfRange
from .objectives import _sigmoid, _softplus, mix_labels
from .optim import AdamState, adam_step
from .distances import DistanceKind

_OBJECTIVES = ("csd", "wasserstein2", "triplet_hnm", "triplet_sum")

# fixed logistic calibration for the toy: learning (a, b) here lets a collapse
# toward zero on the unsatisfiable pairs, which un-saturates every pair and
# floods sigma with gradient noise; the probe needs the saturation behavior
_TOY_A = 5.0
_TOY_B = 5.0


@dataclass(frozen=True)
class MixConfig:
    mix_ratio: float = 0.25
    beta_param: float = 2.0

    def __post_init__(self):
        if not (0.0 <= self.mix_ratio <= 1.0):
            raise OutOfRange(f"mix_ratio must lie in [0, 1], got {self.mix_ratio}")
        if self.beta_param <= 0:
            raise OutOfRange(f"beta_param must be > 0, got {self.beta_param}")


@dataclass(frozen=True)
class ToyConfig:
    num_classes: int = 3
    samples_per_class: int = 500
    confusing_per_pair: int = 150
    centroid_noise_scale: float = 0.1
    log_sigma_range: tuple[float, float] = (-1.5, 1.5)
    epochs: int = 500
    batch_size: int = 128
    lr: float = 0.02
    seed: int = 0
    objective: str = "csd"
    mix: Optional[MixConfig] = None
    margin: float = 0.2

    def __post_init__(self):
        if self.objective not in _OBJECTIVES:
            raise BadConfig(f"objective must be one of {_OBJECTIVES}, got {self.objective!r}")
        if self.num_classes < 2:
            raise OutOfRange("need at least 2 classes for the confusion structure")
        if min(self.samples_per_class, self.epochs, self.batch_size) < 1:
            raise OutOfRange("counts must be positive")
        if not (0 < self.confusing_per_pair <= self.samples_per_class):
            raise OutOfRange("confusing_per_pair must lie in (0, samples_per_class]")
        if self.lr <= 0:
            raise OutOfRange(f"lr must be > 0, got {self.lr}")
        if self.log_sigma_range[0] > self.log_sigma_range[1]:
            raise OutOfRange("log_sigma_range must be (low, high)")


@dataclass(frozen=True)
class ToyDataset:
    mu: np.ndarray             # (N, 2) initial coordinates
    log_var: np.ndarray        # (N, 2) initial log variances
    label_primary: np.ndarray  # (N,) class the point was drawn from
    label_second: np.ndarray   # (N,) second class of confusing points, -1 otherwise
    is_confusing: np.ndarray   # (N,) bool
    centroids: np.ndarray      # (C, 2)

    @property
    def num_points(self) -> int:
        return self.mu.shape[0]

    def draw_labels(self, rng: np.random.Generator) -> np.ndarray:
        """One concrete labeling: confusing points flip a fair coin between their
        two classes, so the same pair sees contradictory supervision across draws."""
        labels = self.label_primary.copy()
        flip = self.is_confusing & (rng.random(self.num_points) < 0.5)
        labels[flip] = self.label_second[flip]
        return labels


@dataclass(frozen=True)
class ToyReport:
    mean_var_certain: float
    mean_var_uncertain: float
    ratio: float
    final_loss: float
    snapshot_mu: np.ndarray
    snapshot_var: np.ndarray

    def to_dict(self) -> dict:
        return {
            "mean_var_certain": self.mean_var_certain,
            "mean_var_uncertain": self.mean_var_uncertain,
            "ratio": self.ratio,
            "final_loss": self.final_loss,
        }


def _sample_centroids(rng: np.random.Generator, count: int, min_dist: float = 0.5) -> np.ndarray:
    # rejection sampling keeps clusters visually separable
    while True:
        cand = rng.uniform(-1.0, 1.0, size=(count, 2))
        ok = True
        for i in range(count):
            for j in range(i + 1, count):
                if np.linalg.norm(cand[i] - cand[j]) < min_dist:
                    ok = False
        if ok:
            return cand


def generate_toy(cfg: ToyConfig) -> ToyDataset:
    """Deterministic dataset per cfg.seed; confusing points pair class c with class (c+1) mod C."""
    rng = np.random.default_rng(cfg.seed)
    c = cfg.num_classes
    n = c * cfg.samples_per_class
    centroids = _sample_centroids(rng, c)

    mu = np.empty((n, 2), dtype=np.float64)
    label_primary = np.repeat(np.arange(c), cfg.samples_per_class)
    label_second = np.full(n, -1, dtype=np.int64)
    is_confusing = np.zeros(n, dtype=bool)
    for cls in range(c):
        lo = cls * cfg.samples_per_class
        hi = lo + cfg.samples_per_class
        mu[lo:hi] = centroids[cls] + cfg.centroid_noise_scale * rng.standard_normal(
            (cfg.samples_per_class, 2)
        )
        chosen = rng.choice(cfg.samples_per_class, size=cfg.confusing_per_pair, replace=False)
        label_second[lo + chosen] = (cls + 1) % c
        is_confusing[lo + chosen] = True

    # spread is drawn as log sigma; the stored field is log sigma^2
    log_sigma = rng.uniform(cfg.log_sigma_range[0], cfg.log_sigma_range[1], size=(n, 2))
    log_var = 2.0 * log_sigma
    return ToyDataset(
        mu=mu,
        log_var=log_var,
        label_primary=label_primary,
        label_second=label_second,
        is_confusing=is_confusing,
        centroids=centroids,
    )


def _toy_forward(kind, mu, sig):
    """Square distance matrix of a batch against itself, in (mu, sigma) variables."""
    mu_sq = (mu * mu).sum(axis=1)
    d = mu_sq[:, None] + mu_sq[None, :] - 2.0 * mu @ mu.T
    if kind is DistanceKind.CSD:
        s_sq = (sig * sig).sum(axis=1)
        return d + s_sq[:, None] + s_sq[None, :]
    s_sq = (sig * sig).sum(axis=1)
    return d + s_sq[:, None] + s_sq[None, :] - 2.0 * sig @ sig.T


def _toy_backward(kind, mu, sig, g):
    """Accumulate dL/dmu and dL/dsigma from the pair-weight matrix g = dL/dD."""
    w = g + g.T
    row = w.sum(axis=1)[:, None]
    d_mu = 2.0 * (row * mu - w @ mu)
    if kind is DistanceKind.CSD:
        d_sig = 2.0 * row * sig
    else:
        d_sig = 2.0 * (row * sig - w @ sig)
    return d_mu, d_sig


def _pair_objective_step(kind, mu_b, sig_b, labels_b, a, b, mix_cfg, rng):
    """Loss and gradients for one batch under the pairwise matching loss.

    Every unordered pair of distinct in-batch points is scored exactly once.
    With mixing enabled, a fraction of points is replaced by convex blends of
    themselves and a random partner (in both mu and sigma), labels mix
    bilinearly, and gradients flow through the blend to both sources.
    """
    bsz = mu_b.shape[0]
    labels = (labels_b[:, None] == labels_b[None, :]).astype(np.float64)

    blend = None
    if mix_cfg is not None and mix_cfg.mix_ratio > 0.0:
        k = int(round(mix_cfg.mix_ratio * bsz))
        if k > 0:
            picked = rng.choice(bsz, size=k, replace=False)
            partners = rng.integers(0, bsz, size=k)
            lams = rng.beta(mix_cfg.beta_param, mix_cfg.beta_param, size=k)
            blend = np.eye(bsz)
            for idx, p, lam in zip(picked, partners, lams):
                blend[idx] = 0.0
                blend[idx, idx] = lam
                blend[idx, p] += 1.0 - lam
                labels[idx] = mix_labels(lam, labels[idx], labels[p])
            # the mixed rows changed, so their columns must mix the same way
            labels[:, picked] = np.stack(
                [
                    mix_labels(lam, labels[:, idx], labels[:, p])
                    for idx, p, lam in zip(picked, partners, lams)
                ],
                axis=1,
            )

    if blend is not None:
        mu_use = blend @ mu_b
        sig_use = blend @ sig_b
    else:
        mu_use, sig_use = mu_b, sig_b

    dist = _toy_forward(kind, mu_use, sig_use)
    mask = np.triu(np.ones((bsz, bsz)), k=1)
    num_pairs = bsz * (bsz - 1) // 2
    z = a * dist - b
    loss = float(
        ((labels * _softplus(z) + (1.0 - labels) * _softplus(-z)) * mask).sum() / num_pairs
    )

    r = (_sigmoid(z) - (1.0 - labels)) * mask / num_pairs
    g = a * r
    d_mu_use, d_sig_use = _toy_backward(kind, mu_use, sig_use, g)
    if blend is not None:
        d_mu = blend.T @ d_mu_use
        d_sig = blend.T @ d_sig_use
    else:
        d_mu, d_sig = d_mu_use, d_sig_use
    d_a = float((r * dist).sum())
    d_b = float(-r.sum())
    return loss, d_mu, d_sig, d_a, d_b


def _triplet_step(mu_b, labels_b, margin, hardest):
    """Triplet hinge on mu-only Euclidean distances; rows anchor, self-pairs excluded."""
    bsz = mu_b.shape[0]
    sq = (
        (mu_b ** 2).sum(axis=1)[:, None]
        + (mu_b ** 2).sum(axis=1)[None, :]
        - 2.0 * mu_b @ mu_b.T
    )
    dist = np.sqrt(np.maximum(sq, 0.0))
    same = labels_b[:, None] == labels_b[None, :]
    pos = same.copy()
    np.fill_diagonal(pos, False)
    neg = ~same

    g = np.zeros_like(dist)
    total = 0.0
    count = 0
    for i in range(bsz):
        p = np.where(pos[i])[0]
        if p.size == 0:
            continue
        ng = np.where(neg[i])[0]
        if ng.size == 0:
            from .core import NoNegative
            raise NoNegative(f"batch row {i} has positives but no negative")
        if hardest:
            hn = ng[np.argmin(dist[i, ng])]
            hinge = dist[i, p] - dist[i, hn] + margin
            active = hinge > 0
            total += hinge[active].sum()
            count += p.size
            g[i, p[active]] += 1.0
            g[i, hn] -= float(active.sum())
        else:
            hinge = dist[i, p][:, None] - dist[i, ng][None, :] + margin
            active = hinge > 0
            total += hinge[active].sum()
            count += p.size * ng.size
            g[i, p] += active.sum(axis=1)
            g[i, ng] -= active.sum(axis=0)
    if count == 0:
        return 0.0, np.zeros_like(mu_b)
    g /= count
    loss = total / count

    w = g + g.T
    safe = np.where(dist > 0, dist, 1.0)
    ratio = w / safe
    d_mu = ratio.sum(axis=1)[:, None] * mu_b - ratio @ mu_b
    return float(loss), d_mu


def run_toy(
    cfg: ToyConfig,
    snapshot_path: str | None = None,
    snapshot_every: int = 0,
) -> ToyReport:
    """Optimize the toy dataset under cfg.objective and report variance statistics.

    snapshot_path, when given, receives CSV rows (epoch, index, mu, var,
    confusing flag) every snapshot_every epochs plus the final epoch.
    """
    data = generate_toy(cfg)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1,)))
    n = data.num_points
    mu = data.mu.copy()
    # the optimizer walks sigma itself; additive steps keep the group statistics
    # free of the upward drift a log-parameterization picks up under Adam
    sigma = np.exp(0.5 * data.log_var)

    is_pairwise = cfg.objective in ("csd", "wasserstein2")
    kind = DistanceKind.CSD if cfg.objective == "csd" else DistanceKind.WASSERSTEIN2
    if is_pairwise:
        params = np.concatenate([mu.ravel(), sigma.ravel()])
    else:
        params = mu.ravel().copy()
    state = AdamState.init(params.shape[0], lr=cfg.lr)

    writer = None
    fh = None
    if snapshot_path is not None:
        fh = open(snapshot_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "index", "mu_x", "mu_y", "var_x", "var_y", "confusing"])

    def write_snapshot(epoch, mu_now, var_now):
        for i in range(n):
            writer.writerow(
                [
                    epoch,
                    i,
                    repr(float(mu_now[i, 0])),
                    repr(float(mu_now[i, 1])),
                    repr(float(var_now[i, 0])),
                    repr(float(var_now[i, 1])),
                    int(data.is_confusing[i]),
                ]
            )

    final_loss = 0.0
    try:
        for epoch in range(cfg.epochs):
            # fresh label draw each epoch: this is what makes a confusing point's
            # supervision contradictory instead of merely multi-class
            labels_now = data.draw_labels(rng)
            order = rng.permutation(n)
            epoch_losses = []
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                if idx.size < 2:
                    continue
                if is_pairwise:
                    mu_flat = params[: 2 * n].reshape(n, 2)
                    sig_flat = params[2 * n:].reshape(n, 2)
                    loss, d_mu_b, d_sig_b, _, _ = _pair_objective_step(
                        kind, mu_flat[idx], sig_flat[idx], labels_now[idx],
                        _TOY_A, _TOY_B, cfg.mix, rng,
                    )
                    grads = np.zeros_like(params)
                    gm = grads[: 2 * n].reshape(n, 2)
                    gs = grads[2 * n:].reshape(n, 2)
                    gm[idx] = d_mu_b
                    gs[idx] = d_sig_b
                    state, params = adam_step(state, params, grads)
                else:
                    mu_flat = params.reshape(n, 2)
                    loss, d_mu_b = _triplet_step(
                        mu_flat[idx],
                        labels_now[idx],
                        cfg.margin,
                        hardest=(cfg.objective == "triplet_hnm"),
                    )
                    grads = np.zeros_like(params)
                    grads.reshape(n, 2)[idx] = d_mu_b
                    state, params = adam_step(state, params, grads)
                epoch_losses.append(loss)
            final_loss = float(np.mean(epoch_losses)) if epoch_losses else 0.0
            if writer is not None:
                last = epoch == cfg.epochs - 1
                due = snapshot_every > 0 and (epoch + 1) % snapshot_every == 0
                if last or due:
                    if is_pairwise:
                        write_snapshot(
                            epoch,
                            params[: 2 * n].reshape(n, 2),
                            params[2 * n:].reshape(n, 2) ** 2,
                        )
                    else:
                        write_snapshot(epoch, params.reshape(n, 2), sigma ** 2)
    finally:
        if fh is not None:
            fh.close()

    if is_pairwise:
        mu_final = params[: 2 * n].reshape(n, 2)
        var_final = params[2 * n:].reshape(n, 2) ** 2
    else:
        mu_final = params.reshape(n, 2)
        var_final = sigma ** 2

    certain = float(var_final[~data.is_confusing].mean())
    uncertain = float(var_final[data.is_confusing].mean())
    return ToyReport(
        mean_var_certain=certain,
        mean_var_uncertain=uncertain,
        ratio=uncertain / certain,
        final_loss=final_loss,
        snapshot_mu=mu_final,
        snapshot_var=var_final,
    )
