"""Rank-based evaluation, uncertainty-vs-performance profiling, and the
prompt-filtering study harness.

Queries whose truth rows contain no positive at the binarization threshold
cannot be scored; every entry point excludes them and reports how many were
skipped instead of raising.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import (
    BadConfig,
    DegenerateRange,
    EmbeddingSet,
    EmptyClass,
    LengthMismatch,
    MatchTable,
    OutOfRange,
    UnknownId,
)
from .distances import DistanceKind, McConfig, pairwise_distance_matrix
from .retrieval import RankedList

_DEFAULT_KS = (1, 5, 10)


@dataclass(frozen=True)
class QueryDiagnostic:
    query_id: str
    num_positives: int
    first_positive_rank: Optional[int]  # 1-based; None when no positive retrieved
    average_precision_at_r: float
    r_precision: float


@dataclass(frozen=True)
class MetricReport:
    recall_at: Mapping[int, float]
    rsum: float  # 100 * sum of this direction's recalls
    map_at_r: float
    r_precision: float
    num_queries: int
    num_skipped: int
    per_query: tuple[QueryDiagnostic, ...] = field(repr=False, default=())

    def to_dict(self) -> dict:
        return {
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "rsum": self.rsum,
            "map_at_r": self.map_at_r,
            "r_precision": self.r_precision,
            "num_queries": self.num_queries,
            "num_skipped": self.num_skipped,
        }


@dataclass(frozen=True)
class UncertaintyProfile:
    bin_edges: tuple[float, ...]        # num_bins + 1 edges over observed mass range
    bin_mean_recall1: tuple[float, ...]  # NaN marks an empty bin
    bin_counts: tuple[int, ...]
    pearson_rho: float       # per-query mass vs R@1 indicator
    bin_level_rho: float     # non-empty-bin mean mass vs mean R@1
    num_skipped: int

    def to_dict(self) -> dict:
        def clean(x):
            return None if isinstance(x, float) and math.isnan(x) else x

        return {
            "bin_edges": list(self.bin_edges),
            "bin_mean_recall1": [clean(v) for v in self.bin_mean_recall1],
            "bin_counts": list(self.bin_counts),
            "pearson_rho": clean(self.pearson_rho),
            "bin_level_rho": clean(self.bin_level_rho),
            "num_skipped": self.num_skipped,
        }


def _positives_by_query(truth: MatchTable, threshold: float) -> dict[str, set[str]]:
    table: dict[str, set[str]] = {q: set() for q in truth.query_ids}
    for (q, g), v in truth.relevance.items():
        if v >= threshold:
            table[q].add(g)
    return table


def _split_scored(ranked, truth, threshold):
    """Pair each ranked list with its positive set; queries without positives
    are returned separately as the skip count."""
    pos_table = _positives_by_query(truth, threshold)
    scored = []
    skipped = 0
    for rl in ranked:
        pos = pos_table.get(rl.query_id, set())
        if pos:
            scored.append((rl, pos))
        else:
            skipped += 1
    if skipped:
        warnings.warn(
            f"excluded {skipped} queries with no positive at threshold {threshold}",
            RuntimeWarning,
            stacklevel=3,
        )
    return scored, skipped


def recall_at_k(
    ranked: Sequence[RankedList],
    truth: MatchTable,
    k: int,
    threshold: float = 0.5,
) -> float:
    """Fraction of scorable queries with a positive in the top k."""
    if k < 1:
        raise OutOfRange(f"k must be >= 1, got {k}")
    scored, _ = _split_scored(ranked, truth, threshold)
    if not scored:
        return 0.0
    hits = sum(1 for rl, pos in scored if any(g in pos for g in rl.ids[:k]))
    return hits / len(scored)


def _ap_at_r(ids: tuple[str, ...], pos: set[str]) -> float:
    r = len(pos)
    seen = 0
    acc = 0.0
    for rank, g in enumerate(ids, start=1):
        if g in pos:
            seen += 1
            acc += seen / rank
    return acc / r


def map_at_r(ranked: Sequence[RankedList], truth: MatchTable, threshold: float = 0.5) -> float:
    """Mean over queries of the precision summed at each positive's rank, divided
    by the query's positive count R (a positive never retrieved contributes 0)."""
    scored, _ = _split_scored(ranked, truth, threshold)
    if not scored:
        return 0.0
    return sum(_ap_at_r(rl.ids, pos) for rl, pos in scored) / len(scored)


def r_precision(ranked: Sequence[RankedList], truth: MatchTable, threshold: float = 0.5) -> float:
    scored, _ = _split_scored(ranked, truth, threshold)
    if not scored:
        return 0.0
    total = 0.0
    for rl, pos in scored:
        r = len(pos)
        total += sum(1 for g in rl.ids[:r] if g in pos) / r
    return total / len(scored)


def evaluate(
    ranked: Sequence[RankedList],
    truth: MatchTable,
    ks: Sequence[int] = _DEFAULT_KS,
    threshold: float = 0.5,
) -> MetricReport:
    """All rank metrics in one pass over the ranked lists."""
    if not ks or any(k < 1 for k in ks):
        raise OutOfRange("ks must be a non-empty sequence of ints >= 1")
    scored, skipped = _split_scored(ranked, truth, threshold)

    hit_counts = {k: 0 for k in ks}
    diags = []
    ap_total = 0.0
    rp_total = 0.0
    for rl, pos in scored:
        r = len(pos)
        first = None
        for rank, g in enumerate(rl.ids, start=1):
            if g in pos:
                first = rank
                break
        for k in ks:
            if first is not None and first <= k:
                hit_counts[k] += 1
        ap = _ap_at_r(rl.ids, pos)
        rp = sum(1 for g in rl.ids[:r] if g in pos) / r
        ap_total += ap
        rp_total += rp
        diags.append(
            QueryDiagnostic(
                query_id=rl.query_id,
                num_positives=r,
                first_positive_rank=first,
                average_precision_at_r=ap,
                r_precision=rp,
            )
        )

    n = len(scored)
    recalls = {k: (hit_counts[k] / n if n else 0.0) for k in ks}
    return MetricReport(
        recall_at=recalls,
        rsum=100.0 * sum(recalls.values()),
        map_at_r=ap_total / n if n else 0.0,
        r_precision=rp_total / n if n else 0.0,
        num_queries=n,
        num_skipped=skipped,
        per_query=tuple(diags),
    )


def rsum(i2t: MetricReport, t2i: MetricReport) -> float:
    """Combined recall sum over both retrieval directions, in percent points."""
    return i2t.rsum + t2i.rsum


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    # NaN instead of raising when either side is constant
    if x.size < 2:
        return float("nan")
    xd = x - x.mean()
    yd = y - y.mean()
    den = math.sqrt(float((xd * xd).sum()) * float((yd * yd).sum()))
    if den == 0.0:
        return float("nan")
    return float((xd * yd).sum() / den)


def uncertainty_profile(
    queries: EmbeddingSet,
    ranked: Sequence[RankedList],
    truth: MatchTable,
    num_bins: int = 10,
    threshold: float = 0.5,
) -> UncertaintyProfile:
    """Bucket queries by uncertainty mass and relate the mass to R@1.

    Two correlations are reported: pearson_rho over individual queries
    (mass against the 0/1 R@1 indicator) and bin_level_rho over non-empty
    bins (mean mass against mean R@1).
    """
    if num_bins < 1:
        raise OutOfRange(f"num_bins must be >= 1, got {num_bins}")
    scored, skipped = _split_scored(ranked, truth, threshold)
    if len(scored) < num_bins:
        raise OutOfRange(
            f"need at least num_bins={num_bins} scorable queries, have {len(scored)}"
        )

    all_masses = queries.masses()
    masses = np.array(
        [all_masses[queries.index_of(rl.query_id)] for rl, _ in scored]
    )
    hits = np.array(
        [1.0 if (rl.ids[:1] and rl.ids[0] in pos) else 0.0 for rl, pos in scored]
    )

    lo, hi = float(masses.min()), float(masses.max())
    if lo == hi:
        raise DegenerateRange("all query masses are equal; bins are undefined")
    edges = np.linspace(lo, hi, num_bins + 1)
    which = np.clip(np.digitize(masses, edges[1:-1], right=False), 0, num_bins - 1)

    bin_means = []
    bin_counts = []
    bin_mass_means = []
    for b in range(num_bins):
        sel = which == b
        count = int(sel.sum())
        bin_counts.append(count)
        if count:
            bin_means.append(float(hits[sel].mean()))
            bin_mass_means.append(float(masses[sel].mean()))
        else:
            bin_means.append(float("nan"))

    occupied = [m for m in bin_means if not math.isnan(m)]
    return UncertaintyProfile(
        bin_edges=tuple(float(e) for e in edges),
        bin_mean_recall1=tuple(bin_means),
        bin_counts=tuple(bin_counts),
        pearson_rho=_pearson(masses, hits),
        bin_level_rho=_pearson(np.array(bin_mass_means), np.array(occupied)),
        num_skipped=skipped,
    )


def rank_by_distance(
    queries: EmbeddingSet,
    gallery: EmbeddingSet,
    kind: DistanceKind,
    cfg: Optional[McConfig] = None,
    a: float | None = None,
    b: float | None = None,
) -> list[RankedList]:
    """Full ranking of the gallery for every query under any distance kind.

    For similarity kinds (higher is closer) the emitted score is the negated
    similarity so that scores stay ascending; relative order is what the
    metrics consume.
    """
    matrix = pairwise_distance_matrix(queries, gallery, kind, cfg=cfg, a=a, b=b)
    if kind.higher_is_closer:
        matrix = -matrix
    out = []
    for i, qid in enumerate(queries.ids):
        order = np.argsort(matrix[i], kind="stable")
        items = tuple((gallery.ids[j], float(matrix[i, j])) for j in order)
        out.append(RankedList(query_id=qid, items=items))
    return out


# ---------------------------------------------------------------------------
# prompt filtering

_STRATEGIES = ("single", "all", "topk_uniform", "best_topk_per_class")
_UNCERTAINTY = ("sigma_l1", "sigma_sq_l1")
_CLASSIFY = ("mu_cosine", "csd")


@dataclass(frozen=True)
class PromptFilterReport:
    accuracy: float
    chosen_k: Mapping[str, int]
    strategy: str
    classify_by: str
    uncertainty: str
    num_images: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "chosen_k": dict(sorted(self.chosen_k.items())),
            "strategy": self.strategy,
            "classify_by": self.classify_by,
            "uncertainty": self.uncertainty,
            "num_images": self.num_images,
        }


def _prompt_uncertainty(prompts: EmbeddingSet, flavor: str) -> np.ndarray:
    # deterministic prompt sets carry zero uncertainty under either scalar
    if not prompts.has_log_var:
        return np.zeros(len(prompts))
    if flavor == "sigma_l1":
        return np.exp(0.5 * prompts.log_var).sum(axis=1)
    return prompts.masses()


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def _class_scores(
    prompts: EmbeddingSet, kept: np.ndarray, images: EmbeddingSet, classify_by: str
) -> np.ndarray:
    """Per-image score column for one class; LOWER is always better here."""
    if classify_by == "mu_cosine":
        rep = _unit_rows(prompts.mu[kept]).mean(axis=0)
        norm = np.linalg.norm(rep)
        if norm > 0:
            rep = rep / norm
        return -(_unit_rows(images.mu) @ rep)
    # moment-matched representative; the image's own mass is rank-constant
    rep_mu = prompts.mu[kept].mean(axis=0)
    rep_mass = float(prompts.var[kept].mean(axis=0).sum()) if prompts.has_log_var else 0.0
    diff = images.mu - rep_mu[None, :]
    return (diff * diff).sum(axis=1) + rep_mass


def prompt_filter_eval(
    class_prompts: Mapping[str, EmbeddingSet],
    images: EmbeddingSet,
    image_labels: Sequence[str],
    strategy: str = "all",
    k: int | None = None,
    uncertainty: str = "sigma_sq_l1",
    classify_by: str = "mu_cosine",
) -> PromptFilterReport:
    """Zero-shot classification accuracy under prompt filtering.

    Per class, prompts are sorted ascending by the chosen uncertainty scalar
    and the K most certain are kept; the kept prompts form one class
    representative. best_topk_per_class greedily picks each class's K to
    maximize overall accuracy with the other classes held at their current
    choice (starting from all prompts, ties toward larger K), so its accuracy
    never falls below the all-prompts baseline.
    """
    if strategy not in _STRATEGIES:
        raise BadConfig(f"strategy must be one of {_STRATEGIES}, got {strategy!r}")
    if uncertainty not in _UNCERTAINTY:
        raise BadConfig(f"uncertainty must be one of {_UNCERTAINTY}, got {uncertainty!r}")
    if classify_by not in _CLASSIFY:
        raise BadConfig(f"classify_by must be one of {_CLASSIFY}, got {classify_by!r}")
    if strategy == "topk_uniform":
        if k is None or k < 1:
            raise OutOfRange("topk_uniform needs k >= 1")
    elif k is not None:
        raise BadConfig(f"strategy {strategy!r} does not take k")
    if not class_prompts:
        raise EmptyClass("no classes given")
    if len(image_labels) != len(images):
        raise LengthMismatch(
            f"{len(images)} images but {len(image_labels)} labels"
        )
    if len(images) == 0:
        raise BadConfig("no images to evaluate")

    names = sorted(class_prompts)
    for name in names:
        if len(class_prompts[name]) == 0:
            raise EmptyClass(f"class {name!r} has no prompts")
    labels = [str(c) for c in image_labels]
    for c in labels:
        if c not in class_prompts:
            raise UnknownId(f"image label {c!r} is not a known class")
    truth = np.array([names.index(c) for c in labels])

    # ascending uncertainty, stable so equal scalars keep input order
    orders = {
        name: np.argsort(_prompt_uncertainty(class_prompts[name], uncertainty), kind="stable")
        for name in names
    }

    def kept_for(name: str, kk: int) -> np.ndarray:
        return orders[name][:kk]

    def initial_k(name: str) -> int:
        p = len(class_prompts[name])
        if strategy == "single":
            return 1
        if strategy == "topk_uniform":
            return min(k, p)
        return p  # "all", and the starting point of the greedy search

    chosen = {name: initial_k(name) for name in names}
    if strategy == "single":
        # first prompt in input order, not the most certain one
        kept_sets = {name: np.array([0]) for name in names}
    else:
        kept_sets = {name: kept_for(name, chosen[name]) for name in names}

    score = np.column_stack(
        [
            _class_scores(class_prompts[name], kept_sets[name], images, classify_by)
            for name in names
        ]
    )

    def accuracy_of(columns: np.ndarray) -> float:
        pred = np.argmin(columns, axis=1)
        return float((pred == truth).mean())

    if strategy == "best_topk_per_class":
        for ci, name in enumerate(names):
            p = len(class_prompts[name])
            best_k = chosen[name]
            best_acc = accuracy_of(score)
            for kk in range(p, 0, -1):  # ties resolve toward larger k
                if kk == chosen[name]:
                    continue
                trial = score.copy()
                trial[:, ci] = _class_scores(
                    class_prompts[name], kept_for(name, kk), images, classify_by
                )
                acc = accuracy_of(trial)
                if acc > best_acc:
                    best_acc = acc
                    best_k = kk
            if best_k != chosen[name]:
                chosen[name] = best_k
                score[:, ci] = _class_scores(
                    class_prompts[name], kept_for(name, best_k), images, classify_by
                )

    return PromptFilterReport(
        accuracy=accuracy_of(score),
        chosen_k=dict(chosen),
        strategy=strategy,
        classify_by=classify_by,
        uncertainty=uncertainty,
        num_images=len(images),
    )
