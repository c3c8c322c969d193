"""Command-line surface.

Every subcommand accepts --seed and --output {json,csv}; all randomness is
derived from the seed, and repeated runs with identical argument vectors
produce byte-identical output. JSON maps are emitted with sorted keys.

Exit codes: 0 success, 2 validation or usage error, 1 unexpected runtime error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np

from .core import (
    EmbeddingSet,
    MatchTable,
    Modality,
    PembError,
    UnknownId,
)
from .distances import DistanceKind, McConfig, pairwise_distance_matrix
from .fileio import (
    read_annotations,
    read_embeddings_jsonl,
    read_pemb,
    write_annotations,
    write_embeddings_jsonl,
    write_pemb,
)
from .metrics import (
    evaluate,
    prompt_filter_eval,
    rank_by_distance,
    uncertainty_profile,
)
from .retrieval import CoarseConfig, batch_search, build_index, load_index, save_index
from .toybench import MixConfig, ToyConfig, run_toy

_CLOSED_FORM_KINDS = ("csd", "wasserstein2", "kl", "bhattacharyya", "elk", "euclidean_mu_only")
_MC_KINDS = ("js_mc", "pcme_match_prob_mc")


def _fmt_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def _emit(payload: dict, rows, args, stream=None) -> None:
    """payload feeds --output json; rows (header + data tuples) feed csv."""
    stream = stream or sys.stdout
    if args.output == "json":
        stream.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    else:
        for row in rows:
            stream.write(",".join(_fmt_cell(c) for c in row) + "\n")


def _flat_rows(payload: dict, prefix=""):
    """Depth-first key,value rows for scalar-shaped reports."""
    out = []
    for k in sorted(payload):
        v = payload[k]
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.extend(_flat_rows(v, prefix=f"{key}."))
        elif isinstance(v, (list, tuple)):
            for i, item in enumerate(v):
                out.append((f"{key}.{i}", _fmt_cell(item)))
        else:
            out.append((key, _fmt_cell(v)))
    return out


def _kind(name: str) -> DistanceKind:
    try:
        return DistanceKind(name)
    except ValueError:
        raise PembError(
            f"unknown distance kind {name!r}; choose from "
            f"{', '.join(k.value for k in DistanceKind)}"
        ) from None


def _mc_for(kind: DistanceKind, args) -> McConfig | None:
    if kind.value in _MC_KINDS:
        return McConfig(num_samples=args.mc_samples, seed=args.seed)
    return None


# ---------------------------------------------------------------------------
# subcommand bodies


def _cmd_toy(args) -> int:
    mix = MixConfig(mix_ratio=args.mix_ratio, beta_param=args.beta) if args.mix else None
    cfg = ToyConfig(
        num_classes=args.classes,
        samples_per_class=args.per_class,
        confusing_per_pair=args.confusing,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        objective=args.objective,
        mix=mix,
        margin=args.margin,
    )
    report = run_toy(cfg, snapshot_path=args.snapshot, snapshot_every=args.snapshot_every)
    payload = report.to_dict()
    _emit(payload, [("field", "value")] + _flat_rows(payload), args)
    return 0


def _cmd_distcmp(args) -> int:
    queries = read_pemb(args.queries)
    gallery = read_pemb(args.gallery)
    kinds = [_kind(k.strip()) for k in args.kinds.split(",") if k.strip()]
    if not kinds:
        raise PembError("no distance kinds given")
    values = {}
    for kind in kinds:
        m = pairwise_distance_matrix(
            queries, gallery, kind, cfg=_mc_for(kind, args), a=args.a, b=args.b
        )
        values[kind.value] = [[float(x) for x in row] for row in m]
    payload = {
        "query_ids": list(queries.ids),
        "gallery_ids": list(gallery.ids),
        "values": values,
    }
    rows = [("query_id", "gallery_id", "kind", "value")]
    for kind in kinds:
        for i, q in enumerate(queries.ids):
            for j, g in enumerate(gallery.ids):
                rows.append((q, g, kind.value, _fmt_cell(values[kind.value][i][j])))
    _emit(payload, rows, args)
    return 0


def _cmd_retrieve(args) -> int:
    if args.load_index:
        index = load_index(args.load_index)
    else:
        gallery = read_pemb(args.gallery)
        coarse = CoarseConfig(nlist=args.nlist, seed=args.seed) if args.nlist else None
        index = build_index(gallery, coarse=coarse)
    if args.save_index:
        save_index(index, args.save_index)
        if not args.queries:
            payload = {"saved_index": args.save_index, "items": len(index.ids)}
            _emit(payload, [("field", "value")] + _flat_rows(payload), args)
            return 0
    if not args.queries:
        raise PembError("--queries is required unless only saving an index")
    queries = read_pemb(args.queries)
    shortlist = args.shortlist_k if args.index == "two-stage" else None
    if args.index == "two-stage" and shortlist is None:
        raise PembError("two-stage retrieval needs --shortlist-k")
    ranked = batch_search(
        index,
        queries,
        k=args.k,
        shortlist_k=shortlist,
        nprobe=args.nprobe,
        threads=args.threads,
    )
    payload = {
        "results": [
            {"query_id": rl.query_id, "ids": list(rl.ids), "scores": list(rl.scores)}
            for rl in ranked
        ]
    }
    rows = [("query_id", "rank", "gallery_id", "score")]
    for rl in ranked:
        for r, (g, s) in enumerate(zip(rl.ids, rl.scores), start=1):
            rows.append((rl.query_id, r, g, _fmt_cell(float(s))))
    _emit(payload, rows, args)
    return 0


def _load_eval_inputs(args):
    queries = read_pemb(args.queries)
    gallery = read_pemb(args.gallery)
    truth = read_annotations(args.ann, gallery_ids=gallery.ids)
    kind = _kind(args.kind)
    ranked = rank_by_distance(
        queries, gallery, kind, cfg=_mc_for(kind, args), a=args.a, b=args.b
    )
    return queries, ranked, truth


def _cmd_eval(args) -> int:
    ks = tuple(int(k) for k in args.ks.split(","))
    _, ranked, truth = _load_eval_inputs(args)
    report = evaluate(ranked, truth, ks=ks, threshold=args.threshold)
    payload = report.to_dict()
    _emit(payload, [("metric", "value")] + _flat_rows(payload), args)
    return 0


def _cmd_uncertainty(args) -> int:
    queries, ranked, truth = _load_eval_inputs(args)
    prof = uncertainty_profile(
        queries, ranked, truth, num_bins=args.bins, threshold=args.threshold
    )
    payload = prof.to_dict()
    rows = [
        (
            "bin_index", "bin_lo", "bin_hi", "count", "mean_recall1",
            "pearson_rho", "bin_level_rho", "num_skipped",
        )
    ]
    for i in range(len(prof.bin_counts)):
        rows.append(
            (
                i,
                _fmt_cell(prof.bin_edges[i]),
                _fmt_cell(prof.bin_edges[i + 1]),
                prof.bin_counts[i],
                _fmt_cell(prof.bin_mean_recall1[i]),
                _fmt_cell(prof.pearson_rho),
                _fmt_cell(prof.bin_level_rho),
                prof.num_skipped,
            )
        )
    _emit(payload, rows, args)
    return 0


def _cmd_prompt_filter(args) -> int:
    class_prompts = {}
    for spec_item in args.prompts:
        name, sep, path = spec_item.partition("=")
        if not sep or not name or not path:
            raise PembError(f"--prompts wants NAME=PATH, got {spec_item!r}")
        class_prompts[name] = read_pemb(path)
    images = read_pemb(args.images)
    with open(args.labels, "r", encoding="utf-8") as f:
        label_map = json.load(f)
    try:
        labels = [label_map[i] for i in images.ids]
    except KeyError as e:
        raise UnknownId(f"labels file has no entry for image id {e.args[0]!r}") from None
    report = prompt_filter_eval(
        class_prompts,
        images,
        labels,
        strategy=args.strategy,
        k=args.k,
        uncertainty=args.uncertainty,
        classify_by=args.classify_by,
    )
    payload = report.to_dict()
    _emit(payload, [("field", "value")] + _flat_rows(payload), args)
    return 0


def _cmd_gen_synth(args) -> int:
    rng = np.random.default_rng(args.seed)
    n_g, n_q, d = args.num_gallery, args.num_queries, args.dim
    if n_q > 0 and n_g == 0:
        raise PembError("queries need a non-empty gallery to point at")
    g_mu = rng.normal(size=(n_g, d))
    g_lv = rng.normal(loc=-1.0, scale=0.5, size=(n_g, d))
    sources = rng.integers(0, n_g, size=n_q) if n_g else np.zeros(0, dtype=int)
    q_mu = g_mu[sources] + args.noise * rng.normal(size=(n_q, d))
    q_lv = rng.normal(loc=-1.0, scale=0.5, size=(n_q, d))

    g_ids = [f"g{i:05d}" for i in range(n_g)]
    q_ids = [f"q{i:05d}" for i in range(n_q)]
    gallery = EmbeddingSet(
        g_ids, modality=Modality.VISUAL, dim=d, mu=g_mu,
        log_var=None if args.mean_only else g_lv,
    )
    queries = EmbeddingSet(q_ids, modality=Modality.TEXTUAL, dim=d, mu=q_mu, log_var=q_lv)
    truth = MatchTable(
        tuple(q_ids), tuple(g_ids),
        {(q_ids[i], g_ids[sources[i]]): 1.0 for i in range(n_q)},
    )

    import os

    os.makedirs(args.out_dir, exist_ok=True)
    paths = {
        "queries": os.path.join(args.out_dir, "queries.pemb"),
        "gallery": os.path.join(args.out_dir, "gallery.pemb"),
        "annotations": os.path.join(args.out_dir, "annotations.jsonl"),
    }
    write_pemb(queries, paths["queries"])
    write_pemb(gallery, paths["gallery"])
    write_annotations(truth, paths["annotations"])
    payload = {**paths, "num_queries": n_q, "num_gallery": n_g, "dim": d}
    _emit(payload, [("field", "value")] + _flat_rows(payload), args)
    return 0


def _sniff_pemb(path) -> bool:
    with open(path, "rb") as f:
        return f.read(4) == b"PEMB"


def _cmd_convert(args) -> int:
    es = read_pemb(args.input) if _sniff_pemb(args.input) else read_embeddings_jsonl(args.input)
    if args.to == "pemb":
        write_pemb(es, args.out)
    else:
        write_embeddings_jsonl(es, args.out)
    payload = {
        "out": args.out,
        "count": len(es),
        "dim": es.dim,
        "modality": es.modality.value,
        "has_log_var": es.has_log_var,
    }
    _emit(payload, [("field", "value")] + _flat_rows(payload), args)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="root seed for all randomness")
    p.add_argument("--output", choices=("json", "csv"), default="json",
                   help="report format on stdout")


def _add_distance_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mc-samples", type=int, default=1000,
                   help="samples per pair for Monte Carlo kinds")
    p.add_argument("--a", type=float, default=5.0, help="match-probability scale")
    p.add_argument("--b", type=float, default=5.0, help="match-probability shift")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pemb",
        description="Probabilistic embedding toolkit: distances, training "
        "objectives, retrieval, evaluation, and file formats.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy", help="run the 2-d uncertainty separation benchmark")
    p.add_argument("--objective", choices=("csd", "wasserstein2", "triplet_hnm", "triplet_sum"),
                   default="csd")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--per-class", type=int, default=500)
    p.add_argument("--confusing", type=int, default=150)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--margin", type=float, default=0.2, help="triplet margin")
    p.add_argument("--mix", action="store_true", help="enable mixed-sample augmentation")
    p.add_argument("--mix-ratio", type=float, default=0.25)
    p.add_argument("--beta", type=float, default=2.0)
    p.add_argument("--snapshot", default=None, help="CSV path for per-sample states")
    p.add_argument("--snapshot-every", type=int, default=0,
                   help="epoch stride for snapshots; 0 = final only")
    _add_common(p)
    p.set_defaults(func=_cmd_toy)

    p = sub.add_parser("distcmp", help="pairwise distance matrices under several kinds")
    p.add_argument("--queries", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--kinds", default=",".join(_CLOSED_FORM_KINDS),
                   help="comma list; closed-form kinds by default")
    _add_distance_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_distcmp)

    p = sub.add_parser("retrieve", help="nearest-gallery search")
    p.add_argument("--queries", default=None)
    p.add_argument("--gallery", default=None)
    p.add_argument("--index", choices=("exact", "two-stage"), default="exact")
    p.add_argument("-k", type=int, default=10)
    p.add_argument("--shortlist-k", type=int, default=None)
    p.add_argument("--nlist", type=int, default=None, help="build a coarse quantizer")
    p.add_argument("--nprobe", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--save-index", default=None)
    p.add_argument("--load-index", default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_retrieve)

    for name, fn, extra in (
        ("eval", _cmd_eval, True),
        ("uncertainty", _cmd_uncertainty, False),
    ):
        p = sub.add_parser(
            name,
            help="rank metrics from annotation files" if extra
            else "uncertainty-vs-recall profile",
        )
        p.add_argument("--queries", required=True)
        p.add_argument("--gallery", required=True)
        p.add_argument("--ann", required=True)
        p.add_argument("--kind", default="csd")
        p.add_argument("--threshold", type=float, default=0.5)
        if extra:
            p.add_argument("--ks", default="1,5,10")
        else:
            p.add_argument("--bins", type=int, default=10)
        _add_distance_flags(p)
        _add_common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("prompt-filter", help="zero-shot accuracy under prompt filtering")
    p.add_argument("--prompts", action="append", required=True, metavar="NAME=PATH",
                   help="repeatable; one embedding file per class")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True, help="JSON object mapping image id to class")
    p.add_argument("--strategy",
                   choices=("single", "all", "topk_uniform", "best_topk_per_class"),
                   default="all")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--uncertainty", choices=("sigma_l1", "sigma_sq_l1"),
                   default="sigma_sq_l1")
    p.add_argument("--classify-by", choices=("mu_cosine", "csd"), default="mu_cosine")
    _add_common(p)
    p.set_defaults(func=_cmd_prompt_filter)

    p = sub.add_parser("gen-synth", help="write a synthetic query/gallery/annotation triple")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--num-queries", type=int, default=32)
    p.add_argument("--num-gallery", type=int, default=128)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.1,
                   help="query jitter around its source gallery item")
    p.add_argument("--mean-only", action="store_true",
                   help="write the gallery without log-variances")
    _add_common(p)
    p.set_defaults(func=_cmd_gen_synth)

    p = sub.add_parser("convert", help="translate between the binary and JSONL formats")
    p.add_argument("--input", required=True)
    p.add_argument("--to", choices=("pemb", "jsonl"), required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_convert)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PembError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except BrokenPipeError:
        # downstream consumer closed early (e.g. head); not our failure
        try:
            sys.stdout.close()
        except OSError:
            pass
        return 0
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - last-resort runtime failure
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
