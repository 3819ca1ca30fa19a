"""Command-line pipeline: synthesize, train, extract, evaluate, analyze, verify.

Progress goes to standard error; machine-readable results only land in the
JSON files named by --out.  Exit codes: 0 success, 1 validation error,
2 I/O error, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import baselines, checks, powerlaw
from .errors import ActnetError, DataError
from .evaluation import (
    QueryExpansion,
    RetrievalIndex,
    mean_average_precision,
    pairwise_label_distances,
    separability_from_distances,
)
from .features import (
    load_feature_maps,
    read_descriptors,
    read_feature_file,
    read_manifest,
    write_descriptors,
)
from .head import ModelState, extract_descriptors, initial_model
from .synthetic import SynthConfig, generate_synthetic_dataset
from .tensor import make_rng
from .training import TrainConfig, TrainingSet, train

log = logging.getLogger("actnet")

USAGE_EXIT = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(USAGE_EXIT)


def _resolve_threads(value: int | None) -> int:
    if value is None:
        env = os.environ.get("ACTNET_THREADS")
        value = int(env) if env else os.cpu_count() or 1
    if value < 1:
        raise DataError(f"thread count must be positive, got {value}")
    return value


def _write_json(doc: dict, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    log.info("wrote %s", path)


def _split_maps(manifest_path, wanted: str):
    entries = read_manifest(manifest_path)
    base = Path(manifest_path).parent
    keep = [e for e in entries if wanted == "all" or e.split == wanted]
    if not keep:
        raise DataError(f"manifest has no entries in split {wanted!r}")
    return keep, load_feature_maps(keep, base)


def _load_training_set(manifest_path) -> TrainingSet:
    return TrainingSet.from_manifest(manifest_path, "train")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args) -> int:
    cfg = SynthConfig(
        classes=args.classes,
        images_per_class=args.per_class,
        width=args.width,
        height=args.height,
        depths=tuple(int(d) for d in args.depths.split(",")),
        background_rate=args.background_rate,
        signal_channels_per_class=args.signal_channels,
        signal_rate=args.signal_rate,
        seed=args.seed,
    )
    manifest = generate_synthetic_dataset(cfg, args.out)
    log.info("synthesized %d images under %s", cfg.classes * cfg.images_per_class, args.out)
    log.info("manifest at %s", manifest)
    return 0


def _cmd_train(args) -> int:
    cfg = TrainConfig.from_json_file(args.config) if args.config else TrainConfig()
    data = _load_training_set(args.manifest)
    depths = [t.depth for t in data.maps[data.ids[0]]]
    model = initial_model(args.family, depths, out_dim=args.out_dim)
    log.info(
        "training %s head on %d images (%d streams, %d learnables)",
        args.family, len(data.ids), len(depths), model.n_params(),
    )
    log_path = args.log or (str(args.out) + ".log.jsonl")
    model, trace = train(model, data, cfg, log_path=log_path, threads=args.threads)
    model.save(args.out)
    log.info("saved model to %s after %d epochs", args.out, len(trace))
    return 0


def _cmd_extract(args) -> int:
    model = ModelState.load(args.model)
    entries, maps = _split_maps(args.manifest, args.split)
    ids, matrix = extract_descriptors(maps, model, threads=args.threads)
    write_descriptors(args.out, ids, matrix)
    log.info("extracted %d descriptors (dim %d) to %s", len(ids), matrix.shape[1], args.out)
    return 0


def _relevance_from_manifest(entries):
    db_by_class: dict[int, set[str]] = {}
    for e in entries:
        if e.split == "db":
            db_by_class.setdefault(e.class_label, set()).add(e.id)
    return {
        e.id: db_by_class.get(e.class_label, set()) for e in entries if e.split == "query"
    }


def _cmd_evaluate(args) -> int:
    model = ModelState.load(args.model)
    entries = read_manifest(args.manifest)
    base = Path(args.manifest).parent
    db_entries = [e for e in entries if e.split == "db"]
    query_entries = [e for e in entries if e.split == "query"]
    if not db_entries or not query_entries:
        raise DataError("evaluation needs both db and query entries in the manifest")
    db_ids, db_matrix = extract_descriptors(
        load_feature_maps(db_entries, base), model, threads=args.threads
    )
    query_maps = load_feature_maps(query_entries, base)
    query_ids, query_matrix = extract_descriptors(query_maps, model, threads=args.threads)

    if args.relevance:
        with open(args.relevance, "r", encoding="utf-8") as fh:
            relevance = {str(q): set(v) for q, v in json.load(fh).items()}
    else:
        relevance = _relevance_from_manifest(entries)
    index = RetrievalIndex(db_ids, db_matrix, relevance)
    qe = QueryExpansion(n=args.qe_n, alpha=args.qe_alpha) if args.qe_n else None
    report = mean_average_precision(
        index,
        queries=query_ids,
        query_descriptors=dict(zip(query_ids, query_matrix)),
        exclude_self=args.exclude_self,
        compact_k=args.compact,
        qe=qe,
    )
    log.info("mAP = %.4f over %d queries", report.map, len(report.per_query))
    _write_json(report.to_json_dict(), args.out)
    return 0


def _cmd_analyze_separability(args) -> int:
    ids, matrix = read_descriptors(args.descriptors)
    labels_by_id = {e.id: e.class_label for e in read_manifest(args.manifest)}
    missing = [i for i in ids if i not in labels_by_id]
    if missing:
        raise DataError(f"descriptor ids missing from manifest: {missing[:5]}")
    labels = np.array([labels_by_id[i] for i in ids])
    matching, nonmatching = pairwise_label_distances(matrix, labels)
    report = separability_from_distances(matching, nonmatching, bins=args.bins)
    log.info(
        "kld = %.4f over %d matching / %d non-matching pairs",
        report.kld, matching.size, nonmatching.size,
    )
    _write_json(report.to_json_dict(), args.out)
    return 0


def _cmd_verify_gradients(args) -> int:
    report = checks.run_all(args.seed)
    _write_json(report, args.out)
    if not report["pass"]:
        log.error("gradient verification FAILED; see %s", args.out)
        return 1
    log.info("all gradient checks passed")
    return 0


def _cmd_appendix_check(args) -> int:
    rate = args.rate
    if args.estimate_from:
        f = read_feature_file(args.estimate_from)
        rate = powerlaw.estimate_rate(np.concatenate([t.flat() for t in f.layers]))
        log.info("estimated exponential rate %.4f from %s", rate, args.estimate_from)
    model = powerlaw.ExpTransformModel(rate=rate, scale=args.p)
    report = powerlaw.monte_carlo_validate(model, args.samples, make_rng(args.seed))
    log.info("ks_distance = %.6f", report.ks_distance)
    _write_json(report.to_json_dict(), args.out)
    return 0


def _cmd_baseline(args) -> int:
    entries = read_manifest(args.manifest)
    base = Path(args.manifest).parent
    train_maps = load_feature_maps([e for e in entries if e.split == "train"], base)
    db_entries = [e for e in entries if e.split == "db"]
    db_maps = load_feature_maps(db_entries, base)
    query_maps = load_feature_maps([e for e in entries if e.split == "query"], base)
    relevance = _relevance_from_manifest(entries)
    labels = {e.id: e.class_label for e in entries}

    heads = {}
    for pool in baselines.BASELINE_POOLS:
        head = baselines.BaselineHead(pool, gem_p=args.gem_p).fit(
            train_maps, out_dim=args.out_dim, threads=args.threads
        )
        db_ids, db_matrix = head.extract(db_maps, threads=args.threads)
        query_ids, query_matrix = head.extract(query_maps, threads=args.threads)
        index = RetrievalIndex(db_ids, db_matrix, relevance)
        report = mean_average_precision(
            index, queries=query_ids, query_descriptors=dict(zip(query_ids, query_matrix))
        )
        matching, nonmatching = pairwise_label_distances(
            db_matrix, np.array([labels[i] for i in db_ids])
        )
        sep = separability_from_distances(matching, nonmatching, bins=args.bins)
        heads[pool] = {"map": report.map, "kld": sep.kld}
        log.info("%s: mAP=%.4f kld=%.4f", pool, report.map, sep.kld)
    _write_json({"gem_p": args.gem_p, "bins": args.bins, "heads": heads}, args.out)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="actnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--threads", type=int, default=None,
                       help="worker cap (default: ACTNET_THREADS or all cores)")
        return p

    p = add("synth", _cmd_synth, "generate a deterministic synthetic feature dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--depths", default="64,32", help="comma-separated channel counts, one per layer")
    p.add_argument("--background-rate", type=float, default=4.0)
    p.add_argument("--signal-channels", type=int, default=8)
    p.add_argument("--signal-rate", type=float, default=0.5)

    p = add("train", _cmd_train, "train a head on a manifest's train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON train config; defaults apply when omitted")
    p.add_argument("--out", required=True, help="model JSON output path")
    p.add_argument("--log", help="epoch summary JSON Lines path (default: <out>.log.jsonl)")
    p.add_argument("--family", choices=["sinh", "exp", "weibull"], default="weibull")
    p.add_argument("--out-dim", type=int, default=None, help="whitening output dim (default: input dim)")

    p = add("extract", _cmd_extract, "extract descriptors for a manifest split")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=["all", "train", "query", "db"], default="all")
    p.add_argument("--out", required=True, help="descriptor store output path")

    p = add("evaluate", _cmd_evaluate, "rank query split against db split and report mAP")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="evaluation report JSON path")
    p.add_argument("--relevance", help="JSON file query id -> relevant ids (default: manifest classes)")
    p.add_argument("--qe-n", type=int, default=0, help="query expansion neighbors (0 disables)")
    p.add_argument("--qe-alpha", type=float, default=3.0)
    p.add_argument("--compact", type=int, default=None, help="truncate descriptors to K components")
    p.add_argument("--exclude-self", action="store_true")

    p = add("analyze-separability", _cmd_analyze_separability,
            "distance histograms and KLD from a descriptor store")
    p.add_argument("--descriptors", required=True, help="ACTD store path")
    p.add_argument("--manifest", required=True, help="manifest supplying class labels")
    p.add_argument("--bins", type=int, default=100)
    p.add_argument("--out", required=True)

    p = add("verify-gradients", _cmd_verify_gradients, "finite-difference gradient verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="gradient-report.json")

    p = add("appendix-check", _cmd_appendix_check,
            "Monte Carlo check of the exponential-to-power-law transform")
    p.add_argument("--lambda", dest="rate", type=float, default=2.0, help="exponential rate")
    p.add_argument("--p", type=float, default=1.0, help="divisor in exp(x/p)")
    p.add_argument("--samples", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="appendix-report.json")
    p.add_argument("--estimate-from", help="ACTF file to estimate the rate from (overrides --lambda)")

    p = add("baseline", _cmd_baseline, "evaluate the DA/max/GeM baseline heads")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gem-p", type=float, default=baselines.GEM_DEFAULT_P)
    p.add_argument("--bins", type=int, default=100)
    p.add_argument("--out-dim", type=int, default=None, help="whitening output dim (default: input dim)")

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else USAGE_EXIT
    try:
        args.threads = _resolve_threads(args.threads)
        return args.fn(args)
    except ActnetError as exc:
        log.error("%s", exc)
        return 1
    except OSError as exc:
        log.error("%s", exc)
        return 2


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
