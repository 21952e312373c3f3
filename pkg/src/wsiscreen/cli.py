"""Command-line entry point: ``wsiscreen <command> ...``.

Every stage is runnable on its own. Standalone stages read and write the same
files under the configured work directory as ``pipeline`` does, so a failed run
can be resumed or inspected one stage at a time.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import load_config, load_yaml
from .contrastive import AdapterParams, extract_features, load_paired_views, train_adapter
from .dataset import DatasetManifest, SyntheticSpec, generate_synthetic, split_dataset
from .errors import ConfigError, WsiScreenError
from .mil import MilHead, predict, train_mil
from .mp_filter import FilterCorpus, build_filter_corpus, instance_logits, train_mp_classifier
from .nn import sigmoid
from .pipeline import (
    derive_seed,
    evaluate_predictions,
    load_mp_classifier,
    read_predictions,
    run_pipeline,
    run_sweep_k,
    save_mp_classifier,
    write_predictions,
)

log = logging.getLogger("wsiscreen")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    Path(cfg.work_dir).mkdir(parents=True, exist_ok=True)
    return cfg


def _work(cfg, name, override=None) -> Path:
    return Path(override) if override else Path(cfg.work_dir) / name


# --- commands -----------------------------------------------------------------


def cmd_synth(args):
    raw = load_yaml(args.spec) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{args.spec}: spec must be a mapping")
    raw = dict(raw)
    train_fraction = raw.pop("train_fraction", 0.7)
    if args.seed is not None:
        raw["seed"] = args.seed
    spec = SyntheticSpec.from_dict(raw)
    out = Path(args.out)
    manifest = split_dataset(generate_synthetic(spec, out), train_fraction, seed=spec.seed)
    path = manifest.save(out / "manifest.csv")
    print(path)


def cmd_split(args):
    manifest = DatasetManifest.load(args.manifest)
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out) if args.out else Path(args.manifest)
    path = split_dataset(manifest, args.train_fraction, seed=seed).save(out)
    print(path)


def cmd_train_filter(args):
    cfg = _config(args)
    manifest = DatasetManifest.load(cfg.manifest)
    params = train_mp_classifier(manifest.load_bags("train"), replace(cfg.mp, seed=derive_seed(cfg.seed, "mp")))
    print(save_mp_classifier(params, _work(cfg, "mp_classifier.prm", args.out)))


def cmd_score(args):
    cfg = _config(args)
    manifest = DatasetManifest.load(cfg.manifest)
    params = load_mp_classifier(_work(cfg, "mp_classifier.prm", args.checkpoint))
    out = _work(cfg, "patch_scores.csv", args.out)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bag_id", "instance_index", "score"])
        for entry in manifest.select(args.split):
            scores = sigmoid(instance_logits(params, manifest.load_bag(entry).embeddings))
            w.writerows([entry.bag_id, i, repr(float(s))] for i, s in enumerate(scores))
    print(out)


def cmd_filter(args):
    cfg = _config(args)
    manifest = DatasetManifest.load(cfg.manifest)
    strategy = args.strategy or cfg.filter.strategy
    k = args.k or cfg.filter.k
    params = None
    if strategy == "mp_topk":
        params = load_mp_classifier(_work(cfg, "mp_classifier.prm", args.checkpoint))
    corpus = build_filter_corpus(
        manifest,
        params,
        k=k,
        strategy=strategy,
        source_fraction=cfg.filter.source_fraction,
        seed=derive_seed(cfg.seed, "filter"),
        threads=args.threads,
    )
    print(corpus.save(_work(cfg, "corpus.csv", args.out)))


def cmd_train_adapter(args):
    cfg = _config(args)
    manifest = DatasetManifest.load(cfg.manifest)
    corpus = FilterCorpus.load(_work(cfg, "corpus.csv", args.corpus))
    views = load_paired_views(args.paired_views) if args.paired_views else None
    res = train_adapter(corpus, manifest, replace(cfg.contrastive, seed=derive_seed(cfg.seed, "contrastive")), views)
    out = Path(args.out_dir) if args.out_dir else Path(cfg.work_dir)
    out.mkdir(parents=True, exist_ok=True)
    res.projection.save(out / "projection.prm")
    res.write_log(out / "contrastive_log.csv")
    print(res.adapter.save(out / "adapter.prm"))


def cmd_extract(args):
    cfg = _config(args)
    manifest = DatasetManifest.load(cfg.manifest)
    adapter = AdapterParams.load(_work(cfg, "adapter.prm", args.adapter))
    out = _work(cfg, "adapted", args.out_dir)
    extract_features(adapter, manifest, out, threads=args.threads)
    print(out / "manifest.csv")


def cmd_train_mil(args):
    cfg = _config(args)
    manifest = DatasetManifest.load(_work(cfg, "adapted/manifest.csv", args.features))
    res = train_mil(manifest.load_bags("train"), replace(cfg.mil, seed=derive_seed(cfg.seed, "mil")))
    head_path = res.head.save(_work(cfg, "mil_head.prm", args.out))
    head = MilHead.load(head_path)
    rows = [(b.bag_id, predict(head, b.embeddings)[0], b.label) for b in manifest.load_bags("test")]
    print(write_predictions(_work(cfg, "predictions.csv", args.predictions), rows))


def cmd_eval(args):
    _, scores, labels = read_predictions(args.predictions)
    out = Path(args.out_dir) if args.out_dir else Path(args.predictions).parent
    metrics, roc, rows = evaluate_predictions(scores, labels, out, tuple(args.s_min), args.threshold)
    for metric, value, constraint in rows:
        print(f"{metric},{value},{constraint}")
    log.info("wrote %s and %s", metrics, roc)


def cmd_pipeline(args):
    cfg = _config(args)
    summary = run_pipeline(cfg, threads=args.threads)
    m = summary["metrics"]
    print(f"auc={m['auc']:.4f}")
    print(Path(cfg.work_dir) / "metrics.csv")


def cmd_sweep_k(args):
    cfg = _config(args)
    print(run_sweep_k(cfg, args.k, threads=args.threads))


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override every configured seed")
    common.add_argument("--threads", type=int, default=1, help="max workers for per-bag operations")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="wsiscreen", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth", cmd_synth, "generate and split a synthetic dataset from a YAML spec")
    sp.add_argument("spec")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("split", cmd_split, "stratified train/test split of a manifest")
    sp.add_argument("manifest")
    sp.add_argument("--train-fraction", type=float, default=0.7)
    sp.add_argument("--out", help="output manifest (default: overwrite input)")

    sp = add("train-filter", cmd_train_filter, "train the mean-pooling instance classifier")
    sp.add_argument("config")
    sp.add_argument("--out")

    sp = add("score", cmd_score, "score every patch with the mean-pooling classifier")
    sp.add_argument("config")
    sp.add_argument("--checkpoint")
    sp.add_argument("--split", choices=("train", "test"), default=None)
    sp.add_argument("--out")

    sp = add("filter", cmd_filter, "build the filtered patch corpus")
    sp.add_argument("config")
    sp.add_argument("--checkpoint")
    sp.add_argument("--strategy", choices=("mp_topk", "random", "all"))
    sp.add_argument("--k", type=int)
    sp.add_argument("--out")

    sp = add("train-adapter", cmd_train_adapter, "contrastive training of the linear adapter")
    sp.add_argument("config")
    sp.add_argument("--corpus")
    sp.add_argument("--paired-views", help="CSV of precomputed view pairs")
    sp.add_argument("--out-dir")

    sp = add("extract", cmd_extract, "apply the adapter to every bag")
    sp.add_argument("config")
    sp.add_argument("--adapter")
    sp.add_argument("--out-dir")

    sp = add("train-mil", cmd_train_mil, "train a MIL head and predict the test split")
    sp.add_argument("config")
    sp.add_argument("--features", help="manifest of adapted features")
    sp.add_argument("--out")
    sp.add_argument("--predictions")

    sp = add("eval", cmd_eval, "metrics and ROC from a predictions CSV")
    sp.add_argument("predictions")
    sp.add_argument("--s-min", type=float, nargs="+", default=[0.90, 0.95])
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--out-dir")

    sp = add("pipeline", cmd_pipeline, "run every stage end to end")
    sp.add_argument("config")

    sp = add("sweep-k", cmd_sweep_k, "one pipeline run per k, sharing the stage-1 checkpoint")
    sp.add_argument("config")
    sp.add_argument("--k", type=int, nargs="+", required=True)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        args.func(args)
    except WsiScreenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
