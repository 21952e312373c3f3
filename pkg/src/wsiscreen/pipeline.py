"""Three-stage pipeline: MP filter -> contrastive adapter -> MIL head, plus evaluation."""

from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import logging
import zlib
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import PipelineConfig
from .contrastive import AdapterParams, extract_features, train_adapter
from .dataset import DatasetManifest
from .errors import DataError, StageError, WsiScreenError
from .metrics import metrics_rows, roc_curve, write_metrics_csv, write_roc_csv
from .mil import MilHead, predict, train_mil
from .mp_filter import (
    FilterCorpus,
    build_filter_corpus,
    filter_recall,
    train_mp_classifier,
)
from .nn import LinearParams, load_params, save_params

log = logging.getLogger(__name__)


def derive_seed(seed: int, tag: str) -> int:
    """Independent per-stage seed from the global seed and a stage name."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(tag.encode())]).generate_state(1)[0])


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class _Tracker:
    """Records artifacts in order and wraps stage failures with context."""

    def __init__(self):
        self.artifacts = {}
        self.last_good = None

    def add(self, name, path):
        self.artifacts[name] = Path(path)
        self.last_good = Path(path)
        return Path(path)

    @contextlib.contextmanager
    def stage(self, name):
        log.info("stage %s", name)
        try:
            yield
        except StageError:
            raise
        except WsiScreenError as exc:
            raise StageError(name, exc, self.last_good) from exc


def save_mp_classifier(params: LinearParams, path):
    return save_params(path, "mp_classifier", params.to_dict())


def load_mp_classifier(path) -> LinearParams:
    block, t = load_params(path)
    if block != "mp_classifier":
        raise DataError(f"{path}: checkpoint block {block!r} is not an MP classifier")
    return LinearParams(t["weight"], t["bias"].ravel())


def write_predictions(path, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bag_id", "score", "label"])
        for bag_id, score, label in rows:
            w.writerow([bag_id, repr(float(score)), int(label)])
    return path


def read_predictions(path):
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"{path}: cannot read predictions ({exc.strerror})") from exc
    if not rows:
        raise DataError(f"{path}: empty predictions file")
    if rows[0] != ["bag_id", "score", "label"]:
        raise DataError(f"{path}:1: header must be bag_id,score,label")
    ids, scores, labels = [], [], []
    for lineno, r in enumerate(rows[1:], start=2):
        if not r:
            continue
        try:
            ids.append(r[0])
            scores.append(float(r[1]))
            labels.append(int(r[2]))
        except (IndexError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: malformed row {r}") from exc
    if not ids:
        raise DataError(f"{path}: no prediction rows")
    return ids, np.array(scores), np.array(labels)


def evaluate_predictions(scores, labels, out_dir, s_min=(0.90, 0.95), threshold=0.5):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = metrics_rows(scores, labels, s_min, threshold)
    metrics_path = write_metrics_csv(out_dir / "metrics.csv", rows)
    roc_path = write_roc_csv(out_dir / "roc.csv", roc_curve(scores, labels))
    return metrics_path, roc_path, rows


def _downstream(cfg: PipelineConfig, manifest, mp_params, work: Path, track: _Tracker, k, threads):
    """filter -> adapter -> extract -> MIL -> eval for one filter setting."""
    seed = cfg.seed
    summary = {}
    with track.stage("filter"):
        corpus = build_filter_corpus(
            manifest,
            mp_params,
            k=k,
            strategy=cfg.filter.strategy,
            source_fraction=cfg.filter.source_fraction,
            seed=derive_seed(seed, "filter"),
            threads=threads,
        )
        track.add("corpus", corpus.save(work / "corpus.csv"))
        summary["corpus_size"] = len(corpus)
        summary["corpus_bags"] = len(corpus.k_used)
        try:
            summary["filter_recall"] = filter_recall(corpus, manifest)
        except WsiScreenError:
            summary["filter_recall"] = None  # no synthetic sidecars

    with track.stage("train-adapter"):
        ccfg = replace(cfg.contrastive, seed=derive_seed(seed, "contrastive"))
        res = train_adapter(corpus, manifest, ccfg)
        track.add("adapter", res.adapter.save(work / "adapter.prm"))
        track.add("projection", res.projection.save(work / "projection.prm"))
        track.add("contrastive_log", res.write_log(work / "contrastive_log.csv"))

    with track.stage("extract"):
        adapter = AdapterParams.load(work / "adapter.prm")
        adapted = extract_features(adapter, manifest, work / "adapted", threads=threads)
        track.add("adapted_manifest", work / "adapted" / "manifest.csv")

    with track.stage("train-mil"):
        mcfg = replace(cfg.mil, seed=derive_seed(seed, "mil"))
        mres = train_mil(adapted.load_bags("train"), mcfg)
        track.add("mil_head", mres.head.save(work / "mil_head.prm"))
        with open(work / "mil_log.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "lr"])
            w.writerows([e, repr(loss), repr(lr)] for e, loss, lr in mres.log)
        track.add("mil_log", work / "mil_log.csv")
        summary["mil_best_epoch"] = mres.best_epoch

    with track.stage("eval"):
        head = MilHead.load(work / "mil_head.prm")
        rows = [(b.bag_id, predict(head, b.embeddings)[0], b.label) for b in adapted.load_bags("test")]
        track.add("predictions", write_predictions(work / "predictions.csv", rows))
        _, scores, labels = read_predictions(work / "predictions.csv")
        metrics_path, roc_path, metric_rows = evaluate_predictions(
            scores, labels, work, cfg.eval.s_min, cfg.eval.threshold
        )
        track.add("metrics", metrics_path)
        track.add("roc", roc_path)
    summary["metrics"] = {f"{m}|{c}" if c else m: v for m, v, c in metric_rows}
    return summary


def _write_run_manifest(cfg, work, track, summary, extra=None):
    record = {
        "version": __version__,
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "seeds": {
            "global": cfg.seed,
            **{tag: derive_seed(cfg.seed, tag) for tag in ("mp", "filter", "contrastive", "mil")},
        },
        "artifacts": {
            name: {"path": str(p.relative_to(work)), "sha256": sha256_file(p)} for name, p in track.artifacts.items()
        },
        "summary": summary,
    }
    if extra:
        record.update(extra)
    path = work / "run_manifest.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
    return path


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, (bool, np.bool_)):
        return bool(o)
    raise TypeError(f"not serializable: {type(o)}")


def train_stage1(cfg: PipelineConfig, manifest: DatasetManifest, work: Path, track: _Tracker) -> LinearParams:
    with track.stage("train-filter"):
        params = train_mp_classifier(manifest.load_bags("train"), replace(cfg.mp, seed=derive_seed(cfg.seed, "mp")))
        track.add("mp_classifier", save_mp_classifier(params, work / "mp_classifier.prm"))
    # downstream stages read the stored (float32) checkpoint, same as the standalone commands
    return load_mp_classifier(work / "mp_classifier.prm")


def run_pipeline(cfg: PipelineConfig, threads: int = 1) -> dict:
    """Run every stage under ``cfg.work_dir``; returns the run summary."""
    work = Path(cfg.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    track = _Tracker()
    with track.stage("load"):
        manifest = DatasetManifest.load(cfg.manifest)
    mp_params = None
    if cfg.filter.strategy == "mp_topk":
        mp_params = train_stage1(cfg, manifest, work, track)
    summary = _downstream(cfg, manifest, mp_params, work, track, cfg.filter.k, threads)
    _write_run_manifest(cfg, work, track, summary)
    return summary


def run_sweep_k(cfg: PipelineConfig, k_values, threads: int = 1) -> Path:
    """One downstream run per k, sharing a single stage-1 checkpoint. Writes ``sweep_k.csv``."""
    work = Path(cfg.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    track = _Tracker()
    with track.stage("load"):
        manifest = DatasetManifest.load(cfg.manifest)
    mp_params = train_stage1(cfg, manifest, work, track)
    results = []
    for k in k_values:
        if k < 1:
            raise StageError("sweep-k", DataError(f"k must be >= 1, got {k}"))
        sub = work / f"k{k}"
        sub.mkdir(exist_ok=True)
        sub_track = _Tracker()
        sub_track.add("mp_classifier", track.artifacts["mp_classifier"])
        kcfg = replace(cfg, work_dir=str(sub), filter=replace(cfg.filter, k=int(k), strategy="mp_topk"))
        summary = _downstream(kcfg, manifest, mp_params, sub, sub_track, int(k), threads)
        _write_run_manifest(kcfg, sub, _Tracker(), summary, {"k": int(k)})
        results.append((k, summary))
    path = work / "sweep_k.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "auc", "spec90", "spec95"])
        for k, s in results:
            m = s["metrics"]
            w.writerow([k, repr(m["auc"]), repr(m["specificity|sens>=0.90"]), repr(m["specificity|sens>=0.95"])])
    return path


def load_corpus(path) -> FilterCorpus:
    return FilterCorpus.load(path)
