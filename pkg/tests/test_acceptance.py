"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Criteria 7 to 10 share one synthetic benchmark built from ``configs/synth_benchmark.yaml``
and run with ``configs/desk.yaml`` (paths rewritten into a temp dir).
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from wsiscreen.cli import main
from wsiscreen.contrastive import AdapterParams, ProjectionParams, contrastive_loss_and_grad, project
from wsiscreen.dataset import DatasetManifest, SyntheticSpec, generate_synthetic
from wsiscreen.metrics import auc, roc_curve
from wsiscreen.mil import AttentionParams, MilHead, head_loss_and_grad, predict
from wsiscreen.mp_filter import select_topk
from wsiscreen.nn import (
    LinearParams,
    activation,
    activation_backward,
    bce_loss,
    grad_check,
    info_nce_loss,
    linear_backward,
    linear_forward,
)

CONFIGS = Path(__file__).parents[1] / "configs"
GRAD_TOL = 1e-4
GRAD_SEEDS = 20
KINK_MARGIN = 0.05


# ---------------------------------------------------------------- oracles


def pair_count_auc(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos, neg = s[y == 1], s[y == 0]
    gt = np.sum(pos[:, None] > neg[None, :])
    eq = np.sum(pos[:, None] == neg[None, :])
    return (gt + 0.5 * eq) / (len(pos) * len(neg))


def double_loop_info_nce(Z, tau):
    n = len(Z)
    norm = [math.sqrt(sum(v * v for v in z)) for z in Z]
    sim = [[sum(a * b for a, b in zip(Z[i], Z[j])) / (norm[i] * norm[j]) for j in range(n)] for i in range(n)]
    total = 0.0
    for i in range(n):
        p = i ^ 1
        den = sum(math.exp(sim[i][j] / tau) for j in range(n) if j != i)
        total += -math.log(math.exp(sim[i][p] / tau) / den)
    return total / n


def full_sort_topk(values, k):
    return [i for _, i in sorted((-v, i) for i, v in enumerate(values))[:k]]


# ---------------------------------------------------------------- gradient cases


def _random_head(kind, dim, rng, hidden):
    if kind == "gated_attention":
        s = 1 / np.sqrt(dim)
        return MilHead(
            kind,
            AttentionParams(
                rng.uniform(-s, s, (hidden, dim)),
                rng.uniform(-s, s, (hidden, dim)),
                rng.standard_normal(hidden),
                LinearParams.init(dim, 1, rng),
            ),
        )
    return MilHead(kind, LinearParams.init(dim, 1, rng))


def gradient_cases(seed):
    """Yield (op name, loss_fn, params, analytic grads) for one seed."""
    rng = np.random.default_rng(seed)
    n, d_in, d_out = (int(v) for v in rng.integers(2, 7, size=3))

    p = LinearParams.init(d_in, d_out, rng)
    x = rng.standard_normal((n, d_in))
    g = rng.standard_normal((n, d_out))
    dx, dW, db = linear_backward(p, x, g)
    yield (
        "linear",
        lambda d: float(np.sum(g * linear_forward(LinearParams(d["weight"], d["bias"]), d["x"]))),
        {"weight": p.weight, "bias": p.bias, "x": x},
        {"weight": dW, "bias": db, "x": dx},
    )

    for kind in ("sigmoid", "tanh", "relu", "softmax_over_rows"):
        a = rng.standard_normal((n, d_in))
        if kind == "relu":
            a[np.abs(a) < 0.05] += 0.1  # stay off the kink
        ga = rng.standard_normal((n, d_in))
        da = activation_backward(kind, a, activation(kind, a), ga)
        yield kind, (lambda d, kind=kind, ga=ga: float(np.sum(ga * activation(kind, d["x"])))), {"x": a}, {"x": da}

    for y in (0, 1):
        yh = float(rng.uniform(0.05, 0.95))
        yield "bce", (lambda d, y=y: bce_loss(float(d["p"][0]), y)[0]), {"p": np.array([yh])}, {"p": np.array([bce_loss(yh, y)[1]])}

    m = int(rng.integers(1, 5))
    tau = 0.5  # configured temperature
    z = rng.standard_normal((2 * m, d_in))
    yield "info_nce", (lambda d, tau=tau: info_nce_loss(d["z"], tau=tau)[0]), {"z": z}, {"z": info_nce_loss(z, tau=tau)[1]}

    bag = rng.standard_normal((int(rng.integers(1, 9)), d_in))
    bag += np.arange(len(bag))[:, None] * 0.3  # separate column maxima for the max head
    for kind in ("mean_pool", "max_pool", "gated_attention"):
        head = _random_head(kind, d_in, rng, hidden=int(rng.integers(2, 6)))
        for y in (0, 1):
            _, _, grads = head_loss_and_grad(head, bag, y)
            yield (
                kind,
                lambda d, head=head, y=y: bce_loss(predict(head.with_dict(d), bag)[0], y)[0],
                head.to_dict(),
                grads,
            )

    adapter = AdapterParams(np.eye(d_in) + 0.3 * rng.standard_normal((d_in, d_in)), 0.1 * rng.standard_normal(d_in))
    proj = ProjectionParams.init(d_in, int(rng.integers(3, 8)), int(rng.integers(2, 6)), rng)
    views = rng.standard_normal((2 * m + 2, d_in))
    # finite differences are only valid away from the ReLU kink; a 1e-3 step must not flip a unit
    while np.abs(project(adapter, proj, views)[1]).min() < KINK_MARGIN:
        views = rng.standard_normal((2 * m + 2, d_in))
    _, grads, _ = contrastive_loss_and_grad(adapter, proj, views, tau)

    def composite(d):
        a = AdapterParams(d["adapter.weight"], d["adapter.bias"])
        return contrastive_loss_and_grad(a, ProjectionParams.from_dict(d), views, tau)[0]

    yield (
        "adapter+projection",
        composite,
        {"adapter.weight": adapter.weight, "adapter.bias": adapter.bias, **proj.to_dict()},
        grads,
    )


def _worst_errors(eps):
    worst = {}
    for seed in range(GRAD_SEEDS):
        for name, fn, params, grads in gradient_cases(seed):
            worst[name] = max(worst.get(name, 0.0), grad_check(fn, params, grads, eps=eps).max_rel_error)
    return worst


def test_criterion_01_gradients(acceptance):
    start = time.perf_counter()
    worst = _worst_errors(1e-3)
    elapsed = time.perf_counter() - start
    bad = {k: f"{v:.1e}" for k, v in worst.items() if v >= GRAD_TOL}
    small_step = max(_worst_errors(1e-5).values())
    ok = not bad and elapsed < 30
    acceptance(
        1,
        ok,
        f"{len(worst)} ops x {GRAD_SEEDS} seeds at eps=1e-3, worst rel err {max(worst.values()):.2e}, {elapsed:.1f}s"
        + (f"; over tolerance: {bad}" if bad else "")
        + f"; at eps=1e-5 worst {small_step:.1e}",
    )
    assert elapsed < 30
    assert not bad, worst


def test_gradients_agree_at_small_step():
    # same cases with a step small enough that truncation error is negligible
    worst = _worst_errors(1e-5)
    assert max(worst.values()) < GRAD_TOL, worst


def test_criterion_02_info_nce_identities(acceptance, rng):
    m1 = abs(info_nce_loss(rng.standard_normal((2, 6)), tau=0.5)[0])
    m2 = abs(info_nce_loss(np.tile(rng.standard_normal(6), (4, 1)), tau=0.5)[0] - math.log(3))
    oracle, scaled = 0.0, 0.0
    for _ in range(50):
        n = 2 * int(rng.integers(1, 9))
        tau = float(rng.uniform(0.1, 2.0))
        Z = rng.standard_normal((n, int(rng.integers(2, 12))))
        base = info_nce_loss(Z, tau=tau)[0]
        oracle = max(oracle, abs(base - double_loop_info_nce(Z.tolist(), tau)))
        c = float(rng.uniform(1e-3, 1e3))
        scaled = max(scaled, abs(info_nce_loss(c * Z, tau=tau)[0] - base))
    ok = m1 <= 1e-9 and m2 <= 1e-6 and oracle <= 1e-8 and scaled <= 1e-8
    acceptance(2, ok, f"|M=1|={m1:.1e} |M=2-ln3|={m2:.1e} oracle={oracle:.1e} scale={scaled:.1e}")
    assert ok


def test_criterion_03_auc_oracle(acceptance, rng):
    mismatches, worst_area = 0, 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 501))
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))  # coarse rounding forces ties
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        a = auc(scores, labels)
        mismatches += a != pair_count_auc(scores, labels)
        worst_area = max(worst_area, abs(roc_curve(scores, labels).area() - a))
    ok = mismatches == 0 and worst_area <= 1e-9
    acceptance(3, ok, f"1000 instances, {mismatches} exact mismatches, worst ROC area gap {worst_area:.1e}")
    assert ok


def test_criterion_04_bag_label_is_or(acceptance, tmp_path):
    specs = [SyntheticSpec.from_dict({k: v for k, v in yaml.safe_load((CONFIGS / "synth_benchmark.yaml").read_text()).items() if k != "train_fraction"})]
    rng = np.random.default_rng(0)
    for s in range(20):
        lo_p = int(rng.integers(1, 4))
        hi_p = lo_p + int(rng.integers(0, 4))
        lo_n = hi_p + int(rng.integers(0, 5))
        specs.append(
            SyntheticSpec(
                n_bags=int(rng.integers(1, 40)),
                instances_per_bag=(lo_n, lo_n + int(rng.integers(0, 10))),
                dim=int(rng.integers(1, 8)),
                positive_bag_fraction=float(rng.choice([0.0, 0.3, 0.5, 1.0])),
                planted_per_positive=(lo_p, hi_p),
                separation=float(rng.uniform(0, 4)),
                seed=s,
            )
        )
    checked, wrong = 0, 0
    for i, spec in enumerate(specs):
        m = generate_synthetic(spec, tmp_path / f"d{i}")
        for e in m.entries:
            inst = m.load_instance_labels(e)
            checked += 1
            wrong += int(e.label != int(inst.any())) + int(len(inst) != m.load_bag(e).size)
    acceptance(4, wrong == 0, f"{len(specs)} datasets, {checked} bags checked, {wrong} violations")
    assert wrong == 0


def test_criterion_05_topk_oracle(acceptance, rng):
    wrong = 0
    for _ in range(1000):
        n = int(rng.integers(1, 300))
        v = np.round(rng.random(n), int(rng.integers(1, 4)))
        k = int(rng.integers(1, n + 5))
        got = select_topk(v, k)
        want = full_sort_topk(v.tolist(), k)
        wrong += set(got) != set(want) or got != want
    acceptance(5, wrong == 0, f"1000 vectors, {wrong} disagreements with the full-sort oracle")
    assert wrong == 0


def test_criterion_06_permutation_invariance(acceptance, rng):
    worst = {}
    for kind in ("mean_pool", "max_pool", "gated_attention"):
        worst[kind] = 0.0
        for _ in range(100):
            dim = int(rng.integers(1, 16))
            head = _random_head(kind, dim, rng, hidden=int(rng.integers(1, 16)))
            Z = 2 * rng.standard_normal((int(rng.integers(1, 60)), dim))
            p = predict(head, Z)[0]
            worst[kind] = max(worst[kind], abs(predict(head, Z[rng.permutation(len(Z))])[0] - p))
    ok = max(worst.values()) <= 1e-9
    acceptance(6, ok, "worst |dp| " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()))
    assert ok


# ---------------------------------------------------------------- end-to-end benchmark


def _write_config(base, root, name, **changes):
    cfg = yaml.safe_load((CONFIGS / "desk.yaml").read_text())
    cfg["paths"] = {"manifest": str(base / "manifest.csv"), "work_dir": str(root / name)}
    for section, value in changes.items():
        if isinstance(value, dict):
            cfg[section].update(value)
        else:
            cfg[section] = value
    path = root / f"{name}.yaml"
    path.write_text(yaml.safe_dump(cfg), encoding="utf-8")
    return path


def _run(path):
    assert main(["pipeline", str(path), "--threads", "1"]) == 0
    work = Path(yaml.safe_load(path.read_text())["paths"]["work_dir"])
    return json.loads((work / "run_manifest.json").read_text())["summary"], work


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    root = tmp_path_factory.mktemp("benchmark")
    start = time.perf_counter()
    assert main(["synth", str(CONFIGS / "synth_benchmark.yaml"), "--out", str(root / "data")]) == 0
    cfg = _write_config(root / "data", root, "desk")
    summary, work = _run(cfg)
    elapsed = time.perf_counter() - start
    return {"root": root, "config": cfg, "summary": summary, "work": work, "elapsed": elapsed}


@pytest.mark.slow
def test_criterion_07_end_to_end(acceptance, benchmark):
    m = benchmark["summary"]["metrics"]
    test_auc = m["auc"]
    s90, s95 = m["specificity|sens>=0.90"], m["specificity|sens>=0.95"]
    ok = test_auc >= 0.95 and s95 <= s90 and benchmark["elapsed"] < 300
    acceptance(
        7,
        ok,
        f"test AUC {test_auc:.4f} (need >= 0.95), spec@0.95 {s95:.3f} <= spec@0.90 {s90:.3f}, "
        f"{benchmark['elapsed']:.1f}s",
    )
    assert s95 <= s90
    assert benchmark["elapsed"] < 300
    assert test_auc >= 0.95


@pytest.mark.slow
def test_criterion_08_filter_recall(acceptance, benchmark):
    recall = benchmark["summary"]["filter_recall"]
    # cross-check the recorded value from the corpus file and the label sidecars
    m = DatasetManifest.load(benchmark["root"] / "data" / "manifest.csv")
    lines = (benchmark["work"] / "corpus.csv").read_text(encoding="utf-8").splitlines()[2:]
    chosen = {}
    for line in lines:
        bag, idx = line.split(",")[:2]
        chosen.setdefault(bag, set()).add(int(idx))
    hit = total = 0
    for e in m.select("train"):
        if e.label == 1 and e.bag_id in chosen:
            planted = set(np.flatnonzero(m.load_instance_labels(e)).tolist())
            hit += len(planted & chosen[e.bag_id])
            total += len(planted)
    assert recall == pytest.approx(hit / total, abs=1e-12)
    ok = recall >= 0.90
    acceptance(8, ok, f"recall {recall:.4f} ({hit}/{total} planted instances, need >= 0.90)")
    assert ok


@pytest.mark.slow
def test_criterion_09_mp_beats_random(acceptance, benchmark):
    root = benchmark["root"]
    mp, rnd = [], []
    for seed in range(7, 12):
        if seed == 7:
            mp.append(benchmark["summary"]["metrics"]["auc"])
        else:
            mp.append(_run(_write_config(root / "data", root, f"mp{seed}", seed=seed))[0]["metrics"]["auc"])
        rnd.append(
            _run(_write_config(root / "data", root, f"rnd{seed}", seed=seed, filter={"strategy": "random"}))[0][
                "metrics"
            ]["auc"]
        )
    ok = np.mean(mp) >= np.mean(rnd)
    acceptance(
        9,
        ok,
        f"mean test AUC over seeds 7-11: MP top-k {np.mean(mp):.4f} vs random {np.mean(rnd):.4f} "
        f"(per seed MP {[round(a, 3) for a in mp]}, random {[round(a, 3) for a in rnd]})",
    )
    assert ok


@pytest.mark.slow
def test_criterion_10_determinism(acceptance, benchmark):
    first = (benchmark["work"] / "metrics.csv").read_bytes()
    _run(benchmark["config"])
    same = (benchmark["work"] / "metrics.csv").read_bytes() == first
    acceptance(10, same, "rerun metrics.csv " + ("bit-identical" if same else "differs"))
    assert same
