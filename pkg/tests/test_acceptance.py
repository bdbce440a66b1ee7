"""Acceptance checks, one printed PASS/FAIL line per criterion.

Run under pytest, or directly with ``python tests/test_acceptance.py``.
"""

import functools
import itertools
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from bgadapt import gradcheck
from bgadapt import losses as L
from bgadapt import tensor as T
from bgadapt.ablation import run_ablation
from bgadapt.background import aggregate_inference, aggregate_training, filter_residual
from bgadapt.cli import main
from bgadapt.metrics import ConfusionCounts, accumulate, grouped_miou
from bgadapt.pseudo import generate_pseudo_label
from bgadapt.synthdata import TaskProtocol
from bgadapt.trainer import IncrementalRun, TrainConfig

SEEDS = [0, 1, 2, 3, 4]
ABLATION_VARIANTS = ["baseline", "bga", "full", "fd-mse", "no-distill"]
ABLATION_BUDGET = 30 * 60


def verdict(name, check):
    ok, detail = check()
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    print(line, flush=True)
    return ok, line


# -------------------------------------------------------------- gradients

def check_gradients():
    start = time.perf_counter()
    results = gradcheck.run_checks(None, seed=0, count=20)
    elapsed = time.perf_counter() - start
    names = {r.name for r in results}
    missing = [n for n in gradcheck.LOSS_CASES if n not in names]
    worst = max(r.worst for r in results)
    failed = [r.name for r in results if not r.ok]
    ok = not failed and not missing and elapsed < 60
    return ok, f"{len(results)} cases x 20 instances, worst scaled error {worst:.2e}, failed {failed or 'none'}, {elapsed:.1f}s"


# ------------------------------------------------------- filter algebra

def check_filter_algebra():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    bad = []
    for i in range(1000):
        k = int(rng.integers(1, 5))
        b1 = rng.normal(0, 3, size=(1, 6, 6)).astype(np.float32)
        adapts = [rng.normal(0, 3, size=(1, 6, 6)).astype(np.float32) for _ in range(k)]
        f = filter_residual(T.tensor(adapts[0])).data
        if not np.array_equal(filter_residual(T.tensor(f)).data, f) or (f > 0).any():
            bad.append((i, "idempotence/non-positivity"))
        mu = aggregate_inference(T.tensor(b1), [T.tensor(a) for a in adapts]).data
        fewer = aggregate_inference(T.tensor(b1), [T.tensor(a) for a in adapts[:-1]]).data
        if not (mu <= fewer).all():
            bad.append((i, "monotone suppression"))
        for perm in itertools.permutations(adapts):
            if not np.array_equal(aggregate_inference(T.tensor(b1), [T.tensor(a) for a in perm]).data, mu):
                bad.append((i, "order"))
                break
        cur = np.minimum(adapts[-1], 0)
        train = aggregate_training(T.tensor(b1), [T.tensor(a) for a in adapts[:-1]], T.tensor(cur, requires_grad=True)).data
        infer = aggregate_inference(T.tensor(b1), [T.tensor(a) for a in adapts[:-1] + [cur]]).data
        if not np.array_equal(train, infer):
            bad.append((i, "train/inference agreement"))
    elapsed = time.perf_counter() - start
    return not bad and elapsed < 10, f"1000 maps, {len(bad)} violations {bad[:3]}, {elapsed:.2f}s"


# ------------------------------------------------------ triplet hinge form

def check_triplet_form():
    phi = np.linspace(0.0, 1.0, 10_000)
    literal = np.maximum(0.0, (1.0 - phi) ** 2 - (phi - 0.0) ** 2)
    closed = np.maximum(0.0, 1.0 - 2.0 * phi)
    err_closed = float(np.abs(literal - closed).max())
    as_loss = np.array([L.bga_minus(T.tensor(np.full((1, 1, 1), p), dtype=np.float64), np.zeros((1, 1, 1))).item() for p in phi])
    err_loss = float(np.abs(as_loss - literal).max())
    return max(err_closed, err_loss) <= 1e-6, f"10^4 grid points, max |literal-closed| {err_closed:.1e}, max |literal-loss| {err_loss:.1e}"


# ---------------------------------------------------------- pseudo labels

def _oracle_label(gt, probs, tau):
    out = gt.copy()
    for i, j in np.ndindex(gt.shape):
        if gt[i, j] == 0 and probs[:, i, j].max() >= tau:
            out[i, j] = int(np.argmax(probs[:, i, j])) + 1
    return out


def check_pseudo_labels():
    wrong = 0
    cases = 0
    for tau in (0.3, 0.7, 0.99):
        hi, lo = min(tau + 0.005, 0.999), tau / 2
        for gt_val, conf, arg in itertools.product([0, 5], [True, False], range(4)):
            gt = np.full((4, 4), gt_val)
            probs = np.full((4, 4, 4), lo)
            probs[arg] = hi if conf else np.nextafter(tau, 0)
            want = gt_val if gt_val else (arg + 1 if conf else 0)
            got = generate_pseudo_label(gt, probs, tau, [5]).labels
            wrong += int(not (got == want).all()) + int(not np.array_equal(got, _oracle_label(gt, probs, tau)))
            cases += 1
    taus = np.linspace(0.05, 0.999, 15)
    non_monotone = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        gt = rng.choice([0, 0, 0, 5], size=(4, 4))
        probs = rng.uniform(size=(4, 4, 4))
        counts = [generate_pseudo_label(gt, probs, t, [5]).teacher_count() for t in taus]
        non_monotone += any(a < b for a, b in zip(counts, counts[1:]))
    return wrong == 0 and non_monotone == 0, f"{cases} branch cases over 3 thresholds, {wrong} wrong; {non_monotone}/100 scenes non-monotone"


# ------------------------------------------------------- gradient isolation

def check_isolation_toy():
    cfg = TrainConfig(protocol="4-1", num_steps=3, epochs_initial=2, epochs_incremental=2, train_count=16, val_count=8, batch_size=4)
    run = IncrementalRun(cfg)
    run.run()
    norms = [r.isolation_grad_norm for r in run.reports[1:]]
    return norms == [0.0, 0.0], f"3-step toy, old-head gradient norms at steps 2-3: {norms}"


def check_isolation_ablation(report):
    norms = [(r.variant, r.seed, r.max_isolation_norm) for r in report.results if r.max_isolation_norm is not None]
    nonzero = [n for n in norms if n[2] != 0.0]
    return bool(norms) and not nonzero, f"{len(norms)} audited ablation runs, nonzero: {nonzero or 'none'}"


# ---------------------------------------------------------------- mIoU

def _brute(pred, truth, protocol, t):
    def iou(c):
        p, g = set(np.flatnonzero(pred == c)), set(np.flatnonzero(truth == c))
        return len(p & g) / len(p | g) if p | g else None

    def mean(ids):
        vals = [v for v in map(iou, ids) if v is not None]
        return sum(vals) / len(vals)

    seen = protocol.classes_up_to(t)
    out = {"miou_initial": mean([0] + protocol.classes_of_step(1)), "miou_all": mean([0] + seen)}
    if t > 1:
        out["miou_incremental"] = mean(seen[protocol.n_initial :])
    return out


def check_miou_oracle():
    protocol = TaskProtocol.parse("4-1")
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(50):
        t = int(rng.integers(2, 6))
        k = protocol.classes_up_to(t)[-1] + 1
        truth = rng.integers(0, k, size=(3, 8, 8)).ravel()
        pred = np.where(rng.uniform(size=truth.shape) < 0.5, truth, rng.integers(0, k, size=truth.shape))
        got = grouped_miou(accumulate(ConfusionCounts.empty(k), pred, truth), protocol, t)
        for key, v in _brute(pred, truth, protocol, t).items():
            worst = max(worst, abs(got[key] - v))
    return worst <= 1e-9, f"50 random pairs, max deviation {worst:.1e}"


# ------------------------------------------------------------- ablation

@functools.lru_cache(maxsize=1)
def ablation():
    start = time.perf_counter()
    report = run_ablation(TrainConfig(), ABLATION_VARIANTS, SEEDS)
    return report, time.perf_counter() - start


def _per_seed(report, a, b, group):
    return " ".join(f"{report.get(a, s).final[group]:.3f}/{report.get(b, s).final[group]:.3f}" for s in SEEDS)


def check_component_ordering():
    report, elapsed = ablation()
    wa = report.wins("bga", "baseline", "miou_all")
    wb = report.wins("full", "bga", "miou_incremental")
    ok = wa >= 4 and wb >= 4 and elapsed < ABLATION_BUDGET
    detail = (f"adaptation beats baseline on all-class mIoU {wa}/5 [{_per_seed(report, 'bga', 'baseline', 'miou_all')}]; "
              f"full beats adaptation-only on incremental mIoU {wb}/5 [{_per_seed(report, 'full', 'bga', 'miou_incremental')}]; "
              f"{len(ABLATION_VARIANTS)} variants x 5 seeds in {elapsed / 60:.1f} min")
    return ok, detail


def check_feature_distillation():
    report, _ = ablation()
    w = report.wins("full", "fd-mse", "miou_incremental", strict=False)
    return w >= 3, f"masked distillation >= unmasked MSE on incremental mIoU {w}/5 [{_per_seed(report, 'full', 'fd-mse', 'miou_incremental')}]"


def check_stability():
    report, _ = ablation()
    pairs = [(report.get("full", s).max_drift, report.get("no-distill", s).max_drift) for s in SEEDS]
    w = sum(a < b for a, b in pairs)
    return w >= 4, f"drift with distillation below drift without {w}/5 [{' '.join(f'{a:.3f}/{b:.3f}' for a, b in pairs)}]"


# ---------------------------------------------------------- determinism

def check_determinism():
    with tempfile.TemporaryDirectory() as tmp:
        outs = [Path(tmp) / "a", Path(tmp) / "b"]
        codes = [main(["train", "--out", str(o)]) for o in outs]
        names = ["metrics.jsonl"] + sorted(p.name for p in outs[0].glob("*.ckpt"))
        differ = [n for n in names if (outs[0] / n).read_bytes() != (outs[1] / n).read_bytes()]
    ok = codes == [0, 0] and len(names) == 6 and not differ
    return ok, f"two default runs, exit codes {codes}, {len(names)} files compared, differing: {differ or 'none'}"


# ------------------------------------------------------- negative control

def _flip_gradient(fn):
    def wrapped(*args, **kwargs):
        out = fn(*args, **kwargs)
        return T._make(out.data, (out,), lambda g: (-g,))

    return wrapped


def check_negative_control():
    argv = ["grad-check", "--cases", "bga_minus", "--count", "20"]
    clean = main(argv)
    real = L.bga_minus
    L.bga_minus = _flip_gradient(real)
    try:
        broken = main(argv)
    finally:
        L.bga_minus = real
    return clean == 0 and broken == 1, f"clean exit {clean}, injected sign bug exit {broken}"


CRITERIA = [
    ("gradient correctness", check_gradients),
    ("filter and aggregation algebra", check_filter_algebra),
    ("triplet hinge simplification", check_triplet_form),
    ("pseudo-label case table", check_pseudo_labels),
    ("gradient isolation, 3-step toy", check_isolation_toy),
    ("mIoU oracle", check_miou_oracle),
    ("directional component ordering", check_component_ordering),
    ("gradient isolation, every ablation run", lambda: check_isolation_ablation(ablation()[0])),
    ("directional feature distillation", check_feature_distillation),
    ("stability of old-class probabilities", check_stability),
    ("determinism", check_determinism),
    ("negative control", check_negative_control),
]


@pytest.mark.parametrize("name,check", CRITERIA, ids=[c[0] for c in CRITERIA])
def test_criterion(name, check, capsys):
    with capsys.disabled():
        print()
        ok, line = verdict(name, check)
    assert ok, line


if __name__ == "__main__":
    results = [verdict(name, check)[0] for name, check in CRITERIA]
    print(f"{sum(results)}/{len(results)} criteria passed")
    sys.exit(0 if all(results) else 1)
