"""Finite-difference verification of reverse-mode gradients.

Each case builds float64 inputs from a seed and a scalar function of them.
Analytic gradients from ``backward`` are compared with central differences
(step ``H``). An element passes when ``|a - n| <= TOL * max(|a|, |n|, 0.01)``,
i.e. relative error 1e-3, relaxing to absolute error 1e-5 near zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import background as B
from . import losses as L
from . import tensor as T
from .pseudo import generate_pseudo_label
from .segnet import ModelConfig, SegmentationModel

H = 1e-3
TOL = 1e-3
FLOOR = 1e-2


@dataclass
class Case:
    inputs: dict[str, np.ndarray]
    fn: Callable[[dict[str, T.Tensor]], T.Tensor]
    wrt: tuple[str, ...]


@dataclass
class CaseResult:
    name: str
    worst: float = 0.0
    redraws: int = 0
    failures: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def _away(rng, shape, margin=0.1, scale=2.0):
    """Random values with magnitude in [margin, scale]: keeps kinks outside the difference stencil."""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, scale, size=shape)


def _probe(rng, shape):
    return rng.normal(size=shape)


def _weighted(out: T.Tensor, w: np.ndarray) -> T.Tensor:
    return T.sum(out * w)


# -- primitive cases ---------------------------------------------------------

def _binary(op):
    def build(rng):
        shape = (2, 3, 4)
        w = _probe(rng, shape)
        return Case({"a": rng.normal(size=shape), "b": rng.normal(size=shape)}, lambda t: _weighted(op(t["a"], t["b"]), w), ("a", "b"))

    return build


def _unary(op, sample=None):
    def build(rng):
        shape = (2, 4, 4)
        w = _probe(rng, shape)
        x = sample(rng, shape) if sample else rng.normal(size=shape)
        return Case({"x": x}, lambda t: _weighted(op(t["x"]), w), ("x",))

    return build


def _scalar_ops(rng):
    w = _probe(rng, (3, 4))
    return Case({"x": rng.normal(size=(3, 4))}, lambda t: _weighted(t["x"] * 2.5 + 1.5 - 0.5 * t["x"], w), ("x",))


def _conv(shape_in, shape_w, stride=1):
    def build(rng):
        x = rng.normal(size=shape_in)
        wt = rng.normal(size=shape_w) * 0.5
        b = rng.normal(size=shape_w[0])
        probe = None

        def fn(t):
            nonlocal probe
            out = T.conv2d(t["x"], t["w"], t["b"], stride=stride)
            if probe is None:
                probe = np.random.default_rng(int(rng.integers(1 << 31))).normal(size=out.shape)
            return _weighted(out, probe)

        return Case({"x": x, "w": wt, "b": b}, fn, ("x", "w", "b"))

    return build


def _reduce(kind):
    def build(rng):
        x = rng.normal(size=(2, 4, 4))
        if kind == "sum":
            return Case({"x": x}, lambda t: T.sum(T.square(t["x"])), ("x",))
        if kind == "mean":
            return Case({"x": x}, lambda t: T.mean(T.square(t["x"])), ("x",))
        mask = (rng.uniform(size=(1, 4, 4)) < 0.5).astype(float)
        mask[0, 0, 0] = 1
        return Case({"x": x}, lambda t: T.masked_mean(T.square(t["x"]), mask), ("x",))

    return build


def _stack_sum(rng):
    w = _probe(rng, (2, 3, 3))
    inputs = {f"p{i}": rng.normal(size=(2, 3, 3)) for i in range(3)}
    return Case(inputs, lambda t: _weighted(T.stack_sum([t["p0"], t["p1"], t["p2"]]), w), tuple(inputs))


def _maxpool(rng):
    # a permutation keeps every 2x2 window free of ties
    x = rng.permutation(2 * 4 * 4).reshape(2, 4, 4) * 0.1 + rng.uniform(0, 0.01, size=(2, 4, 4))
    w = _probe(rng, (2, 2, 2))
    return Case({"x": x}, lambda t: _weighted(T.maxpool2(t["x"]), w), ("x",))


def _upsample(rng):
    w = _probe(rng, (2, 6, 6))
    return Case({"x": rng.normal(size=(2, 3, 3))}, lambda t: _weighted(T.nearest_upsample2(t["x"]), w), ("x",))


def _concat(rng):
    w = _probe(rng, (5, 3, 3))
    return Case(
        {"a": rng.normal(size=(2, 3, 3)), "b": rng.normal(size=(3, 3, 3))},
        lambda t: _weighted(T.concat_channels([t["a"], t["b"]]), w),
        ("a", "b"),
    )


def _slice(rng):
    w = _probe(rng, (2, 3, 3))
    return Case({"x": rng.normal(size=(4, 3, 3))}, lambda t: _weighted(T.slice_channels(t["x"], 1, 3), w), ("x",))


def _detach(rng):
    # differences see through detach by construction, so only y is compared;
    # the cut on x is exercised by unit tests
    return Case(
        {"x": rng.normal(size=(3, 3)), "y": rng.normal(size=(3, 3))},
        lambda t: T.sum(T.detach(t["x"]) * t["y"]) + T.sum(T.square(t["y"]) * t["x"]),
        ("y",),
    )


def _reuse(rng):
    w = _probe(rng, (3, 4))
    return Case({"x": rng.normal(size=(3, 4))}, lambda t: _weighted(t["x"] * t["x"] + T.sigmoid(t["x"]) * t["x"], w), ("x",))


def _composite(rng):
    x = _away(rng, (2, 4, 4))
    wt = rng.normal(size=(3, 2, 3, 3)) * 0.5
    b = rng.normal(size=3)
    probe = _probe(rng, (3, 4, 4))
    return Case(
        {"x": x, "w": wt, "b": b},
        lambda t: _weighted(T.sigmoid(T.conv2d(T.relu(t["x"]), t["w"], t["b"])), probe),
        ("x", "w", "b"),
    )


def _model(rng):
    cfg = ModelConfig(enc_widths=(2, 3), feat_width=3, head_width=4)
    model = SegmentationModel.create(2, seed=int(rng.integers(1 << 30)), config=cfg)
    model.add_step_head(1, seed=1)
    for p in model.parameters():
        p.data = (rng.normal(size=p.shape) * 0.5).astype(np.float64)
        p.requires_grad = False
    image = rng.uniform(0, 1, size=(3, 4, 4))
    hidden_w = model.heads[1].hidden.weight.data.copy()
    probe = _probe(rng, (1, 4, 4))

    def fn(t):
        model.heads[1].hidden.weight = t["hidden"]
        bundle = model.forward(t["image"])
        mu_b = B.aggregate_inference(bundle.adapt[0], bundle.adapt[1:], use_filter=False)
        return _weighted(T.sigmoid(mu_b), probe)

    return Case({"image": image, "hidden": hidden_w}, fn, ("image", "hidden"))


# -- loss cases --------------------------------------------------------------

def _labels(rng, shape, ids):
    return rng.choice(ids, size=shape)


def _pb_bce(rng):
    n, h, w = 2, 4, 4
    b1 = _away(rng, (n, 1, h, w))
    old = _away(rng, (n, 1, h, w))
    gt = _labels(rng, (n, h, w), [0, 0, 3, 4])
    teacher = rng.uniform(0.05, 0.95, size=(n, 2, h, w))
    pseudo = generate_pseudo_label(gt, teacher, 0.7, [3, 4])

    def fn(t):
        mu_b = B.aggregate_training(T.tensor(b1, dtype=np.float64), [T.tensor(old, dtype=np.float64)], t["adapt"])
        phi = T.sigmoid(T.concat_channels([mu_b, t["logits"]]))
        return L.pb_bce(phi, pseudo, [0, 3, 4])

    return Case({"adapt": _away(rng, (n, 1, h, w)), "logits": rng.normal(size=(n, 2, h, w))}, fn, ("adapt", "logits"))


def _region(rng, shape):
    r = (rng.uniform(size=shape) < 0.4).astype(float)
    r.flat[0], r.flat[-1] = 1, 0
    return r


def _bga_plus(rng):
    region = _region(rng, (2, 1, 4, 4))
    return Case({"mu": rng.normal(size=(2, 1, 4, 4)) * 2}, lambda t: L.bga_plus(t["mu"], region), ("mu",))


def _bga_minus(rng):
    region = _region(rng, (2, 1, 4, 4))
    return Case({"mu": _away(rng, (2, 1, 4, 4))}, lambda t: L.bga_minus(T.sigmoid(t["mu"]), region), ("mu",))


def _gkd(rng):
    shapes = [(2, 3, 4, 4), (2, 2, 4, 4)]
    teacher = [rng.uniform(0.02, 0.98, size=s) for s in shapes]
    inputs = {f"s{i}": rng.normal(size=s) for i, s in enumerate(shapes)}
    return Case(inputs, lambda t: L.gkd([T.sigmoid(t["s0"]), T.sigmoid(t["s1"])], teacher), tuple(inputs))


def _bfd(rng):
    shapes = [(2, 3, 4, 4), (2, 3, 4, 4)]
    teacher = [rng.normal(size=s) for s in shapes]
    mask = 1 - _region(rng, (2, 1, 4, 4))
    inputs = {f"f{i}": rng.normal(size=s) for i, s in enumerate(shapes)}
    return Case(inputs, lambda t: L.bfd([t["f0"], t["f1"]], teacher, mask), tuple(inputs))


def _total(rng):
    region = _region(rng, (1, 1, 4, 4))
    teacher = [rng.uniform(0.05, 0.95, size=(1, 2, 4, 4))]
    feats_t = [rng.normal(size=(1, 3, 4, 4))]

    def fn(t):
        mu = t["mu"]
        comps = {
            "loss_bga_plus": L.bga_plus(mu, region),
            "loss_bga_minus": L.bga_minus(T.sigmoid(mu), region),
            "loss_gkd": L.gkd([T.sigmoid(t["old"])], teacher),
            "loss_bfd": L.bfd([t["feat"]], feats_t, 1 - region),
        }
        return L.total_objective(comps, L.LossWeights())

    inputs = {"mu": _away(rng, (1, 1, 4, 4)), "old": rng.normal(size=(1, 2, 4, 4)), "feat": rng.normal(size=(1, 3, 4, 4))}
    return Case(inputs, fn, tuple(inputs))


CASES: dict[str, Callable[[np.random.Generator], Case]] = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "neg": _unary(T.neg),
    "square": _unary(T.square),
    "scalar_ops": _scalar_ops,
    "sigmoid": _unary(T.sigmoid, lambda r, s: r.normal(size=s) * 3),
    "clamp_nonpositive": _unary(T.clamp_nonpositive, _away),
    "hinge": _unary(T.hinge, _away),
    "relu": _unary(T.relu, _away),
    "log": _unary(T.log, lambda r, s: r.uniform(0.2, 3, size=s)),
    "log_guarded": _unary(lambda x: T.log(x, guard=True), lambda r, s: r.uniform(0.2, 3, size=s)),
    "conv2d": _conv((2, 4, 4), (3, 2, 3, 3)),
    "conv2d_batched": _conv((2, 2, 5, 5), (2, 2, 3, 3)),
    "conv2d_1x1": _conv((2, 3, 4, 4), (4, 3, 1, 1)),
    "conv2d_stride2": _conv((1, 2, 6, 6), (2, 2, 3, 3), stride=2),
    "sum": _reduce("sum"),
    "mean": _reduce("mean"),
    "masked_mean": _reduce("masked_mean"),
    "stack_sum": _stack_sum,
    "maxpool2": _maxpool,
    "nearest_upsample2": _upsample,
    "concat_channels": _concat,
    "slice_channels": _slice,
    "detach": _detach,
    "reuse": _reuse,
    "composite": _composite,
    "model": _model,
    "pb_bce": _pb_bce,
    "bga_plus": _bga_plus,
    "bga_minus": _bga_minus,
    "gkd": _gkd,
    "bfd": _bfd,
    "total_objective": _total,
}

LOSS_CASES = ("pb_bce", "bga_plus", "bga_minus", "gkd", "bfd", "total_objective")


def _evaluate(case: Case, arrays: dict[str, np.ndarray]) -> float:
    with T.no_grad():
        return case.fn({k: T.tensor(v, dtype=np.float64) for k, v in arrays.items()}).item()


def numeric_grad(case: Case, name: str, h: float = H) -> np.ndarray:
    arrays = {k: v.copy() for k, v in case.inputs.items()}
    x = arrays[name]
    grad = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + h
        up = _evaluate(case, arrays)
        x.flat[i] = orig - h
        down = _evaluate(case, arrays)
        x.flat[i] = orig
        grad.flat[i] = (up - down) / (2 * h)
    return grad


def analytic_grads(case: Case) -> dict[str, np.ndarray]:
    tensors = {k: T.tensor(v, requires_grad=k in case.wrt, dtype=np.float64) for k, v in case.inputs.items()}
    loss = case.fn(tensors)
    T.backward(loss)
    return {k: (tensors[k].grad if tensors[k].grad is not None else np.zeros_like(case.inputs[k])) for k in case.wrt}


def scaled_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FLOOR)


def _kinked(case: Case, name: str, coarse: np.ndarray, tol: float) -> bool:
    """True when the difference quotient itself is unstable (a kink sits inside the stencil)."""
    fine = numeric_grad(case, name, H / 10)
    return bool(scaled_error(coarse, fine).max() > tol)


def check_case(name: str, seeds, tol: float = TOL, max_redraws: int = 10) -> CaseResult:
    """Compare analytic and numeric gradients on one instance per seed.

    An instance whose central differences disagree with themselves at a
    ten times smaller step straddles a non-differentiable point; it is
    redrawn rather than scored.
    """
    build = CASES[name]
    result = CaseResult(name)
    for seed in seeds:
        for attempt in range(max_redraws + 1):
            case = build(np.random.default_rng([seed, sum(map(ord, name)), attempt]))
            got = analytic_grads(case)
            numeric = {k: numeric_grad(case, k) for k in case.wrt}
            errors = {k: float(scaled_error(got[k], numeric[k]).max()) for k in case.wrt}
            if attempt < max_redraws and any(errors[k] > tol and _kinked(case, k, numeric[k], tol) for k in case.wrt):
                result.redraws += 1
                continue
            break
        for key in case.wrt:
            err = errors[key]
            result.worst = max(result.worst, err)
            if err > tol:
                result.failures.append(
                    {
                        "case": name,
                        "seed": int(seed),
                        "attempt": attempt,
                        "input": key,
                        "error": err,
                        "inputs": {k: v.tolist() for k, v in case.inputs.items()},
                        "analytic": got[key].tolist(),
                        "numeric": numeric[key].tolist(),
                    }
                )
    return result


def run_checks(names=None, seed: int = 0, count: int = 20, tol: float = TOL) -> list[CaseResult]:
    names = list(CASES) if not names else list(names)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise KeyError(f"unknown grad-check cases: {', '.join(unknown)}")
    seeds = range(seed, seed + count)
    return [check_case(n, seeds, tol) for n in names]


def dump_failures(results: list[CaseResult], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in results:
        for f in r.failures:
            path = out_dir / f"gradcheck-failure-{f['case']}-{f['seed']}-{f['input']}.json"
            path.write_text(json.dumps(f))
            paths.append(path)
    return paths


def replay(path) -> CaseResult:
    """Re-run the exact instance recorded in a failure file."""
    rec = json.loads(Path(path).read_text())
    name = rec["case"]
    if name not in CASES:
        raise KeyError(f"unknown grad-check case {name!r}")
    case = CASES[name](np.random.default_rng([rec["seed"], sum(map(ord, name)), rec["attempt"]]))
    got = analytic_grads(case)
    result = CaseResult(name)
    for key in case.wrt:
        err = float(scaled_error(got[key], numeric_grad(case, key)).max())
        result.worst = max(result.worst, err)
        if err > TOL:
            result.failures.append({"case": name, "seed": rec["seed"], "attempt": rec["attempt"], "input": key, "error": err})
    return result
