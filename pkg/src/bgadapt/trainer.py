"""Incremental training: head growth, teacher snapshots, loss assembly, SGD."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Sequence

import numpy as np

from . import archive
from . import losses as L
from . import tensor as T
from .background import aggregate_training
from .metrics import evaluate
from .pseudo import generate_pseudo_label
from .segnet import SegmentationModel
from .synthdata import Dataset, DatasetError, TaskProtocol, build_split, build_validation, load_dataset, restrict_labels

log = logging.getLogger(__name__)

FREEZE_POLICIES = ("auto", "none", "freeze_backbone_and_old_heads")
BGA_SCHEMES = ("ours", "mse0", "bce1")
FD_SCHEMES = ("bfd", "mse", "kd")
PROBE_SIZE = 8


class TrainingDiverged(RuntimeError):
    """A loss component became NaN or infinite."""


class ConfigMismatch(ValueError):
    """A checkpoint was produced under a different configuration."""


@dataclass
class TrainConfig:
    protocol: str = "4-1"
    num_steps: int = 0  # 0: the protocol's default step count
    lambda1: float = 1.0
    lambda2: float = 5.0
    lambda3: float = 1.0
    lambda4: float = 4.0
    tau: float = 0.7
    lr_initial: float = 0.1
    lr_incremental: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs_initial: int = 30
    epochs_incremental: int = 15
    batch_size: int = 8
    poly_power: float = 0.9
    freeze_policy: str = "auto"
    seed: int = 0
    train_count: int = 96
    val_count: int = 64
    canvas: int = 32
    background_mode: str = "adapt"
    use_filter: bool = True
    bga_scheme: str = "ours"
    fd_scheme: str = "bfd"

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.lr_initial <= 0 or self.lr_incremental <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.train_count < 1:
            raise ValueError("batch_size and train_count must be positive")
        if self.freeze_policy not in FREEZE_POLICIES:
            raise ValueError(f"freeze_policy must be one of {FREEZE_POLICIES}")
        if self.background_mode not in ("adapt", "shared"):
            raise ValueError("background_mode must be 'adapt' or 'shared'")
        if self.bga_scheme not in BGA_SCHEMES:
            raise ValueError(f"bga_scheme must be one of {BGA_SCHEMES}")
        if self.fd_scheme not in FD_SCHEMES:
            raise ValueError(f"fd_scheme must be one of {FD_SCHEMES}")
        self.weights  # validates the lambdas
        self.task

    @property
    def weights(self) -> L.LossWeights:
        return L.LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    @property
    def task(self) -> TaskProtocol:
        return TaskProtocol.parse(self.protocol, self.num_steps or None)

    @property
    def resolved_freeze(self) -> str:
        if self.freeze_policy != "auto":
            return self.freeze_policy
        distilling = self.lambda3 > 0 or self.lambda4 > 0
        return "none" if distilling else "freeze_backbone_and_old_heads"

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in dataclasses.asdict(self).items())

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_text(cls, text: str, overrides: Sequence[str] = ()) -> "TrainConfig":
        """Parse ``key=value`` lines (``#`` starts a comment), then apply overrides."""
        values = {}
        for lineno, line in enumerate(list(text.splitlines()) + list(overrides), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            values[key] = raw
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in fields:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(raw, type(getattr(cls(), key)))
        return cls(**kwargs)


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(raw, kind):
    if not isinstance(raw, str):
        return kind(raw)
    if kind is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw)


@dataclass
class StepReport:
    step: int
    epoch_losses: list[dict] = field(default_factory=list)
    miou: dict = field(default_factory=dict)
    train_miou: dict | None = None
    wall_time: float = 0.0
    checkpoint: str | None = None
    old_prob_drift: float | None = None
    isolation_grad_norm: float | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ------------------------------------------------------------------ optimizer

def poly_lr(base_lr: float, it: int, max_iter: int, power: float = 0.9) -> float:
    if max_iter <= 0:
        raise ValueError("max_iter must be positive")
    if not 0 <= it <= max_iter:
        raise ValueError(f"iteration {it} outside [0, {max_iter}]")
    return base_lr * (1 - it / max_iter) ** power


def sgd_update(params, grads, velocities, lr: float, momentum: float, weight_decay: float, masks=None) -> None:
    """In place: ``v = momentum*v + g + wd*p``; ``p -= lr*v``.

    ``masks`` optionally restricts each update to selected entries.
    """
    masks = masks if masks is not None else [None] * len(params)
    for p, g, v, m in zip(params, grads, velocities, masks):
        step = g + weight_decay * p
        if m is not None:
            step = step * m
        v *= momentum
        v += step
        p -= (lr * v).astype(p.dtype)


class SGD:
    def __init__(self, params: Sequence[T.Tensor], lr: float, momentum: float, weight_decay: float, masks=None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.masks = masks or {}
        self.velocity = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        live = [p for p in self.params if p.grad is not None]
        sgd_update(
            [p.data for p in live],
            [p.grad for p in live],
            [self.velocity[id(p)] for p in live],
            self.lr,
            self.momentum,
            self.weight_decay,
            [self.masks.get(id(p)) for p in live],
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -------------------------------------------------------------------- metrics

class MetricsWriter:
    """Line-delimited JSON records; also kept in memory."""

    def __init__(self, stream: IO[str] | None = None):
        self.stream = stream
        self.records: list[dict] = []

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.stream is not None:
            self.stream.write(json.dumps(record) + "\n")
            self.stream.flush()


# ---------------------------------------------------------------------- steps

def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _group_probs(bundle, i: int) -> T.Tensor:
    """Probabilities of head ``i``: its background/adaptation channel first, then its classes."""
    return T.sigmoid(T.concat_channels([bundle.adapt[i], bundle.class_logits[i]]))


class IncrementalRun:
    """One T-step incremental run of a configuration.

    Data comes from ``data_dir`` (files written by ``gen-data``) when given,
    otherwise it is generated in memory from the config seed.
    """

    def __init__(self, config: TrainConfig, out_dir=None, data_dir=None, metrics: MetricsWriter | None = None):
        self.config = config
        self.task = config.task
        self.out_dir = Path(out_dir) if out_dir else None
        self.data_dir = Path(data_dir) if data_dir else None
        self.metrics = metrics or MetricsWriter()
        self.model: SegmentationModel | None = None
        self.teacher: SegmentationModel | None = None
        self.reports: list[StepReport] = []
        self._val: Dataset | None = None

    # data
    def train_data(self, t: int) -> Dataset:
        if self.data_dir is not None:
            ds = load_dataset(self.data_dir / f"step-{t}.bin")
            if ds.step != t:
                raise DatasetError(f"step-{t}.bin declares step {ds.step}")
            if ds.labels.size and not np.isin(ds.labels, [0] + self.task.classes_of_step(t)).all():
                raise DatasetError(f"step-{t}.bin carries labels outside step {t}'s classes")
            return ds
        c = self.config
        return build_split(self.task, t, c.train_count, c.seed, (c.canvas, c.canvas))

    def validation(self) -> Dataset:
        if self._val is None:
            if self.data_dir is not None:
                self._val = load_dataset(self.data_dir / "val.bin")
            else:
                c = self.config
                self._val = build_validation(self.task, c.val_count, c.seed, (c.canvas, c.canvas))
        return self._val

    def evaluate(self, model: SegmentationModel, t: int) -> dict:
        val = self.validation()
        return evaluate(model, val.images, restrict_labels(val.labels, self.task.classes_up_to(t)), self.task, t)

    # steps
    def initial_step(self) -> StepReport:
        c = self.config
        start = time.perf_counter()
        self.model = SegmentationModel.create(
            self.task.n_initial, c.seed, background_mode=c.background_mode, use_filter=c.use_filter
        )
        data = self.train_data(1)
        classes = [0] + self.task.classes_of_step(1)
        model = self.model
        opt = SGD(model.parameters(), c.lr_initial, c.momentum, c.weight_decay)

        def losses(x, y, it):
            bundle = model.forward(T.tensor(x))
            pseudo = generate_pseudo_label(y, None, c.tau, classes[1:])
            phi = T.sigmoid(T.concat_channels([bundle.adapt[0], bundle.class_logits[0]]))
            return {"loss_pbbce": L.pb_bce(phi, pseudo, classes)}, {}

        report = StepReport(step=1)
        report.epoch_losses = self._optimize(1, data, opt, losses, c.epochs_initial, c.lr_initial)
        report.train_miou = evaluate(model, data.images, data.labels, self.task, 1)
        return self._finish_step(report, start)

    def incremental_step(self, t: int) -> StepReport:
        if self.model is None:
            raise RuntimeError("no previous model: run or load the earlier steps first")
        if not 2 <= t <= self.task.num_steps or self.model.num_steps != t - 1:
            raise ValueError(f"cannot train step {t} on a model with {self.model.num_steps} heads")
        c = self.config
        start = time.perf_counter()
        self.teacher = self.model.snapshot()
        teacher = self.teacher
        model = self.model
        model.background_mode = c.background_mode
        model.use_filter = c.use_filter
        novel = self.task.classes_of_step(t)
        model.add_step_head(len(novel), seed=c.seed)
        classes = [0] + novel
        weights = c.weights
        shared = c.background_mode == "shared"

        trainable, masks = self._select_trainable(model)
        opt = SGD(trainable, c.lr_incremental, c.momentum, c.weight_decay, masks)
        data = self.train_data(t)
        audit: dict = {}

        def losses(x, y, it):
            with T.no_grad():
                tb = teacher.forward(T.tensor(x))
            t_probs = np.concatenate([T.sigmoid(l).data for l in tb.class_logits], axis=1)
            pseudo = generate_pseudo_label(y, t_probs, c.tau, novel)
            sb = model.forward(T.tensor(x))
            if shared:
                mu_b = sb.adapt[0]
            else:
                mu_b = aggregate_training(
                    T.detach(sb.adapt[0]), [T.detach(a) for a in sb.adapt[1:-1]], sb.adapt[-1], c.use_filter
                )
            phi = T.sigmoid(T.concat_channels([mu_b, sb.class_logits[-1]]))
            comps = {"loss_pbbce": L.pb_bce(phi, pseudo, classes)}
            report_only = {}
            region = L.RegionMasks.from_labels(y, novel)
            if not shared:
                mu_bt = sb.adapt[-1]
                plus, minus = self._bga_terms(mu_bt, region.novel)
                for key, fn, lam in (("loss_bga_plus", plus, weights.lambda1), ("loss_bga_minus", minus, weights.lambda2)):
                    if fn is None:
                        report_only[key] = 0.0
                    elif lam > 0:
                        comps[key] = fn()
                    else:
                        with T.no_grad():
                            report_only[key] = fn().item()
            else:
                report_only["loss_bga_plus"] = report_only["loss_bga_minus"] = 0.0

            old = range(t - 1)
            distill = {
                "loss_gkd": (weights.lambda3, lambda: L.gkd([_group_probs(sb, i) for i in old], [_group_probs(tb, i) for i in old])),
                "loss_bfd": (weights.lambda4, lambda: self._feature_loss(sb, tb, t, region.complement)),
            }
            for key, (lam, fn) in distill.items():
                if lam > 0:
                    comps[key] = fn()
                else:
                    with T.no_grad():
                        report_only[key] = fn().item()

            if it == 0 and not shared:
                audit["norm"] = self._isolation_audit(model, t, comps, weights)
            return comps, report_only

        report = StepReport(step=t)
        report.epoch_losses = self._optimize(t, data, opt, losses, c.epochs_incremental, c.lr_incremental)
        report.isolation_grad_norm = audit.get("norm")
        report.old_prob_drift = self.probe_drift(model, teacher)
        return self._finish_step(report, start)

    def _select_trainable(self, model: SegmentationModel):
        policy = self.config.resolved_freeze
        masks = {}
        if policy == "none":
            trainable = model.parameters()
        else:
            trainable = model.heads[-1].parameters()
            if self.config.background_mode == "shared":
                # the shared background classifier is row n of the initial head's output layer
                out = model.heads[0].out
                n = model.heads[0].num_classes
                wmask = np.zeros_like(out.weight.data)
                wmask[n] = 1
                bmask = np.zeros_like(out.bias.data)
                bmask[n] = 1
                trainable = trainable + [out.weight, out.bias]
                masks = {id(out.weight): wmask, id(out.bias): bmask}
        model.set_trainable(False)
        for p in trainable:
            p.requires_grad = True
        return trainable, masks

    def _bga_terms(self, mu_bt, novel_region):
        scheme = self.config.bga_scheme
        if scheme == "ours":
            return (lambda: L.bga_plus(mu_bt, novel_region)), (lambda: L.bga_minus(T.sigmoid(mu_bt), novel_region))
        if scheme == "bce1":
            return (lambda: L.bga_plus(mu_bt, novel_region)), (lambda: L.bce_one(T.sigmoid(mu_bt), novel_region))
        return None, (lambda: L.mse_zero(mu_bt, novel_region))

    def _feature_loss(self, sb, tb, t: int, psi_b: np.ndarray):
        scheme = self.config.fd_scheme
        old = range(t - 1)
        if scheme == "bfd":
            return L.bfd([sb.features[i] for i in old], [tb.features[i] for i in old], psi_b)
        if scheme == "mse":
            return L.feature_mse([sb.features[i] for i in old], [tb.features[i] for i in old])
        return L.feature_mse([sb.decoder], [tb.decoder])

    @staticmethod
    def _isolation_audit(model: SegmentationModel, t: int, comps: dict, weights: L.LossWeights) -> float:
        """Gradient norm reaching old heads from the PB-BCE and BgA terms alone."""
        partial = {k: v for k, v in comps.items() if k in ("loss_pbbce", "loss_bga_plus", "loss_bga_minus")}
        loss = L.total_objective(partial, weights)
        old_params = [p for head in model.heads[: t - 1] for p in head.parameters()]
        saved = [(p, p.grad) for p in model.parameters()]
        model.zero_grad()
        T.backward(loss)
        norm = float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in old_params if p.grad is not None)))
        for p, g in saved:
            p.grad = g
        return norm

    def _optimize(self, t: int, data: Dataset, opt: SGD, loss_fn, epochs: int, base_lr: float) -> list[dict]:
        c = self.config
        rng = np.random.default_rng([c.seed, t, 7])
        per_epoch = -(-len(data) // c.batch_size)
        max_iter = epochs * per_epoch
        it = 0
        epoch_losses = []
        for epoch in range(epochs):
            sums: dict[str, float] = {}
            for idx in _batches(len(data), c.batch_size, rng):
                opt.lr = poly_lr(base_lr, it, max_iter, c.poly_power)
                x = data.images[idx]
                y = data.labels[idx].astype(np.int64)
                comps, report_only = loss_fn(x, y, it)
                total = L.total_objective(comps, c.weights)
                values = {k: v.item() for k, v in comps.items()}
                values.update(report_only)
                values["loss_total"] = total.item()
                for key, val in values.items():
                    if not np.isfinite(val):
                        raise TrainingDiverged(f"step {t} iteration {it}: {key} is {val}")
                opt.zero_grad()
                T.backward(total)
                opt.step()
                record = {"kind": "iter", "step": t, "epoch": epoch, "iter": it, "lr": opt.lr}
                record.update({k: values[k] for k in L.LOSS_KEYS if k in values})
                self.metrics.write(record)
                for k in L.LOSS_KEYS:
                    if k in values:
                        sums[k] = sums.get(k, 0.0) + values[k]
                it += 1
            epoch_losses.append({k: v / per_epoch for k, v in sums.items()})
        opt.zero_grad()
        return epoch_losses

    def probe_drift(self, model: SegmentationModel, teacher: SegmentationModel) -> float:
        """L-infinity gap between student and teacher old-class probabilities on a probe batch."""
        probe = self.validation().images[:PROBE_SIZE]
        with T.no_grad():
            s = model.forward(T.tensor(probe))
            q = teacher.forward(T.tensor(probe))
        gaps = [np.abs(T.sigmoid(a).data - T.sigmoid(b).data).max() for a, b in zip(s.class_logits, q.class_logits)]
        return float(max(gaps))

    def _finish_step(self, report: StepReport, start: float) -> StepReport:
        t = report.step
        self.model.zero_grad()
        report.miou = self.evaluate(self.model, t)
        self.metrics.write({"kind": "eval", "step": t, **{k: v for k, v in report.miou.items()}})
        if self.out_dir is not None:
            path = self.out_dir / f"step-{t}.ckpt"
            self.save_checkpoint(path, t)
            report.checkpoint = str(path)
        report.wall_time = time.perf_counter() - start
        self.reports.append(report)
        log.info("step %d done in %.1fs: %s", t, report.wall_time, {k: v for k, v in report.miou.items() if k != "per_class_iou"})
        return report

    # checkpoints
    def checkpoint_meta(self, t: int) -> dict:
        c = self.config
        return {"config_hash": c.digest(), "step_index": t, "protocol": self.task.name, "seed": c.seed, "num_steps": self.task.num_steps}

    def save_checkpoint(self, path, t: int) -> None:
        archive.save(self.model, path, self.checkpoint_meta(t))

    def load_checkpoint(self, path) -> int:
        model, meta = archive.load(path)
        if meta.get("config_hash") != self.config.digest():
            raise ConfigMismatch(f"{path} was trained under a different configuration")
        t = int(meta["step_index"])
        if model.num_steps != t:
            raise archive.ArchiveError(f"{path} declares step {t} but holds {model.num_steps} heads")
        self.model = model
        return t

    def run(self, resume_from=None) -> list[StepReport]:
        first = 1
        if resume_from is not None:
            first = self.load_checkpoint(resume_from) + 1
        else:
            self.initial_step()
        for t in range(max(first, 2), self.task.num_steps + 1):
            self.incremental_step(t)
        return self.reports


def run_initial_step(config: TrainConfig, **kwargs) -> StepReport:
    return IncrementalRun(config, **kwargs).initial_step()


def run_incremental_step(config: TrainConfig, t: int, prev_checkpoint, **kwargs) -> StepReport:
    run = IncrementalRun(config, **kwargs)
    loaded = run.load_checkpoint(prev_checkpoint)
    if loaded != t - 1:
        raise ValueError(f"checkpoint holds step {loaded}, expected {t - 1}")
    return run.incremental_step(t)


def fork(run: IncrementalRun, config: TrainConfig, metrics: MetricsWriter | None = None) -> IncrementalRun:
    """A new run continuing from ``run``'s current model under ``config``."""
    child = IncrementalRun(config, metrics=metrics)
    child.model = copy.deepcopy(run.model)
    child.model.background_mode = config.background_mode
    child.model.use_filter = config.use_filter
    child._val = run._val
    return child
