"""Paired ablation runs: one shared initial step per seed, then each variant."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .trainer import IncrementalRun, MetricsWriter, StepReport, TrainConfig, TrainingDiverged, fork

log = logging.getLogger(__name__)

# Config overrides per variant. Rows of the component table, the
# adaptation-scheme table and the feature-distillation table, plus the
# distillation-free reference used for stability checks.
VARIANTS: dict[str, dict] = {
    "baseline": dict(background_mode="shared", lambda1=0.0, lambda2=0.0, lambda3=0.0, lambda4=0.0),
    "bga": dict(lambda1=0.0, lambda2=0.0, lambda3=0.0, lambda4=0.0),
    "bga+bfd": dict(lambda1=0.0, lambda2=0.0, lambda3=0.0),
    "bga+bfd+gkd": dict(lambda1=0.0, lambda2=0.0),
    "bga+bfd+gkd+bga_minus": dict(lambda1=0.0),
    "bga+bfd+gkd+bga_plus": dict(lambda2=0.0),
    "full": dict(),
    "mse0-nofilter": dict(bga_scheme="mse0", use_filter=False),
    "mse0": dict(bga_scheme="mse0"),
    "bce1": dict(bga_scheme="bce1"),
    "full-nofilter": dict(use_filter=False),
    "fd-none": dict(lambda4=0.0),
    "fd-kd": dict(fd_scheme="kd"),
    "fd-mse": dict(fd_scheme="mse"),
    "no-distill": dict(lambda3=0.0, lambda4=0.0, freeze_policy="none"),
}

GROUPS = ("miou_initial", "miou_incremental", "miou_all")


def variant_config(base: TrainConfig, variant: str) -> TrainConfig:
    if variant not in VARIANTS:
        raise KeyError(f"unknown variant {variant!r}; known: {', '.join(VARIANTS)}")
    return base.replace(**VARIANTS[variant])


@dataclass
class VariantResult:
    variant: str
    seed: int
    reports: list[StepReport]
    diverged: str | None = None

    @property
    def final(self) -> dict:
        """Grouped mIoU after the last step; empty when the run diverged."""
        if self.diverged or not self.reports:
            return {}
        return self.reports[-1].miou

    @property
    def max_drift(self) -> float | None:
        return max((r.old_prob_drift or 0.0 for r in self.reports), default=None)

    @property
    def first_drift(self) -> float | None:
        return self.reports[0].old_prob_drift if self.reports else None

    @property
    def max_isolation_norm(self) -> float | None:
        norms = [r.isolation_grad_norm for r in self.reports if r.isolation_grad_norm is not None]
        return max(norms) if norms else None


@dataclass
class AblationReport:
    variants: list[str]
    seeds: list[int]
    results: list[VariantResult] = field(default_factory=list)
    metrics: dict[tuple[str, int], MetricsWriter] = field(default_factory=dict)

    def get(self, variant: str, seed: int) -> VariantResult:
        for r in self.results:
            if r.variant == variant and r.seed == seed:
                return r
        raise KeyError((variant, seed))

    def table(self) -> list[dict]:
        """One row per variant: mean grouped mIoU over seeds and deltas to the first variant."""
        rows = []
        ref = None
        for v in self.variants:
            res = [self.get(v, s) for s in self.seeds]
            row = {"variant": v}
            for g in GROUPS:
                vals = [r.final.get(g) for r in res if r.final.get(g) is not None]
                row[g] = float(np.mean(vals)) if vals else None
            drifts = [r.max_drift for r in res if r.max_drift is not None]
            row["max_drift"] = float(np.mean(drifts)) if drifts else None
            row["diverged"] = sum(bool(r.diverged) for r in res)
            norms = [r.max_isolation_norm for r in res if r.max_isolation_norm is not None]
            row["isolation_norm"] = max(norms) if norms else None
            if ref is None:
                ref = row
            for g in GROUPS:
                row[f"delta_{g}"] = None if row[g] is None or ref[g] is None else row[g] - ref[g]
            rows.append(row)
        return rows

    def wins(self, better: str, worse: str, group: str, strict: bool = True) -> int:
        """Number of seeds on which ``better`` beats ``worse`` on ``group``.

        A diverged run never wins and loses to any finished one.
        """
        n = 0
        for s in self.seeds:
            a, b = self.get(better, s).final.get(group), self.get(worse, s).final.get(group)
            if a is None:
                continue
            n += b is None or (a > b if strict else a >= b)
        return n

    @property
    def diverged(self) -> list[VariantResult]:
        return [r for r in self.results if r.diverged]


def run_ablation(base: TrainConfig, variants, seeds, last_step: int | None = None) -> AblationReport:
    """Train every variant on identical data and seeds.

    The initial step does not depend on the variant, so it is trained once per
    seed and each variant continues from a copy of that model.
    """
    variants = list(variants)
    for v in variants:
        variant_config(base, v)  # reject unknown ids before any training
    report = AblationReport(variants, list(seeds))
    for seed in seeds:
        seed_cfg = base.replace(seed=seed)
        root = IncrementalRun(seed_cfg)
        root.initial_step()
        last = last_step or root.task.num_steps
        for v in variants:
            cfg = variant_config(seed_cfg, v)
            metrics = MetricsWriter()
            run = fork(root, cfg, metrics)
            diverged = None
            try:
                for t in range(2, last + 1):
                    run.incremental_step(t)
            except TrainingDiverged as exc:
                diverged = str(exc)
                log.warning("seed %d variant %s diverged: %s", seed, v, exc)
            result = VariantResult(v, seed, run.reports, diverged)
            report.results.append(result)
            report.metrics[(v, seed)] = metrics
            log.info("seed %d variant %s: %s", seed, v, {k: result.final.get(k) for k in GROUPS})
    return report
