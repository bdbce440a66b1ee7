"""Command-line front end.

Exit codes: 0 success, 1 verification or run failure, 2 usage or
validation error, 3 unreadable or corrupt input.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import archive
from . import gradcheck
from . import plotting
from . import tensor as T
from .ablation import GROUPS, VARIANTS, run_ablation
from .background import filter_residual
from .metrics import background_logit
from .segnet import ConfigError
from .synthdata import DatasetError, TaskProtocol, build_split, build_validation, load_dataset, save_dataset, write_pgm
from .trainer import ConfigMismatch, IncrementalRun, MetricsWriter, TrainConfig, TrainingDiverged

log = logging.getLogger("bgadapt")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
DEFAULT_ABLATION = ("baseline", "bga", "full", "fd-mse", "no-distill")


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def git_blob_hash(data: bytes) -> str:
    """Content hash in git's blob format."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _hash_inputs(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(f for f in p.iterdir() if f.is_file()) if p.is_dir() else [p]
        for f in files:
            out[str(f)] = git_blob_hash(f.read_bytes())
    return out


def _out_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to {path}: {exc.strerror or exc}") from None
    return path


def write_manifest(out: Path, command: str, argv, *, config: TrainConfig | None = None, seed=None, inputs=(), extra=None) -> Path:
    outputs = {f.name: git_blob_hash(f.read_bytes()) for f in sorted(out.iterdir()) if f.is_file() and f.name != "manifest.json"}
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "seed": seed,
        "config": config.to_text() if config else None,
        "config_hash": config.digest() if config else None,
        "inputs": _hash_inputs(inputs),
        "outputs": outputs,
    }
    manifest.update(extra or {})
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_config(args) -> TrainConfig:
    text = ""
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise InputError(f"cannot read config {args.config}: {exc.strerror}") from None
    return TrainConfig.from_text(text, args.set or [])


def _load_model(path):
    model, meta = archive.load(path)
    return model, meta


def _tsv(rows, header) -> str:
    lines = ["\t".join(header)]
    for r in rows:
        lines.append("\t".join(_cell(r.get(h)) for h in header))
    return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _miou_row(step, miou: dict) -> dict:
    return {"step": step, **{g: miou.get(g) for g in GROUPS}}


# ----------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    try:
        protocol = TaskProtocol.parse(args.protocol)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.count < 1:
        raise UsageError("--count must be positive")
    out = _out_dir(args.out)
    canvas = (args.canvas, args.canvas)
    for t in range(1, protocol.num_steps + 1):
        ds = build_split(protocol, t, args.count, args.seed, canvas)
        save_dataset(ds, out / f"step-{t}.bin")
        classes = ",".join(map(str, protocol.classes_of_step(t)))
        print(f"step\t{t}\tscenes\t{len(ds)}\tclasses\t{classes}\tfile\tstep-{t}.bin")
        for i in range(min(args.pgm, len(ds))):
            write_pgm(out / f"step-{t}-label-{i}.pgm", ds.labels[i], 0, protocol.total_classes)
    val = build_validation(protocol, args.val_count or args.count, args.seed, canvas)
    save_dataset(val, out / "val.bin")
    print(f"validation\t-\tscenes\t{len(val)}\tclasses\t1-{protocol.total_classes}\tfile\tval.bin")
    write_manifest(
        out, "gen-data", args.argv, seed=args.seed,
        extra={"protocol": protocol.name, "num_steps": protocol.num_steps, "count": args.count, "canvas": args.canvas},
    )
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args)
    out = _out_dir(args.out)
    inputs = [p for p in (args.config, args.data, args.resume_from) if p]
    mode = "a" if args.resume_from else "w"
    with open(out / "metrics.jsonl", mode) as stream:
        metrics = MetricsWriter(stream)
        run = IncrementalRun(config, out_dir=out, data_dir=args.data, metrics=metrics)
        try:
            reports = run.run(resume_from=args.resume_from)
        except TrainingDiverged as exc:
            stream.close()
            write_manifest(out, "train", args.argv, config=config, seed=config.seed, inputs=inputs,
                           extra={"status": "diverged", "error": str(exc)})
            raise
    rows = [_miou_row(r.step, r.miou) for r in reports]
    table = _tsv(rows, ["step", *GROUPS])
    (out / "miou.tsv").write_text(table)
    final = reports[-1].miou if reports else {}
    (out / "per_class_iou.tsv").write_text(
        "class\tiou\n" + "".join(f"{c}\t{_cell(v)}\n" for c, v in enumerate(final.get("per_class_iou", [])))
    )
    plotting.loss_curves(metrics.records, out / "loss.png")
    plotting.miou_by_step(rows, out / "miou.png")
    sys.stdout.write(table)
    write_manifest(out, "train", args.argv, config=config, seed=config.seed, inputs=inputs, extra={"status": "ok"})
    return EXIT_OK


def _eval_config(args, meta: dict) -> TrainConfig:
    config = _load_config(args)
    if not args.config and not args.set:
        config = config.replace(protocol=meta.get("protocol", config.protocol), seed=meta.get("seed", 0), num_steps=meta.get("num_steps", 0))
    return config


def _eval_images(args, config: TrainConfig):
    if args.data:
        try:
            val = load_dataset(Path(args.data) / "val.bin")
        except (OSError, DatasetError) as exc:
            raise InputError(f"cannot read validation data: {exc}") from None
    else:
        val = build_validation(config.task, config.val_count, config.seed, (config.canvas, config.canvas))
    return val


def cmd_eval(args) -> int:
    model, meta = _load_model(args.checkpoint)
    config = _eval_config(args, meta)
    run = IncrementalRun(config, data_dir=args.data)
    t = model.num_steps
    if t > config.task.num_steps:
        raise UsageError(f"checkpoint has {t} steps but protocol {config.protocol} has {config.task.num_steps}")
    miou = run.evaluate(model, t)
    table = _tsv([_miou_row(t, miou)], ["step", *GROUPS])
    sys.stdout.write(table)
    for c, v in enumerate(miou["per_class_iou"]):
        sys.stdout.write(f"class\t{c}\t{_cell(v)}\n")
    if args.out:
        out = _out_dir(args.out)
        (out / "eval.tsv").write_text(table)
        write_manifest(out, "eval", args.argv, config=config, seed=config.seed, inputs=[p for p in (args.checkpoint, args.data) if p])
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _load_config(args)
    variants = args.variants.split(",") if args.variants else list(DEFAULT_ABLATION)
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants: {', '.join(unknown)}; known: {', '.join(VARIANTS)}")
    try:
        seeds = [int(s) for s in args.seeds.split(",")]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    out = _out_dir(args.out)
    report = run_ablation(config, variants, seeds)
    table = report.table()
    cols = ["variant", *GROUPS, *(f"delta_{g}" for g in GROUPS), "max_drift", "isolation_norm", "diverged"]
    text = _tsv(table, cols)
    (out / "ablation.tsv").write_text(text)
    runs = []
    for r in report.results:
        runs.append({"variant": r.variant, "seed": r.seed, **{g: r.final.get(g) for g in GROUPS}, "max_drift": r.max_drift, "isolation_norm": r.max_isolation_norm,
                     "diverged": r.diverged or ""})
    (out / "runs.tsv").write_text(_tsv(runs, ["variant", "seed", *GROUPS, "max_drift", "isolation_norm", "diverged"]))
    with open(out / "metrics.jsonl", "w") as f:
        for (v, s), m in report.metrics.items():
            for rec in m.records:
                f.write(json.dumps({"variant": v, "seed": s, **rec}) + "\n")
    plotting.ablation_bars(table, out / "ablation.png")
    sys.stdout.write(text)
    leaks = [r for r in report.results if r.max_isolation_norm]
    write_manifest(out, "ablate", args.argv, config=config, seed=seeds, inputs=[p for p in (args.config,) if p],
                   extra={"variants": variants, "isolation_violations": [(r.variant, r.seed) for r in leaks],
                          "diverged": [(r.variant, r.seed) for r in report.diverged]})
    if leaks:
        print(f"gradient isolation violated in {len(leaks)} run(s)", file=sys.stderr)
    for r in report.diverged:
        print(f"variant {r.variant} seed {r.seed} diverged: {r.diverged}", file=sys.stderr)
    if leaks or report.diverged:
        return EXIT_VERIFY
    return EXIT_OK


def cmd_grad_check(args) -> int:
    names = args.cases.split(",") if args.cases else None
    if names:
        unknown = [n for n in names if n not in gradcheck.CASES]
        if unknown:
            raise UsageError(f"unknown cases: {', '.join(unknown)}; known: {', '.join(gradcheck.CASES)}")
    if args.count < 1:
        raise UsageError("--count must be positive")
    if args.replay:
        try:
            results = [gradcheck.replay(args.replay)]
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read replay file {args.replay}: {exc}") from None
    else:
        results = gradcheck.run_checks(names, seed=args.seed, count=args.count)
    print("case\tworst_rel_err\tredraws\tstatus")
    for r in results:
        print(f"{r.name}\t{r.worst:.3e}\t{r.redraws}\t{'ok' if r.ok else 'FAIL'}")
    failed = [r for r in results if not r.ok]
    if args.out:
        out = _out_dir(args.out)
        gradcheck.dump_failures(results, out)
        write_manifest(out, "grad-check", args.argv, seed=args.seed,
                       extra={"cases": [r.name for r in results], "failed": [r.name for r in failed]})
    elif failed:
        for r in failed:
            print(json.dumps(r.failures[0]), file=sys.stderr)
    return EXIT_VERIFY if failed else EXIT_OK


def _grid_text(grid: np.ndarray) -> str:
    return "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in grid)


def cmd_dump_logits(args) -> int:
    model, meta = _load_model(args.checkpoint)
    config = _eval_config(args, meta)
    val = _eval_images(args, config)
    if not 0 <= args.image_index < len(val):
        raise UsageError(f"--image-index {args.image_index} outside 0..{len(val) - 1}")
    out = _out_dir(args.out)
    with T.no_grad():
        bundle = model.forward(T.tensor(val.images[args.image_index]))
    b1 = bundle.adapt[0].data[0]
    grids = {"b1": b1}
    total = b1.astype(np.float64)
    if model.background_mode != "shared":
        for i, a in enumerate(bundle.adapt[1:], start=2):
            part = filter_residual(a).data[0] if model.use_filter else a.data[0]
            grids[f"adapt-{i}"] = a.data[0]
            grids[f"filtered-{i}"] = part
            total = total + part
    mu_t = background_logit(model, bundle)
    mu_b = mu_t.data[0]
    if len(grids) > 1:
        grids["mu_b"] = mu_b
    grids["sigmoid_mu_b"] = T.sigmoid(mu_t).data[0]
    scales = {}
    for name, g in grids.items():
        (out / f"{name}.txt").write_text(_grid_text(g))
        lo, hi = (0.0, 1.0) if name == "sigmoid_mu_b" else (float(g.min()), float(g.max()))
        scales[name] = write_pgm(out / f"{name}.pgm", g, lo, hi)
    plotting.logit_panels(grids, out / "logits.png")
    print("grid\tmin\tmax")
    for name, g in grids.items():
        print(f"{name}\t{float(g.min()):.6g}\t{float(g.max()):.6g}")
    write_manifest(out, "dump-logits", args.argv, config=config, seed=config.seed,
                   inputs=[p for p in (args.checkpoint, args.data) if p],
                   extra={"image_index": args.image_index, "use_filter": model.use_filter, "pgm_scales": scales,
                          "max_aggregate_error": float(np.abs(total - mu_b).max())})
    return EXIT_OK


# ------------------------------------------------------------------- parser

def _add_config_flags(p):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bgadapt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic dataset files")
    p.add_argument("--protocol", default="4-1")
    p.add_argument("--count", type=int, default=96, help="scenes per step")
    p.add_argument("--val-count", type=int, default=0, help="validation scenes (default: --count)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--canvas", type=int, default=32)
    p.add_argument("--pgm", type=int, default=0, metavar="N", help="also dump the first N label maps per step")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train all steps of a configuration")
    _add_config_flags(p)
    p.add_argument("--data", help="directory written by gen-data (default: generate in memory)")
    p.add_argument("--out", required=True)
    p.add_argument("--resume-from", help="checkpoint to continue after")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="grouped mIoU of a checkpoint on the validation split")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="paired ablation over variants and seeds")
    _add_config_flags(p)
    p.add_argument("--variants", help=f"comma-separated (default: {','.join(DEFAULT_ABLATION)})")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=20, help="random instances per case")
    p.add_argument("--cases", help="comma-separated case names (default: all)")
    p.add_argument("--replay", metavar="FILE", help="re-run one recorded failure")
    p.add_argument("--out", help="directory for failure records and the manifest")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("dump-logits", help="export background logit grids for one image")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image-index", type=int, default=0)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_logits)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, DatasetError, archive.ArchiveError, OSError) as exc:
        print(f"bgadapt {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigMismatch, ConfigError, ValueError, KeyError) as exc:
        print(f"bgadapt {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"bgadapt {args.command}: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
