"""Command-line entry point for decomposition, composition, and reporting.

Exit codes: 0 success, 1 runtime/validation failure, 2 usage error.
Reports go to stdout, progress/log lines to stderr; ``--out BASE`` writes the
machine-readable report (``BASE.txt`` + ``BASE.csv``) and ``--figures`` adds
PNG charts next to it.
"""
from __future__ import annotations

import argparse
import os
import sys
import time

from . import __version__
from .compose import (
    VOTE_MODES, VOTE_PROB, ModuleLabel, ModuleSet, continual_update,
    remove as set_remove, replace as set_replace, reuse as set_reuse,
    verify_with_modules,
)
from .errors import CnnDecompError, ValidationError
from .graph import LabeledDataset, load_dataset, load_model, model_fingerprint
from .metrics import PowerLog, co2e, evaluate, jaccard
from .modularize import (
    PIPELINE_BI, PIPELINE_BLN, PIPELINE_MC, build_module, load_module, save_module,
)
from .report import format_report, write_report
from .scenario import load_models_by_hash, parse_scenario, realize_scenario, write_set_manifest

PIPELINE_FLAGS = {"mc": PIPELINE_MC, "bln": PIPELINE_BLN, "bi": PIPELINE_BI}


def default_jobs() -> int:
    env = os.environ.get("CONCERN_JOBS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationError(f"CONCERN_JOBS must be an integer, got {env!r}")
    return os.cpu_count() or 1


def resolve_jobs(args) -> int:
    # CONCERN_JOBS wins over --jobs when both are given
    env = os.environ.get("CONCERN_JOBS")
    if env:
        return default_jobs()
    return max(1, args.jobs) if args.jobs else (os.cpu_count() or 1)


def log(message: str) -> None:
    print(message, file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cnndecomp",
        description="Decompose a trained CNN into per-class binary modules and "
                    "recompose them without retraining.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", help="build one module per class")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="training dataset (.cnnds)")
    p.add_argument("--classes", default="all", help="'all' or comma-separated class ids")
    p.add_argument("--pipeline", choices=sorted(PIPELINE_FLAGS), default="bln")
    p.add_argument("--delta", type=float, default=0.5,
                   help="dense backtracking threshold (default 0.5)")
    p.add_argument("--swap-bln-sign", action="store_true",
                   help="swap the concerned/unconcerned roles in the first "
                        "backtracking pass")
    p.add_argument("--n-inputs", type=int, default=500,
                   help="concerned training inputs to observe per class")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--jobs", type=int, default=0)

    for name in ("compose", "eval"):
        p = sub.add_parser(name, help="evaluate a composed module set")
        _add_set_args(p)
        p.add_argument("--scenario", help="scenario description file")
        _add_eval_args(p)

    p = sub.add_parser("reuse", help="build a new classifier from selected modules")
    _add_set_args(p)
    p.add_argument("--select", nargs="+", required=True, metavar="DATASET:CLASS")
    p.add_argument("--continual", action="store_true",
                   help="refresh each module with the other selected classes' "
                        "training examples before composing")
    p.add_argument("--train-data", nargs="*", default=[],
                   help="training datasets supplying continual-learning examples")
    p.add_argument("--cl-direction", choices=("reinstate", "remove"), default="reinstate")
    p.add_argument("--set-manifest", help="write the resulting set manifest here")
    _add_eval_args(p)

    p = sub.add_parser("replace", help="swap one module and re-evaluate")
    _add_set_args(p)
    p.add_argument("--label", required=True, metavar="DATASET:CLASS")
    p.add_argument("--with", dest="replacement", required=True,
                   help="replacement module file")
    p.add_argument("--set-manifest")
    _add_eval_args(p)

    p = sub.add_parser("remove", help="drop one module and re-evaluate")
    _add_set_args(p)
    p.add_argument("--label", required=True, metavar="DATASET:CLASS")
    p.add_argument("--set-manifest")
    _add_eval_args(p)

    p = sub.add_parser("verify", help="re-check watched model predictions with modules")
    _add_set_args(p)
    p.add_argument("--watch", nargs="+", required=True, metavar="DATASET:CLASS")
    _add_eval_args(p)

    p = sub.add_parser("continual", help="update one module with foreign examples")
    p.add_argument("--module", required=True)
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--foreign-data", required=True)
    p.add_argument("--foreign-class", type=int, required=True)
    p.add_argument("--direction", choices=("reinstate", "remove"), default="reinstate")
    p.add_argument("--out", required=True, help="path for the updated module")

    p = sub.add_parser("jaccard", help="Jaccard index of one module vs its model")
    p.add_argument("--module", required=True)
    p.add_argument("--model", required=True)

    p = sub.add_parser("co2e", help="energy + CO2e estimate from a power log")
    p.add_argument("--log", required=True, help="CSV: t_seconds,p_cpu_w,p_dram_w,p_gpu_w")
    p.add_argument("--hours", type=float, required=True, help="wall time t in hours")
    p.add_argument("--gpu-cores", type=int, default=0)
    p.add_argument("--baseline-cpu", type=float, default=0.0,
                   help="background CPU watts to subtract")
    p.add_argument("--baseline-dram", type=float, default=0.0)
    return parser


def _add_set_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--models", nargs="*", default=[], help="model files (.cnnmod)")
    p.add_argument("--modules", nargs="*", default=[], help="module files (.cnnmodule)")
    p.add_argument("--data", nargs="*", default=[], help="test datasets (.cnnds)")


def _add_eval_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--vote", choices=VOTE_MODES, default=VOTE_PROB)
    p.add_argument("--out", help="report base path (writes BASE.txt and BASE.csv)")
    p.add_argument("--figures", action="store_true",
                   help="also render PNG charts next to the report")
    p.add_argument("--jobs", type=int, default=0)


def _load_set(args) -> ModuleSet:
    if getattr(args, "scenario", None):
        return realize_scenario(parse_scenario(args.scenario))
    if not args.modules:
        raise ValidationError("no modules given (use --modules or --scenario)")
    models = load_models_by_hash(args.models)
    return ModuleSet(modules=[load_module(p, models) for p in args.modules])


def _load_datasets(paths: list[str]) -> list[LabeledDataset]:
    if not paths:
        raise ValidationError("no evaluation dataset given (use --data)")
    return [load_dataset(p) for p in paths]


def _filter_covered(mset: ModuleSet, datasets: list[LabeledDataset]) -> list[LabeledDataset]:
    """Keep only the examples whose (dataset, class) label has a module."""
    kept = set(mset.labels)
    filtered = []
    for ds in datasets:
        keep = [i for i, y in enumerate(ds.labels)
                if ModuleLabel(ds.name, int(y)) in kept]
        filtered.append(LabeledDataset(name=ds.name, images=ds.images[keep],
                                       labels=ds.labels[keep], split=ds.split,
                                       class_count=ds.class_count))
    return filtered


def _report(args, mset: ModuleSet, datasets, title: str, extra=None) -> None:
    report = evaluate(mset, datasets, mode=args.vote, jobs=resolve_jobs(args))
    if extra:
        report.extra.update(extra)
    print(format_report(report, title), end="")
    if args.out:
        written = write_report(report, args.out, figures=args.figures)
        log(f"wrote {', '.join(written)}")


def cmd_decompose(args) -> int:
    model = load_model(args.model)
    dataset = load_dataset(args.data)
    fingerprint = model_fingerprint(model)
    if args.classes == "all":
        classes = list(range(model.class_count))
    else:
        classes = [int(c) for c in args.classes.split(",")]
        bad = [c for c in classes if not 0 <= c < model.class_count]
        if bad:
            raise ValidationError(f"classes out of range: {bad}")
    pipeline = PIPELINE_FLAGS[args.pipeline]
    jobs = resolve_jobs(args)
    os.makedirs(args.out_dir, exist_ok=True)

    started = time.monotonic()
    print(f"{'class':>5} {'file':<32} {'jaccard':>8} {'masked':>8}")
    for cls in classes:
        module = build_module(model, dataset, cls, args.n_inputs, pipeline=pipeline,
                              delta=args.delta, jobs=jobs, swap_sign=args.swap_bln_sign,
                              model_hash=fingerprint)
        filename = f"{dataset.name}-class{cls}-{args.pipeline}.cnnmodule"
        path = os.path.join(args.out_dir, filename)
        save_module(module, path)
        print(f"{cls:>5} {filename:<32} {jaccard(model, module.map):>8.4f} "
              f"{module.map.masked_count():>8}")
    print(f"decomposed {len(classes)} classes in {time.monotonic() - started:.1f}s")
    return 0


def cmd_compose(args) -> int:
    mset = _load_set(args)
    _report(args, mset, _load_datasets(args.data), "composed evaluation")
    return 0


def cmd_reuse(args) -> int:
    mset = _load_set(args)
    selection = [ModuleLabel.parse(s) for s in args.select]
    reused = set_reuse([mset], selection)
    if args.continual:
        train = {ds.name: ds for ds in (load_dataset(p) for p in args.train_data)}
        updated = []
        for label, module in zip(reused.labels, reused.modules):
            foreign = []
            for other in reused.labels:
                if other.provenance != label.provenance and other.provenance in train:
                    ds = train[other.provenance]
                    foreign.extend(
                        x for x, y in zip(ds.images, ds.labels)
                        if int(y) == other.class_id)
            updated.append(continual_update(module, foreign,
                                            direction=args.cl_direction))
        reused = ModuleSet(modules=updated)
    if args.set_manifest:
        write_set_manifest(reused, args.set_manifest)
    _report(args, reused, _filter_covered(reused, _load_datasets(args.data)),
            "reused module set", extra={"continual": str(args.continual).lower()})
    return 0


def cmd_replace(args) -> int:
    mset = _load_set(args)
    datasets = _load_datasets(args.data)
    before = evaluate(mset, datasets, mode=args.vote, jobs=resolve_jobs(args))
    models = load_models_by_hash(args.models)
    replacement = load_module(args.replacement, models)
    mset = set_replace(mset, ModuleLabel.parse(args.label), replacement)
    if args.set_manifest:
        write_set_manifest(mset, args.set_manifest)
    _report(args, mset, datasets, "after replacement",
            extra={"top1_before": f"{before.top1:.6f}",
                   "top5_before": f"{before.top5:.6f}"})
    return 0


def cmd_remove(args) -> int:
    mset = set_remove(_load_set(args), ModuleLabel.parse(args.label))
    if args.set_manifest:
        write_set_manifest(mset, args.set_manifest)
    # removed label's examples are no longer classifiable; evaluate the rest
    _report(args, mset, _filter_covered(mset, _load_datasets(args.data)), "after removal")
    return 0


def cmd_verify(args) -> int:
    mset = _load_set(args)
    if len(args.models) != 1:
        raise ValidationError("verify needs exactly one --models entry (the full model)")
    model = load_model(args.models[0])
    watched = [ModuleLabel.parse(s) for s in args.watch]
    datasets = _load_datasets(args.data)
    counts = {"not re-verified": 0, "confirmed": 0, "flagged": 0}
    for ds in datasets:
        for x in ds.images:
            record = verify_with_modules(model, mset, x, watched, mode=args.vote)
            counts[record.verdict] += 1
    total = sum(counts.values())
    print(f"verified {total} inputs against watched labels "
          f"{', '.join(map(str, watched))}")
    for verdict, count in counts.items():
        print(f"{verdict}: {count}")
    return 0


def cmd_continual(args) -> int:
    models = load_models_by_hash(args.models)
    module = load_module(args.module, models)
    ds = load_dataset(args.foreign_data)
    foreign = [x for x, y in zip(ds.images, ds.labels) if int(y) == args.foreign_class]
    if not foreign:
        raise ValidationError(
            f"dataset {ds.name} has no examples of class {args.foreign_class}")
    updated = continual_update(module, foreign, direction=args.direction)
    save_module(updated, args.out)
    print(f"updated module {module.provenance}:{module.concerned_class} with "
          f"{len(foreign)} foreign examples -> {args.out}")
    return 0


def cmd_jaccard(args) -> int:
    model = load_model(args.model)
    module = load_module(args.module, model)
    print(f"{jaccard(model, module.map):.6f}")
    return 0


def cmd_co2e(args) -> int:
    plog = PowerLog.from_csv(args.log, gpu_cores=args.gpu_cores,
                             baseline_cpu=args.baseline_cpu,
                             baseline_dram=args.baseline_dram)
    p_t, emission = co2e(plog, args.hours)
    # t in hours, powers in watts -> p_t in kWh, emission in lbs CO2e
    print(f"p_t_kwh {p_t:.9f}")
    print(f"co2e_lbs {emission:.9f}")
    return 0


COMMANDS = {
    "decompose": cmd_decompose,
    "compose": cmd_compose,
    "eval": cmd_compose,
    "reuse": cmd_reuse,
    "replace": cmd_replace,
    "remove": cmd_remove,
    "verify": cmd_verify,
    "continual": cmd_continual,
    "jaccard": cmd_jaccard,
    "co2e": cmd_co2e,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CnnDecompError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
