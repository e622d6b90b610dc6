"""Command line entry point: ``backdoor-lab <command> [options]``.

Every command accepts ``--config FILE``, ``--seed``, ``--out`` and any
number of ``--set dotted.key=value`` overrides applied on top of the file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import build_config, read_config_data
from .errors import LabError

log = logging.getLogger("backdoor_lab")

SWEEP_KEYS = {
    "lambda": "erase.dhbe.lambda",
    "trigger-size": "erase.dhbe.trigger_patch",
    "generator-size": "erase.dhbe.generator_width",
    "train-mode": "erase.dhbe.student_train_mode",
}


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--preset", choices=["toy"], help="start from a preset instead of the full-scale defaults")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. erase.dhbe.lambda=0.05")
    p.add_argument("-v", "--verbose", action="store_true")


def _config(args, extra=()):
    from .config import parse_override

    overrides = [parse_override(s) for s in args.overrides] + list(extra)
    if args.seed is not None:
        overrides.append(("seed", args.seed))
    if args.out is not None:
        overrides.append(("output_dir", args.out))
    data = read_config_data(args.config) if args.config else {}
    if args.preset:
        data["preset"] = args.preset
    return build_config(data, overrides)


def _print_manifest(m):
    out = {"output_dir": m.output_dir, "status": m.status,
           "artifacts": {k: v["id"] for k, v in m.artifacts.items()}}
    for which in ("teacher", "student"):
        rep = m.report(which)
        if rep is not None:
            out[which] = {"acc": rep.acc, "asr": rep.asr_by_amplification}
    print(json.dumps(out, indent=2))


def cmd_attack(args):
    from .pipeline import run_pipeline

    cfg = _config(args, [("erase.method", "none")])
    _print_manifest(run_pipeline(cfg))


def cmd_erase(args):
    from .pipeline import run_pipeline

    extra = [("erase.method", args.method)] if args.method else []
    if args.teacher:
        extra.append(("attack.teacher_checkpoint", args.teacher))
        if args.trigger:
            extra.append(("attack.trigger_checkpoint", args.trigger))
    _print_manifest(run_pipeline(_config(args, extra)))


def cmd_eval(args):
    from .attacks import load_trigger
    from .data import load_dataset
    from .pipeline import run_eval, resolve_trigger
    from .rng import RngStreams
    from .zoo import load_checkpoint

    cfg = _config(args)
    d = cfg.dataset
    _, test = load_dataset(d.name, d.root, d.subset, d.data_seed, d.n_classes, d.size, d.n_train, d.n_test)
    model = load_checkpoint(args.model)
    trigger = load_trigger(args.trigger) if args.trigger else \
        resolve_trigger(cfg, model.n_classes, model.input_size[2])
    rep = run_eval(cfg, model, test, trigger, RngStreams(cfg.seed), Path(args.model).stem)
    out = Path(cfg.output_dir)
    rep.save(out / f"report_{Path(args.model).stem}.json")
    print(rep.to_json())


def _shared_teacher(cfg, out: Path):
    """Train the attacked teacher once so sweep members differ only in the
    erasing stage."""
    from .pipeline import run_pipeline

    if cfg.attack.teacher_checkpoint:
        return cfg.attack.teacher_checkpoint, cfg.attack.trigger_checkpoint
    base = build_config(cfg.model_dump(mode="json", by_alias=True),
                        [("erase.method", "none"), ("output_dir", str(out / "teacher"))])
    m = run_pipeline(base)
    return str(m.path("teacher")), str(m.path("trigger"))


def _run_sweep(cfg, key: str, values, out: Path, tag: str):
    from .pipeline import run_pipeline

    teacher, trigger = _shared_teacher(cfg, out)
    manifests = []
    for v in values:
        name = f"{tag}_{v if not isinstance(v, (list, tuple)) else v[0]}"
        data = cfg.model_dump(mode="json", by_alias=True)
        m = run_pipeline(build_config(data, [
            (key, v), ("output_dir", str(out / name)), ("name", name),
            ("attack.teacher_checkpoint", teacher), ("attack.trigger_checkpoint", trigger),
            ("tags", {"sweep": tag, "value": v, **({"lr": v} if tag == "tradeoff" else {})})]))
        _print_manifest(m)
        manifests.append(m)
    return manifests


def _values(text):
    import yaml

    return [yaml.safe_load(v) for v in text.split(",")]


def cmd_tradeoff(args):
    from .report import emit_report

    cfg = _config(args)
    out = Path(cfg.output_dir)
    methods = args.methods.split(",")
    manifests = []
    for method in methods:
        key = "erase.dhbe.student_lr" if method == "dhbe" else "erase.finetune.lr"
        mcfg = build_config(cfg.model_dump(mode="json", by_alias=True), [("erase.method", method)])
        manifests += _run_sweep(mcfg, key, _values(args.lrs), out / method, "tradeoff")
    files = emit_report(manifests, out / "report")
    print(json.dumps({k: str(v) for k, v in files.items()}, indent=2))


def cmd_sweep(args):
    from .report import emit_report

    cfg = _config(args)
    key = SWEEP_KEYS.get(args.param, args.param)
    values = _values(args.values)
    if args.param == "trigger-size":
        scale = cfg.erase.dhbe.trigger_patch[2]
        values = [[v, v, scale] for v in values]
    tag = "lambda" if args.param == "lambda" else args.param
    out = Path(cfg.output_dir)
    manifests = _run_sweep(cfg, key, values, out, tag)
    files = emit_report(manifests, out / "report")
    print(json.dumps({k: str(v) for k, v in files.items()}, indent=2))


def cmd_report(args):
    from .report import emit_report

    files = emit_report(args.runs, args.out or "report", plots=not args.no_plots)
    print(json.dumps({k: str(v) for k, v in files.items()}, indent=2))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="backdoor-lab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attack", help="train a classifier and implant a backdoor")
    _common(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("erase", help="erase a backdoor (dhbe | finetune); trains the teacher unless --teacher")
    _common(p)
    p.add_argument("--method", choices=["dhbe", "finetune", "none"])
    p.add_argument("--teacher", help="attacked model checkpoint")
    p.add_argument("--trigger", help="trigger file matching the teacher")
    p.set_defaults(func=cmd_erase)

    p = sub.add_parser("eval", help="ACC / ASR / activation differences of a checkpoint")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--trigger")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tradeoff", help="learning-rate sweep tracing ACC vs ASR")
    _common(p)
    p.add_argument("--methods", default="dhbe,finetune")
    p.add_argument("--lrs", required=True, help="comma separated learning rates")
    p.set_defaults(func=cmd_tradeoff)

    p = sub.add_parser("sweep", help="ablation over one erasing parameter")
    _common(p)
    p.add_argument("--param", required=True, help=f"one of {sorted(SWEEP_KEYS)} or a dotted config key")
    p.add_argument("--values", required=True, help="comma separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="tables and figures from finished runs")
    p.add_argument("runs", nargs="+", help="run directories or manifest.json files")
    p.add_argument("--out")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except LabError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
