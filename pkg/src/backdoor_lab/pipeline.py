"""Seeded attack -> erase -> eval orchestration with on-disk artifacts."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional

from . import __version__
from .attacks import (
    TriggerSpec,
    checkerboard_trigger,
    load_trigger,
    poison_badnets,
    poison_clean_label,
    save_trigger,
    train_classifier,
    trojaning_attack,
)
from .config import RunConfig, dump_config
from .data import LabeledDataset, load_dataset, stratified_indices
from .dhbe import HISTORY_COLUMNS, run_dhbe
from .evaluation import EvalReport, evaluate, finetune_baseline
from .rng import RngStreams
from .zoo import ModelBundle, load_checkpoint, save_checkpoint, save_module

log = logging.getLogger(__name__)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    output_dir: str
    artifacts: Dict[str, Dict[str, str]] = field(default_factory=dict)  # name -> {path, sha256, id}
    timings: Dict[str, float] = field(default_factory=dict)
    tool_version: str = __version__
    status: str = "running"
    error: Optional[Dict[str, str]] = None

    def add(self, name: str, path) -> Path:
        path = Path(path)
        digest = file_sha256(path)
        rel = path.relative_to(self.output_dir) if path.is_relative_to(self.output_dir) else path
        self.artifacts[name] = {"path": str(rel), "sha256": digest, "id": digest[:12]}
        return path

    def path(self, name: str) -> Path:
        p = Path(self.artifacts[name]["path"])
        return p if p.is_absolute() else Path(self.output_dir) / p

    def verify(self) -> Dict[str, bool]:
        return {name: self.path(name).exists() and file_sha256(self.path(name)) == a["sha256"]
                for name, a in self.artifacts.items()}

    def save(self) -> Path:
        p = Path(self.output_dir) / "manifest.json"
        p.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return p

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        return cls(**json.loads(path.read_text()))

    def report(self, which: str) -> Optional[EvalReport]:
        key = f"report_{which}"
        return EvalReport.load(self.path(key)) if key in self.artifacts else None

    def config(self) -> RunConfig:
        import yaml

        return RunConfig.model_validate(yaml.safe_load(self.path("config").read_text()))


def write_history_csv(history, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(HISTORY_COLUMNS))
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in HISTORY_COLUMNS})
    return path


class _Stage:
    def __init__(self, manifest: RunManifest, name: str):
        self.manifest, self.name = manifest, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        self.manifest.timings[self.name] = time.perf_counter() - self.t0
        if exc is not None:
            self.manifest.status = "failed"
            self.manifest.error = {"stage": self.name, "type": exc_type.__name__, "message": str(exc)}
            self.manifest.save()
        return False


def resolve_trigger(config: RunConfig, n_classes: int, channels: int) -> TriggerSpec:
    t = config.attack.trigger
    target = n_classes - 1 if t.target is None else t.target
    if t.kind == "file":
        trig = load_trigger(t.path)
        trig.target = target if t.target is not None else trig.target
        return trig
    return checkerboard_trigger(t.size, t.size, channels, target)


def n_poison_for(config: RunConfig, train: LabeledDataset) -> int:
    a = config.attack
    if a.poison_fraction is not None:
        return int(round(a.poison_fraction * len(train)))
    return int(a.n_poison or 0)


def build_teacher(config: RunConfig, train: LabeledDataset, streams: RngStreams, out: Optional[Path] = None):
    """Train (and attack) the classifier that erasing starts from.
    Returns (bundle, trigger, poison record or None)."""
    a = config.attack
    C = train.input_size[2]
    if a.teacher_checkpoint:
        teacher = load_checkpoint(a.teacher_checkpoint)
        trigger = load_trigger(a.trigger_checkpoint) if a.trigger_checkpoint else \
            resolve_trigger(config, teacher.n_classes, C)
        return teacher, trigger, None
    trigger = resolve_trigger(config, train.n_classes, C)
    n_poison = n_poison_for(config, train)
    record = None
    if a.kind == "badnets":
        poisoned, record = poison_badnets(train, trigger, n_poison, streams.child("poison"))
        teacher = train_classifier(poisoned, a.arch, a.train, streams.child("train"))
    elif a.kind == "clean-label":
        clean = train_classifier(train, a.arch, a.train, streams.child("train-clean"))
        poisoned, record = poison_clean_label(train, trigger, n_poison, a.perturb_budget, clean,
                                              streams.child("poison"), steps=a.perturb_steps)
        teacher = train_classifier(poisoned, a.arch, a.train, streams.child("train"))
    elif a.kind == "trojaning":
        clean = train_classifier(train, a.arch, a.train, streams.child("train"))
        teacher, trigger = trojaning_attack(clean, train, a.n_neurons, (a.trigger.size, a.trigger.size),
                                            trigger.target, n_poison, streams.child("poison"),
                                            finetune=a.trojan_finetune, trigger_steps=a.trojan_trigger_steps)
    else:
        teacher = train_classifier(train, a.arch, a.train, streams.child("train"))
    if record is not None:
        record.seed = config.seed
    return teacher, trigger, record


def erase(config: RunConfig, teacher: ModelBundle, train: LabeledDataset, streams: RngStreams,
          out: Optional[Path] = None, manifest: Optional[RunManifest] = None):
    """Returns (student, history or None)."""
    e = config.erase
    if e.method == "dhbe":
        cfg = e.dhbe
        cb = None
        if out is not None and cfg.checkpoint_every:
            def cb(state):
                if (state.epoch + 1) % cfg.checkpoint_every == 0:
                    d = out / "checkpoints" / f"epoch_{state.epoch + 1:04d}"
                    save_checkpoint(state.student, d / "student.safetensors")
                    save_module(state.generator, d / "sample_generator.safetensors", epoch=state.epoch + 1)
                    save_module(state.trigger_generator, d / "trigger_generator.safetensors", epoch=state.epoch + 1)
        student, history = run_dhbe(teacher, cfg, streams.child("erase"), on_epoch_end=cb, progress=True)
        return student, history
    if e.method == "finetune":
        f = e.finetune
        n = min(f.n_clean, len(train))
        rng = streams.child("erase").numpy("poison")
        clean = train.subset(stratified_indices(train.labels, n, rng))
        student = finetune_baseline(teacher, clean, f.epochs, f.lr, streams.child("erase"),
                                    f.samples_per_epoch, f.batch_size, f.milestones)
        return student, None
    return None, None


def run_eval(config: RunConfig, model: ModelBundle, test: LabeledDataset, trigger: TriggerSpec,
             streams: RngStreams, label: str) -> EvalReport:
    ev = config.eval
    return evaluate(model, test, trigger, ev.amplifications, ev.layers, ev.norms, ev.sample_count,
                    metadata={"model": label, "trigger": trigger.name, "seed": config.seed,
                              "attack": config.attack.kind, "erase": config.erase.method,
                              "run": config.name},
                    rng=streams.child("eval"))


def run_pipeline(config: RunConfig) -> RunManifest:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    streams = RngStreams(config.seed)
    manifest = RunManifest(config.config_hash(), str(out))
    (out / "config.yaml").write_text(dump_config(config))
    manifest.add("config", out / "config.yaml")

    with _Stage(manifest, "data"):
        d = config.dataset
        train, test = load_dataset(d.name, d.root, d.subset, d.data_seed, d.n_classes, d.size, d.n_train, d.n_test)

    with _Stage(manifest, "attack"):
        teacher, trigger, record = build_teacher(config, train, streams, out)
        manifest.add("teacher", save_checkpoint(teacher, out / "teacher.safetensors"))
        manifest.add("trigger", save_trigger(trigger, out / "trigger.safetensors"))
        if record is not None:
            manifest.add("poison_record", record.save(out / "poison_record.json"))

    with _Stage(manifest, "erase"):
        student, history = erase(config, teacher, train, streams, out, manifest)
        if student is not None:
            manifest.add("student", save_checkpoint(student, out / "student.safetensors"))
        if history is not None:
            manifest.add("losses", write_history_csv(history, out / "losses.csv"))

    with _Stage(manifest, "eval"):
        rep = run_eval(config, teacher, test, trigger, streams, "teacher")
        manifest.add("report_teacher", rep.save(out / "report_teacher.json"))
        if student is not None:
            rep = run_eval(config, student, test, trigger, streams, config.erase.method)
            manifest.add("report_student", rep.save(out / "report_student.json"))

    manifest.status = "ok"
    manifest.save()
    return manifest
