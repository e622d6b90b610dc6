import json

import numpy as np
import pytest
import torch
import yaml

from backdoor_lab.cli import main
from backdoor_lab.config import build_config, load_config, parse_override
from backdoor_lab.data import load_dataset, stratified_indices
from backdoor_lab.errors import ConfigurationError, IngestionError
from backdoor_lab.pipeline import RunManifest, run_pipeline
from backdoor_lab.report import emit_report
from backdoor_lab.rng import RngStreams, derive_seed


def tiny_config(tmp_path, **over):
    """A pipeline small enough for unit tests (seconds, not minutes)."""
    data = {
        "preset": "toy",
        "output_dir": str(tmp_path / "run"),
        "dataset": {"size": 12, "n_train": 200, "n_test": 100},
        "attack": {"poison_fraction": 0.05, "train": {"epochs": 2, "milestones": [1]}},
        "erase": {
            "method": "dhbe",
            "dhbe": {"epochs": 1, "iterations_per_epoch": 2, "lr_decay_epochs": [], "batch_size": 16,
                     "latent_dim": 16, "generator_width": 16, "trigger_patch": [3, 3, 1.0]},
            "finetune": {"epochs": 1, "n_clean": 20, "samples_per_epoch": 40},
        },
        "eval": {"sample_count": 20},
    }
    return build_config(data, list(over.items()))


# ---------------------------------------------------------------------------
# rng / data


def test_named_streams_are_independent_and_reproducible():
    a, b = RngStreams(7), RngStreams(7)
    assert torch.equal(torch.rand(5, generator=a.torch("latent")), torch.rand(5, generator=b.torch("latent")))
    assert derive_seed(7, "latent") != derive_seed(7, "padding")
    assert derive_seed(7, "latent") != derive_seed(8, "latent")


def test_toy_dataset_bit_identical():
    a, _ = load_dataset("toy", seed=1, n_train=300, n_test=10)
    b, _ = load_dataset("toy", seed=1, n_train=300, n_test=10)
    assert torch.equal(a.images, b.images) and torch.equal(a.labels, b.labels)
    assert a.norm_stats == b.norm_stats
    assert float(a.images.min()) >= 0 and float(a.images.max()) <= 1


def test_subset_is_exact_and_stratified():
    train, _ = load_dataset("toy", subset=200, seed=1, n_train=1000, n_test=10, n_classes=4)
    assert len(train) == 200
    counts = np.bincount(train.labels.numpy(), minlength=4)
    assert counts.tolist() == [50, 50, 50, 50]


def test_stratified_water_filling_small_class():
    labels = np.array([0] * 5 + [1] * 100 + [2] * 100)
    idx = stratified_indices(labels, 65, np.random.default_rng(0))
    assert len(idx) == 65 and len(set(idx)) == 65
    assert np.bincount(labels[idx]).tolist() == [5, 30, 30]


def test_cifar_missing_files_raise_with_path(tmp_path):
    with pytest.raises(IngestionError) as exc:
        load_dataset("cifar10", root=str(tmp_path))
    assert str(tmp_path) in str(exc.value)
    (tmp_path / "data_batch_1").write_bytes(b"garbage")
    with pytest.raises(IngestionError):
        load_dataset("cifar10", root=str(tmp_path))


def test_cifar_reader_on_fake_batches(tmp_path):
    import pickle

    rng = np.random.default_rng(0)
    for name in [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]:
        with open(tmp_path / name, "wb") as f:
            pickle.dump({"data": rng.integers(0, 256, (4, 3072), dtype=np.uint8),
                         "labels": list(rng.integers(0, 10, 4))}, f)
    train, test = load_dataset("cifar10", root=str(tmp_path))
    assert train.images.shape == (20, 3, 32, 32) and len(test) == 4 and train.n_classes == 10


# ---------------------------------------------------------------------------
# config


def test_bare_config_has_full_scale_defaults():
    cfg = build_config({"dataset": {"root": "/data"}})
    d = cfg.erase.dhbe
    assert (d.lam, d.k, d.batch_size, d.epochs, d.lr_decay_epochs) == (0.1, 3, 128, 300, [180, 240])
    assert cfg.attack.arch == "resnet18-32" and cfg.attack.n_poison == 300
    assert cfg.attack.train.epochs == 200 and cfg.attack.train.milestones == [100, 150]
    assert cfg.erase.finetune.lr == 0.01 and cfg.erase.finetune.epochs == 20


def test_toy_preset_and_overrides(tmp_path):
    cfg = build_config({"preset": "toy"}, [parse_override("erase.dhbe.lambda=0.05"), ("seed", 3)])
    assert cfg.dataset.name == "toy" and cfg.erase.dhbe.lam == 0.05 and cfg.seed == 3
    assert cfg.erase.dhbe.epochs * cfg.erase.dhbe.iterations_per_epoch == 3000
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"preset": "toy", "seed": 9}))
    assert load_config(p).seed == 9


def test_config_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        build_config({"dataset": {"name": "cifar10"}})  # no root
    with pytest.raises(ConfigurationError):
        build_config({"preset": "toy", "bogus": 1})
    with pytest.raises(ConfigurationError):
        build_config({"preset": "huge"})
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.yaml")
    with pytest.raises(ConfigurationError):
        parse_override("no-equals-sign")


def test_config_hash_tracks_content():
    a = build_config({"preset": "toy"})
    b = build_config({"preset": "toy"})
    c = build_config({"preset": "toy", "seed": 1})
    assert a.config_hash() == b.config_hash() != c.config_hash()


# ---------------------------------------------------------------------------
# pipeline


def test_pipeline_artifacts_and_integrity(tmp_path):
    m = run_pipeline(tiny_config(tmp_path))
    assert m.status == "ok"
    for name in ("config", "teacher", "trigger", "poison_record", "student", "losses",
                 "report_teacher", "report_student"):
        assert name in m.artifacts
    assert all(m.verify().values())
    again = RunManifest.load(tmp_path / "run")
    assert again.artifacts == m.artifacts
    header = (tmp_path / "run" / "losses.csv").read_text().splitlines()[0]
    assert header == "epoch,iteration,D,R,L_g,L_gp,student_lr"
    assert set(m.timings) == {"data", "attack", "erase", "eval"}


def test_pipeline_is_deterministic(tmp_path):
    a = run_pipeline(tiny_config(tmp_path / "a"))
    b = run_pipeline(tiny_config(tmp_path / "b"))
    for name in ("teacher", "student", "trigger", "losses"):
        assert a.artifacts[name]["sha256"] == b.artifacts[name]["sha256"], name
    assert a.report("student") == b.report("student")
    assert a.report("teacher") == b.report("teacher")


def test_erase_none_reports_teacher_only(tmp_path):
    m = run_pipeline(tiny_config(tmp_path, **{"erase.method": "none"}))
    assert m.report("teacher") is not None and m.report("student") is None
    assert "student" not in m.artifacts


def test_finetune_pipeline(tmp_path):
    m = run_pipeline(tiny_config(tmp_path, **{"erase.method": "finetune"}))
    assert m.report("student").metadata["model"] == "finetune"


def test_stage_failure_recorded(tmp_path):
    cfg = tiny_config(tmp_path, **{"attack.n_poison": 10_000, "attack.poison_fraction": None})
    with pytest.raises(Exception):
        run_pipeline(cfg)
    m = RunManifest.load(tmp_path / "run")
    assert m.status == "failed" and m.error["stage"] == "attack" and m.error["type"] == "PoisoningError"
    assert "config" in m.artifacts


def test_manifest_detects_tampering(tmp_path):
    m = run_pipeline(tiny_config(tmp_path, **{"erase.method": "none"}))
    p = m.path("report_teacher")
    p.write_text(p.read_text() + " ")
    assert m.verify()["report_teacher"] is False


def test_emit_report_tables_and_plots(tmp_path):
    runs = []
    for lam in (0.0, 0.1):
        cfg = tiny_config(tmp_path / f"l{lam}", **{"erase.dhbe.lambda": lam, "tags": {"sweep": "lambda"},
                                                   "name": f"lam{lam}"})
        with pytest.warns(RuntimeWarning) if lam == 0 else _nullcontext():
            runs.append(run_pipeline(cfg))
    files = emit_report(runs, tmp_path / "rep")
    md = (tmp_path / "rep" / "results.md").read_text()
    assert "backdoored ACC" in md and "dhbe ASR" in md
    assert files["boxplot"].exists() and files["lambda"].exists()
    single = emit_report([runs[0].output_dir], tmp_path / "rep1", plots=False)
    lines = single["markdown"].read_text().strip().splitlines()
    assert len(lines) == 3  # header, rule, one row
    with pytest.raises(Exception):
        emit_report([], tmp_path / "none")


def test_tradeoff_plot_from_tagged_runs(tmp_path):
    from backdoor_lab.report import plot_tradeoff

    pts = {"finetune": [(lr, 0.95 - lr, 0.5 * np.exp(-100 * lr)) for lr in (0.002, 0.005, 0.01, 0.02, 0.03)]}
    assert plot_tradeoff(pts, tmp_path / "t.png").exists()


class _nullcontext:
    def __enter__(self):
        return self

    def __exit__(self, *a):
        return False


# ---------------------------------------------------------------------------
# cli


def _cli_args(tmp_path, out):
    return ["--preset", "toy", "--out", str(tmp_path / out),
            "--set", "dataset.size=12", "--set", "dataset.n_train=200", "--set", "dataset.n_test=100",
            "--set", "attack.train.epochs=2", "--set", "attack.train.milestones=[1]",
            "--set", "eval.sample_count=10",
            "--set", "erase.dhbe={epochs: 1, iterations_per_epoch: 4, lr_decay_epochs: [], batch_size: 16,"
                     " latent_dim: 16, generator_width: 16, trigger_patch: [3, 3, 1.0]}"]


def test_cli_attack_erase_eval_report(tmp_path, capsys):
    assert main(["attack", *_cli_args(tmp_path, "atk")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["status"] == "ok" and "student" not in out
    teacher = tmp_path / "atk" / "teacher.safetensors"
    trigger = tmp_path / "atk" / "trigger.safetensors"
    assert main(["erase", *_cli_args(tmp_path, "er"), "--method", "dhbe",
                 "--teacher", str(teacher), "--trigger", str(trigger)]) == 0
    capsys.readouterr()
    assert main(["eval", *_cli_args(tmp_path, "ev"), "--model", str(tmp_path / "er" / "student.safetensors"),
                 "--trigger", str(trigger)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert set(rep["asr_by_amplification"]) == {"1", "4", "9"}
    assert main(["report", str(tmp_path / "atk"), str(tmp_path / "er"), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "results.csv").exists()


def test_cli_sweep_shares_teacher(tmp_path, capsys):
    assert main(["sweep", *_cli_args(tmp_path, "sw"), "--param", "lambda", "--values", "0.05,0.1"]) == 0
    assert (tmp_path / "sw" / "teacher" / "teacher.safetensors").exists()
    assert (tmp_path / "sw" / "report" / "lambda_sweep.png").exists()
    hashes = {RunManifest.load(tmp_path / "sw" / d).artifacts["teacher"]["sha256"]
              for d in ("lambda_0.05", "lambda_0.1")}
    assert len(hashes) == 1


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["attack", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert main(["attack", "--set", "dataset.name=cifar10", "--set", f"dataset.root={tmp_path}",
                 "--out", str(tmp_path / "x")]) == 3
    assert main(["eval", "--preset", "toy", "--model", str(tmp_path / "nope.safetensors"),
                 "--out", str(tmp_path / "y")]) == 3
    err = capsys.readouterr().err
    assert "IngestionError" in err
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_cli_config_file_layers_under_preset_and_overrides(tmp_path):
    from backdoor_lab.cli import _config, build_parser

    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"seed": 4, "erase": {"dhbe": {"k": 2}}}))
    args = build_parser().parse_args(["attack", "--config", str(p), "--preset", "toy",
                                      "--set", "erase.dhbe.lambda=0.05", "--out", str(tmp_path / "o")])
    cfg = _config(args)
    assert cfg.seed == 4 and cfg.erase.dhbe.k == 2 and cfg.erase.dhbe.lam == 0.05
    assert cfg.dataset.name == "toy" and cfg.erase.dhbe.epochs == 60
    assert cfg.output_dir == str(tmp_path / "o")
