import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from backdoor_lab.attacks import TriggerSpec, checkerboard_trigger
from backdoor_lab.data import LabeledDataset
from backdoor_lab.errors import ContractError, FittingError, MeasurementError
from backdoor_lab.evaluation import (
    EvalReport,
    accuracy,
    activation_difference,
    activation_differences,
    asr_from_predictions,
    attack_success_rate,
    evaluate,
    finetune_baseline,
    fit_tradeoff_curve,
    random_projections,
    read_tradeoff_csv,
    separation_ratio,
    sliced_wasserstein,
    trigger_em_bound,
    write_tradeoff_csv,
)
from backdoor_lab.zoo import ModelBundle, build_classifier, state_hash, Classifier

from oracles import brute_force_asr, logistic, bound_formulas, wasserstein1_1d_equal

UNIT = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))


class LinearProbe(Classifier):
    """S(x) = W vec(x); features are the logits reshaped to a map."""

    def __init__(self, W):
        super().__init__()
        self.fc = nn.Linear(W.shape[1], W.shape[0], bias=False)
        with torch.no_grad():
            self.fc.weight.copy_(W)

    def features(self, x):
        return self.fc(x.flatten(1))[:, :, None, None]

    def embed(self, x):
        return x.flatten(1)

    def forward(self, x):
        return self.fc(x.flatten(1))


class TablePredictor(Classifier):
    """Looks up a prediction per image id encoded in pixel (0, 0, 0); the
    bottom-right pixel tells clean from stamped."""

    def __init__(self, clean_pred, trig_pred, n_classes):
        super().__init__()
        self.clean = torch.as_tensor(clean_pred)
        self.trig = torch.as_tensor(trig_pred)
        self.n = n_classes
        self.fc = nn.Identity()

    def forward(self, x):
        ids = x[:, 0, 0, 0].round().long()
        stamped = x[:, 0, -1, -1] > 0.5
        pred = torch.where(stamped, self.trig[ids], self.clean[ids])
        return nn.functional.one_hot(pred, self.n).float()


def _table_case(labels, clean_pred, trig_pred, n_classes, target):
    n = len(labels)
    x = torch.zeros(n, 1, 4, 4)
    # pixel values are ids / n so they stay in [0, 1]; the probe rescales
    x[:, 0, 0, 0] = torch.arange(n).float() / max(n, 1)
    probe = TablePredictor(clean_pred, trig_pred, n_classes)
    bundle = ModelBundle("toy-cnn", n_classes, ((0.0,), (1.0 / max(n, 1),)), (4, 4, 1), probe)
    # normalize(x) = x * n recovers integer ids
    ds = LabeledDataset(x, torch.as_tensor(labels), bundle.norm_stats, n_classes, "test")
    trigger = TriggerSpec(torch.ones(1, 1, 1), target)
    return bundle, ds, trigger


def test_accuracy_examples():
    bundle, ds, _ = _table_case([0, 1, 1, 0, 1], [0, 1, 1, 0, 1], [0] * 5, 2, 1)
    assert accuracy(bundle, ds) == 1.0
    bundle, ds, _ = _table_case([0, 1, 1, 0, 1], [0, 1, 0, 1, 1], [0] * 5, 2, 1)
    assert accuracy(bundle, ds) == pytest.approx(0.6)
    with pytest.raises(ContractError):
        accuracy(bundle, ds.subset([]))


def test_asr_hand_table():
    # 6 samples, target 2: two are target-class, four eligible, three flip
    labels = [0, 1, 2, 0, 1, 2]
    clean = [0, 1, 2, 0, 1, 0]
    trig = [2, 2, 2, 2, 0, 2]
    bundle, ds, trig_spec = _table_case(labels, clean, trig, 3, 2)
    asr, n = attack_success_rate(bundle, ds, trig_spec, 2, 1)
    assert (asr, n) == (0.75, 4)


def test_asr_ignoring_model_is_zero_and_empty_eligible_raises():
    bundle, ds, t = _table_case([0, 0, 1], [0, 0, 1], [0, 0, 1], 2, 1)
    assert attack_success_rate(bundle, ds, t)[0] == 0.0
    bundle, ds, t = _table_case([0, 0, 1], [1, 1, 1], [1, 1, 1], 2, 1)
    with pytest.raises(MeasurementError):
        attack_success_rate(bundle, ds, t)


@settings(max_examples=50, deadline=None)
@given(data=st.data())
def test_asr_matches_enumeration(data):
    n = data.draw(st.integers(1, 20))
    k = data.draw(st.integers(2, 4))
    t = data.draw(st.integers(0, k - 1))
    cls = st.lists(st.integers(0, k - 1), min_size=n, max_size=n)
    labels, clean, trig = data.draw(cls), data.draw(cls), data.draw(cls)
    expect = brute_force_asr(labels, clean, trig, t)
    bundle, ds, spec = _table_case(labels, clean, trig, k, t)
    if expect is None:
        with pytest.raises(MeasurementError):
            attack_success_rate(bundle, ds, spec)
    else:
        assert attack_success_rate(bundle, ds, spec) == expect
        assert asr_from_predictions(labels, clean, trig, t) == expect


def test_activation_difference_zero_trigger_and_linear_oracle():
    torch.manual_seed(0)
    W = torch.randn(4, 3 * 6 * 6)
    bundle = ModelBundle("toy-cnn", 4, UNIT, (6, 6, 3), LinearProbe(W))
    x = torch.rand(20, 3, 6, 6) * 0.5
    ds = LabeledDataset(x, torch.zeros(20, dtype=torch.long), UNIT, 4)
    zero = TriggerSpec(torch.zeros(3, 2, 2), 1)
    s = activation_difference(bundle, ds, zero, "fc", "l1", 20, 0)
    assert s["max"] == 0
    pattern = torch.rand(3, 2, 2) * 0.4
    trig = TriggerSpec(pattern, 1)
    delta = torch.zeros(3, 6, 6)
    delta[:, 4:, 4:] = pattern  # inputs <= 0.5, pattern <= 0.4: no clamping
    expect_l1 = float((W @ delta.flatten()).abs().sum())
    expect_linf = float((W @ delta.flatten()).abs().max())
    s1 = activation_difference(bundle, ds, trig, "fc", "l1", 20, 0)
    sinf = activation_difference(bundle, ds, trig, "fc", "linf", 20, 0)
    assert s1["min"] == pytest.approx(expect_l1, rel=1e-5) and s1["max"] == pytest.approx(expect_l1, rel=1e-5)
    assert sinf["median"] == pytest.approx(expect_linf, rel=1e-5)
    with pytest.raises(ContractError):
        activation_difference(bundle, ds, trig, "conv1", "l1")
    with pytest.raises(ContractError):
        activation_differences(bundle, x, x, "fc", "l2")


def test_bound_formulas_exact():
    for (kind, args), expect in bound_formulas().items():
        names = {"pixel": (), "square": ("h", "w", "C"), "watermark": ("opacity", "H", "W", "C"),
                 "sig": ("delta", "H", "W", "C"), "steganograph": ("H", "W", "C")}[kind]
        assert trigger_em_bound(kind, **dict(zip(names, args))) == expect
    assert trigger_em_bound("steganograph", H=32, W=32, C=3) == pytest.approx(36.14, abs=0.01)
    with pytest.raises(ContractError):
        trigger_em_bound("square", h=3, w=3)
    with pytest.raises(ContractError):
        trigger_em_bound("blend")


def test_sliced_wasserstein_identity_and_deltas():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(50, 7))
    assert sliced_wasserstein(a, a.copy(), 100, 0) == 0.0
    assert sliced_wasserstein(np.zeros((10, 1)), np.full((10, 1), 5.0), 20, 0) == pytest.approx(5.0, abs=1e-6)
    assert sliced_wasserstein(np.zeros((3, 1)), np.full((7, 1), 5.0), 20, 0) == pytest.approx(5.0, abs=1e-6)
    with pytest.raises(ContractError):
        sliced_wasserstein(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ContractError):
        sliced_wasserstein(np.zeros((0, 2)), np.zeros((3, 2)))


def test_sliced_wasserstein_1d_matches_sorted_matching():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=30), rng.normal(2, 1, size=30)
    got = sliced_wasserstein(a[:, None], b[:, None], 10, 0)
    assert got == pytest.approx(wasserstein1_1d_equal(a, b), rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 12), m=st.integers(2, 12), d=st.integers(1, 5))
def test_sliced_wasserstein_symmetry_nonnegativity(seed, n, m, d):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, d)), rng.normal(size=(m, d))
    proj = random_projections(d, 16, seed)
    ab = sliced_wasserstein(a, b, projections=proj)
    ba = sliced_wasserstein(b, a, projections=proj)
    assert ab >= 0 and ab == pytest.approx(ba, rel=1e-12, abs=1e-12)


def test_separation_ratio_examples():
    rng = torch.Generator().manual_seed(0)
    x = torch.rand(40, 3, 4, 4, generator=rng)
    y = torch.arange(40) % 2
    x[y == 1] = (x[y == 1] * 0.5 + 0.5)
    ds = LabeledDataset(x, y, UNIT, 2)
    assert separation_ratio(ds, 0, 1, 0.0) == 0.0
    r = separation_ratio(ds, 0, 1, 27.0)
    assert r == pytest.approx(27.0 / sliced_wasserstein(x[y == 0].numpy(), x[y == 1].numpy(), 200, 0))
    with pytest.raises(ContractError):
        separation_ratio(ds, 0, 5, 1.0)
    # full-scale arithmetic: 3x3 square against a 282.76 class distance, and a 10x10 square
    assert trigger_em_bound("square", h=3, w=3, C=3) / 282.76 == pytest.approx(0.095, abs=5e-4)
    assert trigger_em_bound("square", h=10, w=10, C=3) / 282.76 > 1


def test_logistic_parameter_recovery():
    true = (0.02, 0.95, 60.0, 0.9)
    acc = np.linspace(0.82, 0.97, 12)
    pts = [(0.001 * i, a, float(logistic(a, *true))) for i, a in enumerate(acc)]
    curve = fit_tradeoff_curve(pts, "dhbe")
    assert np.allclose(curve.params, true, atol=1e-3)
    assert max(abs(r) for r in curve.residuals) < 1e-9


def test_logistic_flat_plateau_and_degenerate():
    pts = [(0.01 * i, 0.9 + 0.01 * i, 0.3) for i in range(5)]
    c = fit_tradeoff_curve(pts)
    assert np.allclose(c.predict(np.array([0.8, 0.95, 1.0])), 0.3)
    with pytest.raises(FittingError):
        fit_tradeoff_curve([(0.1, 0.9, 0.1)] * 5)
    with pytest.raises(FittingError):
        fit_tradeoff_curve([(0.1, 0.9, 0.1), (0.2, 0.8, 0.0)])


def test_lr_sweep_shape_gives_monotone_curve():
    lrs = np.linspace(0.002, 0.02, 8)
    acc = 0.95 - 2.0 * lrs
    asr = 0.8 * np.exp(-150 * lrs)
    c = fit_tradeoff_curve(list(zip(lrs, acc, asr)), "finetune")
    grid = np.linspace(acc.min(), acc.max(), 50)
    pred = c.predict(grid)
    assert np.all(np.diff(pred) >= -1e-9)


def test_tradeoff_csv_roundtrip(tmp_path):
    c = fit_tradeoff_curve([(0.001 * i, 0.8 + 0.02 * i, 0.1 * i) for i in range(1, 6)], "dhbe")
    p = write_tradeoff_csv([c], tmp_path / "t.csv")
    assert read_tradeoff_csv(p) == {"dhbe": c.points}


def test_report_roundtrip(tmp_path):
    r = EvalReport(0.9, {1: 0.1, 4: 0.2, 9: 0.3}, 100,
                   {"fc/l1": {"min": 0.0, "q1": 1.0, "median": 2.0, "q3": 3.0, "max": 4.0}},
                   {"model": "m", "trigger": "t", "seed": 3})
    p = r.save(tmp_path / "r.json")
    assert EvalReport.load(p) == r
    with pytest.raises(ContractError):
        EvalReport(1.2, {1: 0.0}, 1)
    row = r.csv_row()
    assert row["asr_x9"] == 0.3 and row["fc/l1/median"] == 2.0


def test_finetune_zero_epochs_is_noop():
    b = build_classifier("toy-cnn", 2, UNIT, (8, 8, 3))
    ds = LabeledDataset(torch.rand(8, 3, 8, 8), torch.arange(8) % 2, UNIT, 2)
    out = finetune_baseline(b, ds, epochs=0)
    assert state_hash(out.model) == state_hash(b.model)
    with pytest.raises(ContractError):
        finetune_baseline(b, ds.subset([]))


def test_finetune_changes_copy_only():
    b = build_classifier("toy-cnn", 2, UNIT, (8, 8, 3))
    h = state_hash(b.model)
    ds = LabeledDataset(torch.rand(16, 3, 8, 8), torch.arange(16) % 2, UNIT, 2)
    out = finetune_baseline(b, ds, epochs=1, samples_per_epoch=32, rng=0)
    assert state_hash(b.model) == h and state_hash(out.model) != h


def test_evaluate_builds_full_report():
    b = build_classifier("toy-cnn", 2, UNIT, (16, 16, 3))
    g = torch.Generator().manual_seed(0)
    ds = LabeledDataset(torch.rand(40, 3, 16, 16, generator=g), torch.arange(40) % 2, UNIT, 2)
    b.model.eval()
    # make sure there are eligible samples: force predictions equal labels via the bias
    pred = b.predict(ds.images)
    ds = ds.with_data(ds.images, pred.clone())
    if int((ds.labels != 1).sum()) == 0:
        pytest.skip("random model predicts the target class everywhere")
    rep = evaluate(b, ds, checkerboard_trigger(3, 3, target=1), sample_count=10, metadata={"model": "x"}, rng=0)
    assert set(rep.asr_by_amplification) == {1, 4, 9}
    assert set(rep.activation_diffs) == {"last-conv/l1", "last-conv/linf", "fc/l1", "fc/linf"}
    assert rep.acc == 1.0 and rep.eligible_count <= len(ds)
