import math

import numpy as np
import pytest

from pvigcaps.backbone import ModelConfig
from pvigcaps.data import synth_dataset, stratified_split, SplitSpec
from pvigcaps.exceptions import ConfigError, ContractError, DivergenceError
from pvigcaps.model import PViGNet
from pvigcaps.tensor import parameter
from pvigcaps.training import (OptState, TrainConfig, adamw_step, evaluate, lr_at, metrics_from_confusion,
                               metrics_from_predictions, train)


def test_lr_schedule_reference_points():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 1e-6
    assert lr_at(20, cfg) == 2e-3
    assert abs(lr_at(47.5, cfg) - (2e-3 + 1e-6) / 2) < 1e-15
    assert abs(lr_at(75, cfg) - 1e-6) < 1e-18
    assert lr_at(10, cfg) == pytest.approx(1e-6 + (2e-3 - 1e-6) / 2)


def test_lr_without_warmup_starts_at_peak():
    cfg = TrainConfig(epochs=10, warmup_epochs=0)
    assert lr_at(0, cfg) == cfg.lr


def test_adamw_pure_decay():
    p = parameter(np.array([1.0, -2.0, 4.0]))
    adamw_step({"w": p}, {"w": np.zeros(3)}, OptState(), 0.01, TrainConfig(weight_decay=0.1))
    np.testing.assert_array_equal(p.data, np.array([1.0, -2.0, 4.0]) * 0.999)


def test_adamw_first_step():
    p = parameter(np.zeros(4))
    cfg = TrainConfig(weight_decay=0.0)
    adamw_step({"w": p}, {"w": np.ones(4)}, OptState(), 1e-3, cfg)
    np.testing.assert_allclose(p.data, -1e-3 / (1 + cfg.eps), rtol=1e-15)


def test_adamw_scalar_oracle_ten_steps(rng):
    cfg = TrainConfig(weight_decay=0.05)
    p = parameter(rng.normal(size=5))
    w = p.data.copy()
    m = v = np.zeros(5)
    state = OptState()
    for t in range(1, 11):
        g = rng.normal(size=5)
        adamw_step({"w": p}, {"w": g}, state, 2e-3, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh, vh = m / (1 - 0.9 ** t), v / (1 - 0.999 ** t)
        w = w * (1 - 2e-3 * 0.05) - 2e-3 * mh / (np.sqrt(vh) + 1e-8)
        np.testing.assert_allclose(p.data, w, rtol=1e-13)
    assert state.step == 10


def test_adamw_is_elementwise(rng):
    cfg = TrainConfig()
    a, b = parameter(np.ones((2, 3))), parameter(np.ones(6))
    sa, sb = OptState(), OptState()
    for _ in range(2):
        g = rng.normal(size=6)
        adamw_step({"w": a}, {"w": g.reshape(2, 3)}, sa, 1e-3, cfg)
        adamw_step({"w": b}, {"w": g}, sb, 1e-3, cfg)
    np.testing.assert_array_equal(a.data.ravel(), b.data)


def test_adamw_rejects_bad_inputs():
    p = parameter(np.zeros(2))
    with pytest.raises(ContractError):
        adamw_step({"w": p}, {"w": np.zeros(3)}, OptState(), 1e-3, TrainConfig())
    with pytest.raises(ContractError):
        adamw_step({"w": p}, {}, OptState(), 0.0, TrainConfig())


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=10, warmup_epochs=10).validate()
    with pytest.raises(ConfigError):
        TrainConfig(loss="hinge").validate()
    with pytest.raises(ConfigError):
        TrainConfig(beta1=1.0).validate()


# ---------------------------------------------------------------- metrics


def binary_fixture():
    # TP=3, TN=5, FP=1, FN=1 with class 1 as the positive class
    y_true = np.array([1, 1, 1, 0, 0, 0, 0, 0, 0, 1])
    y_pred = np.array([1, 1, 1, 0, 0, 0, 0, 0, 1, 0])
    return y_true, y_pred


def test_binary_hand_metrics():
    report = metrics_from_predictions(*binary_fixture(), 2)
    assert report.confusion.tolist() == [[5, 1], [1, 3]]
    assert report.accuracy == 0.8
    assert report.f1[1] == 0.75
    assert report.precision[1] == report.recall[1] == 0.75
    assert abs(report.f1[0] - 2 * (5 / 6) * (5 / 6) / (10 / 6)) < 1e-15


def test_metric_identities(rng):
    y, p = rng.integers(0, 7, 200), rng.integers(0, 7, 200)
    r = metrics_from_predictions(y, p, 7)
    cm = r.confusion
    assert cm.sum() == 200 and cm.sum(axis=1).tolist() == np.bincount(y, minlength=7).tolist()
    assert abs(r.accuracy - np.mean(y == p)) <= 1e-12
    np.testing.assert_allclose(r.recall, np.diag(cm) / cm.sum(axis=1), atol=1e-12)
    np.testing.assert_allclose(r.precision, np.diag(cm) / cm.sum(axis=0), atol=1e-12)
    np.testing.assert_allclose(r.f1, 2 * r.precision * r.recall / (r.precision + r.recall), atol=1e-12)
    # support-weighted recall is accuracy
    assert abs(np.sum(r.recall * r.support) / 200 - r.accuracy) <= 1e-12


def test_perfect_predictions():
    r = metrics_from_predictions([0, 1, 2, 2], [0, 1, 2, 2], 3)
    assert r.accuracy == 1.0 and r.macro_f1 == 1.0 and not r.flags


def test_absent_class_predicted_is_flagged():
    r = metrics_from_predictions([0, 0, 1], [2, 2, 2], 3, ("a", "b", "c"))
    assert r.f1[2] == 0.0
    assert "c:recall_undefined" in r.flags and "c:f1_undefined" in r.flags


def test_report_document_layout():
    names = ("AKIEC", "BCC", "BKL", "DF", "MEL", "NV", "VASC")
    text = metrics_from_confusion(np.eye(7, dtype=int) * 2, names).to_text()
    rows = text.split("[per_class]")[1].split("[confusion]")[0].strip().splitlines()[1:]
    assert [r.split()[0] for r in rows] == list(names)
    assert "accuracy = 1" in text
    with pytest.raises(ContractError):
        metrics_from_confusion(np.zeros((2, 2)))


# ---------------------------------------------------------------- loop


@pytest.fixture
def splits():
    return stratified_split(synth_dataset(3, 10, 32, seed=0), SplitSpec((0.6, 0.2, 0.2), 0))


def test_zero_epoch_run(splits):
    model = PViGNet(ModelConfig.micro())
    initial = model.state_dict()
    result = train(model, splits[0], splits[1], TrainConfig(epochs=0))
    assert result.history == [] and result.best_epoch == -1
    for k, v in initial.items():
        np.testing.assert_array_equal(result.best_state[k], v)


def test_three_epoch_runs_are_bitwise_repeatable(splits):
    cfg = TrainConfig(epochs=3, warmup_epochs=1, batch_size=8)
    runs = []
    for _ in range(2):
        result = train(PViGNet(ModelConfig.micro(), seed=5), splits[0], splits[1], cfg)
        runs.append([(r.train_loss, r.val_loss, r.train_acc) for r in result.history])
    assert runs[0] == runs[1] and len(runs[0]) == 3


def test_best_state_reproduces_validation_accuracy(splits):
    cfg = TrainConfig(epochs=4, warmup_epochs=0, batch_size=8)
    model = PViGNet(ModelConfig.micro())
    result = train(model, splits[0], splits[1], cfg)
    model.load_state_dict(result.best_state)
    assert evaluate(model, splits[1]).accuracy == result.best_val_acc


def test_overlapping_splits_rejected(splits):
    with pytest.raises(ContractError):
        train(PViGNet(ModelConfig.micro()), splits[0], splits[0], TrainConfig(epochs=1, warmup_epochs=0))


def test_divergence_is_reported(splits):
    model = PViGNet(ModelConfig.micro(head="pooling-mlp"))
    model.head.fc2.weight.data[:] = np.inf
    with np.errstate(invalid="ignore"), pytest.raises(DivergenceError) as info:
        train(model, splits[0], None, TrainConfig(epochs=1, warmup_epochs=0))
    assert info.value.epoch == 0 and info.value.batch == 0


def test_pooling_head_trains_with_cross_entropy(splits):
    model = PViGNet(ModelConfig.micro(head="pooling-mlp"))
    result = train(model, splits[0], splits[1], TrainConfig(epochs=2, warmup_epochs=0))
    assert all(math.isfinite(r.train_loss) for r in result.history)
