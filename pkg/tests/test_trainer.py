import math

import numpy as np
import pytest

from saltlab import nn
from saltlab import tensor as T
from saltlab.channel import ChannelSpec
from saltlab.data import SyntheticDatasetSpec, generate_synthetic, stratified_split
from saltlab.errors import ClosedModelViolation, ConfigurationError, ContractError
from saltlab.harness import desk_user_spec
from saltlab.metrics import accuracy, predict, total_comm_latency
from saltlab.modelfile import load_network
from saltlab.rng import RngStream
from saltlab.split import Adapter, build_desk_backbone, split_at
from saltlab.trainer import (AdamState, EarlyStopper, TrainConfig, adam_step, evaluate, evaluate_backbone,
                             train_adapter, train_baseline, with_head)

# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


def reference_adam(grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam written out longhand; returns the parameter trajectory from 0."""
    theta, m, v, out = 0.0, 0.0, 0.0, []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat, v_hat = m / (1 - b1 ** t), v / (1 - b2 ** t)
        theta -= lr * m_hat / (math.sqrt(v_hat) + eps)
        out.append(theta)
    return out


def scalar_param(value=0.0):
    return T.Parameter(np.array([value]), dtype=np.float64)


def test_adam_first_step_closed_form():
    for g in (0.5, -3.0, 1e-3):
        p = scalar_param()
        p.grad = np.array([g])
        adam_step([p], AdamState(), 1e-3)
        expected = -1e-3 * g / (abs(g) + 1e-8)
        assert p.data[0] == pytest.approx(expected, rel=1e-12)
        assert abs(p.data[0]) == pytest.approx(1e-3, rel=1e-4)
        assert np.sign(p.data[0]) == -np.sign(g)


def test_adam_matches_reference_trajectory():
    grads = [0.3, -1.2, 0.7, 0.0, 2.5, -0.1]
    p, state = scalar_param(), AdamState()
    for g, expected in zip(grads, reference_adam(grads, 0.01)):
        p.grad = np.array([g])
        adam_step([p], state, 0.01)
        assert p.data[0] == pytest.approx(expected, rel=1e-12, abs=1e-15)
    assert state.step == len(grads)


def test_adam_zero_gradient_is_fixed_point():
    p = T.Parameter(np.array([1.5, -2.0]), dtype=np.float64)
    p.grad = np.zeros(2)
    adam_step([p], AdamState(), 0.1)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_adam_skips_frozen_and_rejects_missing_grads():
    frozen = T.Parameter(np.array([1.0]), trainable=False, dtype=np.float64)
    frozen.grad = np.array([5.0])
    live = scalar_param()
    live.grad = np.array([1.0])
    adam_step([frozen, live], AdamState(), 0.1)
    assert frozen.data[0] == 1.0 and live.data[0] != 0.0
    with pytest.raises(ContractError):
        adam_step([scalar_param()], AdamState(), 0.1)


# --------------------------------------------------------------------------
# early stopping
# --------------------------------------------------------------------------

def test_early_stopper_counts_patience_window():
    stopper = EarlyStopper(patience=3, min_delta=0.01)
    losses = [1.0, 0.8, 0.795, 0.9, 0.85]
    stops = []
    for epoch, loss in enumerate(losses):
        stopper.update(epoch, loss)
        stops.append(stopper.should_stop)
    assert stopper.best_epoch == 1
    assert stops == [False, False, False, False, True]


def test_config_validation_and_roundtrip():
    with pytest.raises(ConfigurationError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(early_stop_patience=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(mode="lora")
    cfg = TrainConfig(forward_channel=ChannelSpec.packet_loss(0.5), seed=3, mode="head_finetune")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# --------------------------------------------------------------------------
# training runs on a small random backbone
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small():
    net = build_desk_backbone(21)
    spec = SyntheticDatasetSpec(train_per_class=40, test_per_class=10, user_subset=(0, 1, 2, 3),
                                user_scale=1.1, user_bias=0.05)
    train, test = generate_synthetic(spec, 5)
    with T.no_grad():
        net.train()
        net(train.x[:128])
    net.eval()
    fit, val = stratified_split(train, 0.1, RngStream(5).fork("validation"))
    return net, fit, val, test


def test_accuracy_definition_and_ties():
    assert accuracy([0, 1, 1], [0, 1, 0]) == pytest.approx(2 / 3)
    np.testing.assert_array_equal(predict(np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])), [0, 1])


def test_mode_none_equals_backbone(small):
    net, _, _, test = small
    model = split_at(net, "AfterBlock2")
    via_split = evaluate(model, None, test)
    direct = evaluate_backbone(net, test)
    assert via_split.correct == direct.correct and via_split.accuracy == direct.accuracy
    zero = evaluate(model, Adapter(model.latent_shape), test)
    assert zero.loss == via_split.loss and zero.correct == via_split.correct


def test_epoch_zero_matches_frozen_baseline_and_digests_hold(small):
    net, fit, val, _ = small
    model = split_at(net, "AfterBlock2")
    before = model.digests()
    _, report = train_adapter(model, Adapter(model.latent_shape, seed=1), fit, val, TrainConfig(max_epochs=2, seed=1))
    assert report.history[0].val_loss == evaluate(model, None, val).loss
    assert report.head_digest[0] == report.head_digest[1] == before[0]
    assert report.tail_digest[0] == report.tail_digest[1] == before[1]
    assert report.epochs == 2 and len(report.history) == 3
    assert report.t_comm_total_s == pytest.approx(total_comm_latency(report.latency_model), rel=1e-12)


def test_early_stop_epoch_count(small):
    net, fit, val, _ = small
    model = split_at(net, "AfterBlock3")
    cfg = TrainConfig(max_epochs=40, early_stop_patience=2, seed=2)
    _, report = train_adapter(model, Adapter(model.latent_shape, seed=2), fit, val, cfg)
    assert report.epochs <= cfg.max_epochs
    if report.stopped_early:
        assert report.epochs == report.best_epoch + cfg.early_stop_patience


def test_injected_head_update_is_caught(small):
    _, fit, val, _ = small
    model = split_at(build_desk_backbone(21), "AfterBlock2")

    def tamper(epoch, b):
        if b == 0:
            model.head.parameters()[0].data = model.head.parameters()[0].data + 1e-3

    with pytest.raises(ClosedModelViolation):
        train_adapter(model, Adapter(model.latent_shape), fit, val, TrainConfig(max_epochs=1), on_batch=tamper)


def test_fully_lossy_gradient_channel_freezes_adapter_parameters(small):
    net, fit, val, _ = small
    model = split_at(net, "AfterBlock2")
    adapter = Adapter(model.latent_shape, "insertion", seed=4)
    start = [p.data.copy() for p in adapter.parameters()]
    cfg = TrainConfig(max_epochs=1, gradient_channel=ChannelSpec.packet_loss(1.0))
    train_adapter(model, adapter, fit, val, cfg)
    for p, s in zip(adapter.parameters(), start):
        np.testing.assert_array_equal(p.data, s)


def desk_user_model(backbone_file, split_point="AfterBlock2"):
    path, _ = backbone_file
    model = split_at(load_network(path).freeze().eval(), split_point)
    train, test = generate_synthetic(desk_user_spec(), 0)
    fit, val = stratified_split(train, 0.1, RngStream(0).fork("validation"))
    return model, fit, val, test


def test_head_finetune_changes_head_only(backbone_file):
    model, fit, val, _ = desk_user_model(backbone_file, "AfterBlock1")
    head_before, tail_before = model.digests()
    head, report = train_baseline(model, "head_finetune", fit, val, TrainConfig(max_epochs=3))
    assert report.best_epoch > 0
    assert nn.param_digest(head) != head_before
    assert model.digests() == (head_before, tail_before)
    assert report.tail_digest == (tail_before, tail_before)
    assert report.epochs >= 1 and report.latency_model.epochs == report.epochs


def test_head_retrain_beats_no_adaptation_on_training_loss(backbone_file):
    model, fit, val, _ = desk_user_model(backbone_file)
    head, _ = train_baseline(model, "head_retrain", fit, val, TrainConfig(max_epochs=15, seed=0))
    assert evaluate(with_head(model, head), None, fit).loss < evaluate(model, None, fit).loss


def test_unadapted_accuracy_drops_under_heavy_loss(backbone_file):
    model, _, _, test = desk_user_model(backbone_file)
    clean = evaluate(model, None, test, ChannelSpec.packet_loss(0.0)).accuracy
    lossy = evaluate(model, None, test, ChannelSpec.packet_loss(0.75)).accuracy
    assert lossy < clean


def test_noise_trained_adapter_beats_unadapted_under_noise(backbone_file):
    model, fit, val, test = desk_user_model(backbone_file)
    noise = ChannelSpec.gaussian_noise(0.5)
    adapter, _ = train_adapter(model, Adapter(model.latent_shape, seed=0), fit, val,
                               TrainConfig(seed=0, forward_channel=noise))
    assert evaluate(model, adapter, test, noise).accuracy > evaluate(model, None, test, noise).accuracy
