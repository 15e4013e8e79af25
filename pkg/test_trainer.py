"""
Trainer: schedule, optimizer, loss wiring, evaluation, resumption and the gradient check
"""

from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

import tensor as T
from checkpoint import load_checkpoint, save_checkpoint
from conftest import tiny_model_config
from errors import ConfigError, NonFiniteError, ShapeError, UndefinedMetricError
from metrics import EvalReport
from model import CrossFundusTransformer, ModelOutput
from synth_data import Dataset, PairedSample, generate_dataset, stratified_split
from tensor import Param, Tensor
from trainer import (TrainConfig, TrainState, adam_step, central_difference, compute_grads, cosine_lr, evaluate,
                     grad_check, predict, relative_error, train)


def _scalar_state(theta=1.0):
    model = SimpleNamespace(params={"w": Param(np.array([theta]), "w")})
    return TrainState(model=model, m={"w": np.zeros(1)}, v={"w": np.zeros(1)})


def _batch(ds, n):
    cfp, ifp, labels = ds.arrays(T.default_dtype())
    return cfp[:n], ifp[:n], labels[:n]


def test_cosine_schedule():
    cfg = TrainConfig(epochs=30, base_lr=1e-4)
    assert cosine_lr(0, cfg) == 1e-4
    assert cosine_lr(30, cfg) == 0.0
    assert cosine_lr(15, cfg) == pytest.approx(5e-5, rel=1e-12)
    with pytest.raises(ValueError):
        cosine_lr(31, cfg)
    with pytest.raises(ValueError):
        cosine_lr(-1, cfg)


def test_adam_first_step_by_hand(f64):
    state = adam_step(_scalar_state(), {"w": np.array([1.0])}, 0.1, TrainConfig(weight_decay=0.0))
    assert state.step == 1
    assert state.model.params["w"].data[0] == pytest.approx(0.9, abs=1e-8)


def test_adam_zero_gradient_leaves_parameters(f64):
    state = _scalar_state(0.37)
    for _ in range(3):
        adam_step(state, {"w": np.zeros(1)}, 0.1, TrainConfig(weight_decay=0.0))
    assert state.model.params["w"].data[0] == 0.37


def test_adam_decoupled_weight_decay(f64):
    state = _scalar_state(2.0)
    for _ in range(3):
        adam_step(state, {}, 0.1, TrainConfig(weight_decay=1e-5))
    assert state.model.params["w"].data[0] == pytest.approx(2.0 * (1 - 1e-6) ** 3, rel=1e-15)


def test_adam_rejects_mismatched_gradient(f64):
    with pytest.raises(ShapeError):
        adam_step(_scalar_state(), {"w": np.zeros(2)}, 0.1, TrainConfig())


@pytest.mark.parametrize("overrides,field", [
    ({"lam": 1.5}, "train.lambda"),
    ({"epochs": 0}, "train.epochs"),
    ({"batch_size": 0}, "train.batch_size"),
    ({"inference": "vote"}, "train.inference"),
    ({"precision": 16}, "train.precision"),
])
def test_train_config_validation(overrides, field):
    with pytest.raises(ConfigError) as err:
        TrainConfig(**overrides).validate()
    assert err.value.field == field


def test_train_config_serializes_lambda():
    doc = TrainConfig().to_dict()
    assert doc["lambda"] == 0.6 and "lam" not in doc


def _head_grads_are_zero(model, grads, stream):
    return all(not np.any(grads.get(name, 0.0)) for name in model.group_names(f"head_{stream}"))


def test_lambda_one_disconnects_the_ifp_head(f64, tiny_dataset):
    model = CrossFundusTransformer(tiny_model_config(), seed=0)
    cfp, ifp, labels = _batch(tiny_dataset, 6)
    for enable_l_if in (True, False):
        grads, _ = compute_grads(model, cfp, ifp, labels, TrainConfig(lam=1.0, enable_l_if=enable_l_if))
        assert _head_grads_are_zero(model, grads, "if")
        assert not _head_grads_are_zero(model, grads, "cf")


def test_lambda_zero_disconnects_the_cfp_head(f64, tiny_dataset):
    model = CrossFundusTransformer(tiny_model_config(), seed=0)
    grads, _ = compute_grads(model, *_batch(tiny_dataset, 6), TrainConfig(lam=0.0))
    assert _head_grads_are_zero(model, grads, "cf")
    assert not _head_grads_are_zero(model, grads, "if")


def test_classifier_only_training_freezes_both_heads(f64, tiny_dataset):
    model = CrossFundusTransformer(tiny_model_config(), seed=0)
    cfg = TrainConfig(enable_l_cf=False, enable_l_if=False)
    grads, _ = compute_grads(model, *_batch(tiny_dataset, 6), cfg)
    assert _head_grads_are_zero(model, grads, "cf")
    assert _head_grads_are_zero(model, grads, "if")
    assert any(np.any(grads[n]) for n in model.group_names("cf.encoder"))
    assert cfg.heads == ()


def test_parallel_gradients_match_serial(f64, tiny_dataset):
    model = CrossFundusTransformer(tiny_model_config(), seed=2)
    batch = _batch(tiny_dataset, 7)
    serial, serial_loss = compute_grads(model, *batch, TrainConfig(), threads=1)
    parallel, parallel_loss = compute_grads(model, *batch, TrainConfig(), threads=3)
    assert parallel_loss == pytest.approx(serial_loss, rel=1e-12)
    assert set(parallel) == set(serial)
    for name in serial:
        np.testing.assert_allclose(parallel[name], serial[name], rtol=1e-9, atol=1e-14)


def test_non_finite_loss_aborts(f64, tiny_dataset):
    model = CrossFundusTransformer(tiny_model_config(), seed=0)
    weight = model.params["cfa.classifier.linear.weight"]
    weight.assign(np.full(weight.shape, np.nan))
    with pytest.raises(NonFiniteError):
        compute_grads(model, *_batch(tiny_dataset, 4), TrainConfig())


def _small_run(tiny_dataset, **overrides):
    train_ds, val_ds = stratified_split(tiny_dataset, 0.8, seed=0)
    cfg = replace(TrainConfig(epochs=2, batch_size=8, seed=5), **overrides)
    return train_ds, val_ds, cfg


def test_training_is_deterministic(tiny_dataset):
    train_ds, val_ds, cfg = _small_run(tiny_dataset, epochs=1)
    train_ds = train_ds.subset(range(8))
    a_state, a = train(train_ds, val_ds, tiny_model_config(), cfg)
    b_state, b = train(train_ds, val_ds, tiny_model_config(), cfg)
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]
    for name, value in a_state.model.state_dict().items():
        assert value.tobytes() == b_state.model.params[name].data.tobytes()


def test_history_and_best_kappa(tiny_dataset):
    train_ds, val_ds, cfg = _small_run(tiny_dataset)
    seen = []
    state, history = train(train_ds, val_ds, tiny_model_config(), cfg,
                           on_epoch_end=lambda s, r: seen.append(r.epoch))
    assert seen == [0, 1] and [r.epoch for r in history] == [0, 1]
    assert history[0].lr == cfg.base_lr
    assert state.epoch == 2 and state.step == 2 * 4
    assert state.best_kappa == max(r.report.kappa for r in history)
    assert state.best_params is not None


def test_resume_from_checkpoint_is_bitwise_identical(tmp_path, tiny_dataset):
    train_ds, val_ds, cfg = _small_run(tiny_dataset)
    prefix = str(tmp_path / "ckpt")

    def save_first_epoch(state, record):
        if record.epoch == 0:
            save_checkpoint(prefix, state, cfg.to_dict())

    full_state, full = train(train_ds, val_ds, tiny_model_config(), cfg, on_epoch_end=save_first_epoch)
    restored, manifest = load_checkpoint(prefix)
    assert manifest["epoch"] == 1 and manifest["train_config"]["lambda"] == 0.6
    resumed_state, resumed = train(train_ds, val_ds, tiny_model_config(), cfg, state=restored)

    assert [r.epoch for r in resumed] == [1]
    assert resumed[0].to_dict() == full[1].to_dict()
    for name, p in full_state.model.params.items():
        assert p.data.tobytes() == resumed_state.model.params[name].data.tobytes()
        assert full_state.m[name].tobytes() == resumed_state.m[name].tobytes()


def test_training_loss_goes_down(tiny_synth):
    ds = generate_dataset(replace(tiny_synth, n_samples=100, seed=11))
    train_ds, val_ds = stratified_split(ds, 0.8, seed=0)
    cfg = TrainConfig(epochs=5, base_lr=2e-3, batch_size=10, augment=False, seed=1)
    _, history = train(train_ds, val_ds, tiny_model_config(), cfg)
    assert history[-1].mean_loss < history[0].mean_loss


def test_empty_training_set_is_rejected(tiny_dataset):
    empty = tiny_dataset.subset([])
    with pytest.raises(ConfigError):
        train(empty, tiny_dataset, tiny_model_config(), TrainConfig(epochs=1))


class _StubModel:
    """Fixed logits computed from the images alone"""

    def __init__(self, fn, k=5):
        self.fn = fn
        self.k = k

    def infer(self, cfp, ifp):
        cls = np.stack([np.eye(self.k)[self.fn(img)] for img in cfp])
        return ModelOutput(logits_cf=Tensor(np.zeros_like(cls)), logits_if=Tensor(np.zeros_like(cls)),
                           logits_cls=Tensor(cls))


def _labelled_dataset(n=20, k=5):
    samples = []
    for i in range(n):
        img = np.zeros((4, 4, 1), dtype=np.float32)
        img[0, 0, 0] = (i % k) / 10.0
        samples.append(PairedSample(cfp=img, ifp=img.copy(), label=i % k))
    return Dataset(samples=samples, H=4, W=4, C_in=1, k=k)


def test_constant_predictor_scores_chance():
    report = evaluate(_StubModel(lambda img: 2), _labelled_dataset(), batch_size=7)
    assert report.accuracy == pytest.approx(0.2)
    assert report.kappa == pytest.approx(0.0)
    assert report.n_samples == 20


def test_oracle_predictor_scores_one():
    report = evaluate(_StubModel(lambda img: int(round(img[0, 0, 0] * 10))), _labelled_dataset())
    assert report.kappa == 1.0 and report.accuracy == 1.0 and report.macro_f1 == 1.0
    again = EvalReport.from_confusion(report.confusion)
    assert again.to_dict() == report.to_dict()


def test_evaluate_empty_dataset():
    with pytest.raises(UndefinedMetricError):
        evaluate(_StubModel(lambda img: 0), _labelled_dataset().subset([]))


def test_predict_rules(f64, tiny_dataset):
    cfp, ifp, labels = _batch(tiny_dataset, 5)
    model = CrossFundusTransformer(tiny_model_config(), seed=0)
    out = model.infer(cfp, ifp)
    cf, if_, cls = out.logits_cf.data, out.logits_if.data, out.logits_cls.data
    np.testing.assert_array_equal(predict(model, cfp, ifp, "combine"), np.argmax((cf + if_) / 2 + cls, axis=-1))
    np.testing.assert_array_equal(predict(model, cfp, ifp, "combine", heads=()), np.argmax(cls, axis=-1))
    np.testing.assert_array_equal(predict(model, cfp, ifp, "cf_head"), np.argmax(cf, axis=-1))
    assert predict(model, cfp, ifp, "voting_average").shape == (5,)
    with pytest.raises(ConfigError):
        predict(model, cfp, ifp, "median")


def test_voting_needs_both_streams(f64, tiny_dataset):
    cfp, _, _ = _batch(tiny_dataset, 2)
    model = CrossFundusTransformer(replace(tiny_model_config(mode="none"), streams=("cf",)), seed=0)
    with pytest.raises(ConfigError):
        predict(model, cfp, None, "voting_max")
    assert predict(model, cfp, None, "cf_head").shape == (2,)


def test_relative_error():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)
    assert relative_error(1e-12, 0.0) == pytest.approx(1e-4)


def test_central_difference_is_second_order(f64):
    """Halving h cuts the truncation error by four"""
    x = Param(np.array([0.7]), "x")
    with T.Graph() as g:
        y = T.sum_all(T.gelu(x))
    T.backward(g, y)

    def error(h):
        numeric = central_difference(lambda: T.gelu(Tensor(x.data)).item(), x.data, (0,), h)
        return abs(numeric - x.grad[0])

    assert x.data[0] == 0.7
    assert error(2e-2) / error(1e-2) == pytest.approx(4.0, rel=0.02)


def test_grad_check_on_the_tiny_model(tiny_dataset):
    report = grad_check(tiny_model_config(), tiny_dataset.samples[2], lam=0.6, seed=0, n_coords=200)
    summary = report.to_dict()
    n_params = len(CrossFundusTransformer(tiny_model_config()).params)
    assert summary["n_checked"] >= 200
    assert summary["params_covered"] == n_params
    assert report.fraction_below(1e-4) >= 0.99
    assert report.max_rel_err < 1e-3


def test_grad_check_with_lambda_zero_sees_a_dead_cfp_head(tiny_dataset):
    report = grad_check(tiny_model_config(), tiny_dataset.samples[3], lam=0.0, n_coords=0)
    head = [e for e in report.entries if e.param.startswith("head_cf.")]
    assert head
    assert all(e.analytic == 0.0 and e.numeric == 0.0 for e in head)
