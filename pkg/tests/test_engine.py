import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from otlab.data import Dataset, LabeledImage
from otlab.engine import (
    Schedule,
    backward,
    forward,
    forward_features,
    init_model,
    save_checkpoint,
    read_checkpoint,
    load_checkpoint,
    softmax_cross_entropy,
    softmax_cross_entropy_value,
    sgd_step,
    trace,
    train_classifier,
)
from otlab.engine import autodiff as ad
from otlab.engine.model import Conv, Dense, Model
from otlab.errors import ConfigError, CorruptionError, DivergenceError, FormatError, StateError

from oracles import conv2d_loops, finite_difference, maxpool_loops, rel_error, softmax_ce_loops


def small_config(classes=3):
    return {
        "input": [6, 6, 1],
        "layers": [
            {"type": "conv", "kernel": [3, 3], "filters": 2, "padding": 1},
            {"type": "relu"},
            {"type": "maxpool", "window": 2},
            {"type": "dense", "units": 5},
            {"type": "dense", "units": classes},
        ],
    }


# ----------------------------------------------------------------- forward

def test_zero_parameters_give_zero_logits(rng):
    model = init_model(small_config(), rng)
    for name in model.params:
        model.params[name][:] = 0.0
    logits = forward(model, rng.random((4, 6, 6, 1)))
    np.testing.assert_array_equal(logits, np.zeros((4, 3)))


def test_identity_conv_on_single_pixel():
    # one 1x1 conv with unit weight: logits equal the input values
    model = Model((1, 1, 1), [Conv((1, 1), 1)],
                  {"conv1.weight": np.ones((1, 1, 1, 1)), "conv1.bias": np.zeros(1)})
    x = np.array([0.25, 0.75]).reshape(2, 1, 1, 1)
    out = forward(model, x)
    np.testing.assert_array_equal(out.ravel(), [0.25, 0.75])


def test_forward_matches_loop_oracle(rng):
    model = init_model(small_config(), rng)
    x = rng.random((2, 6, 6, 1))
    expected = conv2d_loops(x, model.params["conv1.weight"], model.params["conv1.bias"], padding=1)
    expected = np.maximum(expected, 0.0)
    expected = maxpool_loops(expected, 2)
    expected = expected.reshape(2, -1) @ model.params["dense1.weight"] + model.params["dense1.bias"]
    expected = expected @ model.params["dense2.weight"] + model.params["dense2.bias"]
    np.testing.assert_allclose(forward(model, x), expected, rtol=1e-12, atol=1e-12)


def test_forward_is_pure(rng):
    model = init_model(small_config(), rng)
    x = rng.random((3, 6, 6, 1))
    first = forward(model, x)
    second = forward(model, x)
    assert np.array_equal(first, second)


def test_forward_rejects_wrong_shape(rng):
    model = init_model(small_config(), rng)
    with pytest.raises(ValueError, match="does not match"):
        forward(model, rng.random((1, 5, 6, 1)))


def test_shapes_must_compose():
    with pytest.raises(ConfigError):
        init_model({"input": [4, 4, 1],
                    "layers": [{"type": "conv", "kernel": [7, 7], "filters": 1}]},
                   np.random.default_rng(0))


# ------------------------------------------------------------- softmax CE

def test_uniform_logits_loss_is_log_k():
    logits = np.zeros((5, 4))
    loss, probs = softmax_cross_entropy_value(logits, [0, 1, 2, 3, 0])
    assert loss == pytest.approx(np.log(4.0), abs=1e-12)
    np.testing.assert_allclose(probs, 0.25)


def test_saturated_correct_logit_loss_vanishes():
    logits = np.array([[50.0, 0.0, 0.0]])
    loss, _ = softmax_cross_entropy_value(logits, [0])
    assert 0.0 <= loss < 1e-20


def test_softmax_ce_matches_scalar_oracle():
    logits = np.array([[1.0, 2.0, 0.5]])
    expected_loss, expected_probs = softmax_ce_loops(logits, [1])
    loss, probs = softmax_cross_entropy_value(logits, [1])
    assert loss == pytest.approx(expected_loss, abs=1e-14)
    np.testing.assert_allclose(probs, expected_probs, atol=1e-14)


def test_probability_rows_sum_to_one(rng):
    logits = rng.normal(scale=10.0, size=(8, 6))
    _, probs = softmax_cross_entropy_value(logits, rng.integers(0, 6, size=8))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


@given(shift=st.floats(min_value=-100, max_value=100, allow_nan=False))
def test_softmax_invariant_to_constant_shift(shift):
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(4, 5))
    labels = [0, 4, 2, 1]
    loss_a, probs_a = softmax_cross_entropy_value(logits, labels)
    loss_b, probs_b = softmax_cross_entropy_value(logits + shift, labels)
    assert abs(loss_a - loss_b) < 1e-12
    assert np.max(np.abs(probs_a - probs_b)) < 1e-12


def test_label_out_of_range_rejected():
    with pytest.raises(ValueError, match="labels"):
        softmax_cross_entropy_value(np.zeros((2, 3)), [0, 3])


# ---------------------------------------------------------------- backward

def test_detached_loss_gives_all_zero_gradients(rng):
    model = init_model(small_config(), rng)
    run = trace(model, rng.random((2, 6, 6, 1)))
    grads = backward(run, ad.Node(np.float64(3.0)))
    assert set(grads) == set(model.params)
    assert all(np.all(g == 0.0) for g in grads.values())


def test_single_linear_layer_squared_loss_closed_form(rng):
    # loss = mean over batch of ||x w - y||^2  =>  dL/dw = 2 x^T (x w - y) / N
    model = Model((1, 3, 1), [Dense(1)],
                  {"dense1.weight": rng.normal(size=(3, 1)), "dense1.bias": np.zeros(1)})
    x = rng.normal(size=(5, 3))
    y = rng.normal(size=(5, 1))
    run = trace(model, x.reshape(5, 1, 3, 1))
    loss = ad.mean_along(ad.sum_along(ad.square(run.logits - y), axis=1))
    grads = backward(run, loss)
    expected = 2.0 * x.T @ (x @ model.params["dense1.weight"] - y) / 5
    np.testing.assert_allclose(grads["dense1.weight"], expected, rtol=1e-12)


def test_model_gradients_match_finite_differences(rng):
    model = init_model(small_config(), rng)
    x = rng.random((3, 6, 6, 1))
    labels = np.array([0, 2, 1])
    run = trace(model, x)
    loss_node, _ = softmax_cross_entropy(run.logits, labels)
    grads = backward(run, loss_node)

    for name, param in model.params.items():
        def f():
            return softmax_cross_entropy_value(forward(model, x), labels)[0]

        fd = finite_difference(f, param)
        assert rel_error(grads[name], fd) < 1e-4, name


def test_backward_without_recorded_forward_errors(rng):
    model = init_model(small_config(), rng)
    run = trace(model, rng.random((1, 6, 6, 1)))
    with pytest.raises(StateError):
        backward(run, np.float64(1.0))


def test_features_stop_before_classifier(rng):
    model = init_model(small_config(), rng)
    x = rng.random((2, 6, 6, 1))
    feats = forward_features(model, x)
    assert feats.shape == (2, 5)
    manual = feats @ model.params["dense2.weight"] + model.params["dense2.bias"]
    np.testing.assert_allclose(manual, forward(model, x), rtol=1e-12)


# --------------------------------------------------------------------- SGD

def test_zero_learning_rate_keeps_parameters(rng):
    params = {"w": rng.normal(size=(3,))}
    before = params["w"].copy()
    sgd_step(params, {}, {"w": rng.normal(size=(3,))}, lr=0.0, momentum=0.9)
    np.testing.assert_array_equal(params["w"], before)


def test_single_step_arithmetic():
    params = {"w": np.array([1.0])}
    sgd_step(params, {}, {"w": np.array([2.0])}, lr=0.1, momentum=0.0)
    assert params["w"][0] == pytest.approx(0.8, abs=1e-15)


def test_momentum_matches_unrolled_recurrence():
    params = {"w": np.array([1.0])}
    velocities = {}
    grads = [0.5, -0.25, 1.5]
    for g in grads:
        sgd_step(params, velocities, {"w": np.array([g])}, lr=0.1, momentum=0.9)

    # independent hand-unrolled recurrence
    p, v = 1.0, 0.0
    for g in grads:
        v = 0.9 * v - 0.1 * g
        p = p + v
    assert params["w"][0] == pytest.approx(p, abs=1e-15)


def test_missing_gradient_key_raises():
    with pytest.raises(KeyError):
        sgd_step({"w": np.ones(1)}, {}, {}, lr=0.1, momentum=0.0)


# --------------------------------------------------------------- training

def _toy_separable():
    rng = np.random.default_rng(3)
    images = []
    for i in range(20):
        for label, center in ((0, (1.0, 0.0)), (1, (0.0, 1.0))):
            pix = np.array([center]) + rng.normal(scale=0.05, size=(1, 2))
            images.append(LabeledImage(pixels=pix, label=label, id=f"{label}-{i}"))
    return Dataset(images=images, class_count=2)


def test_linearly_separable_set_trains_below_threshold():
    dataset = _toy_separable()
    model = init_model({"input": [1, 2, 1],
                        "layers": [{"type": "dense", "units": 2}]},
                       np.random.default_rng(0))
    rows = train_classifier(model, dataset, Schedule(steps=500, lr=0.1, batch_size=8),
                            np.random.default_rng(1))
    assert rows[-1][1] < 0.01


def test_train_zero_steps_is_identity(rng):
    dataset = _toy_separable()
    model = init_model({"input": [1, 2, 1], "layers": [{"type": "dense", "units": 2}]}, rng)
    before = {k: v.copy() for k, v in model.params.items()}
    rows = train_classifier(model, dataset, Schedule(steps=0), np.random.default_rng(0))
    assert rows == []
    for k in before:
        np.testing.assert_array_equal(model.params[k], before[k])


def test_divergence_raises():
    dataset = _toy_separable()
    model = init_model({"input": [1, 2, 1], "layers": [{"type": "dense", "units": 2}]},
                       np.random.default_rng(0))
    model.params["dense1.weight"][:] = np.nan
    with pytest.raises(DivergenceError, match="non-finite loss"):
        train_classifier(model, dataset, Schedule(steps=5), np.random.default_rng(0))


# ------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_is_bit_exact(rng, tmp_path):
    model = init_model(small_config(), rng)
    state = {"bit_generator": "PCG64", "state": {"state": 123, "inc": 5}}
    path = tmp_path / "model.otl"
    save_checkpoint(model, path, rng_state=state, training_meta={"stage": "test", "steps": 7})
    loaded = read_checkpoint(path)
    assert set(loaded.model.params) == set(model.params)
    for name in model.params:
        assert np.array_equal(loaded.model.params[name], model.params[name])
    assert loaded.rng_state == state
    assert loaded.training_meta["steps"] == 7
    assert loaded.model.to_config() == model.to_config()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.otl"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    import json
    header = json.dumps({"format_version": 0, "model_config": {}, "tensors": {},
                         "rng_state": None, "training_meta": {}}).encode()
    path = tmp_path / "old.otl"
    path.write_bytes(b"OTL1" + len(header).to_bytes(4, "little") + header)
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(path)


def test_checkpoint_truncated_payload(rng, tmp_path):
    model = init_model(small_config(), rng)
    path = tmp_path / "model.otl"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    with pytest.raises(CorruptionError):
        load_checkpoint(path)


def test_checkpoint_same_model_same_bytes(rng, tmp_path):
    model = init_model(small_config(), rng)
    p1, p2 = tmp_path / "a.otl", tmp_path / "b.otl"
    save_checkpoint(model, p1, training_meta={"stage": "x"})
    save_checkpoint(model, p2, training_meta={"stage": "x"})
    assert p1.read_bytes() == p2.read_bytes()
