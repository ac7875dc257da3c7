import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamtrack.nn import (MLP, AdamState, DenseClassifier, GRULayer, GRUStack, PredictionHead,
                          SequenceClassifier, TrainConfig, adam_step, clip_global_norm,
                          cross_entropy, decode_array, encode_array, grad_check,
                          gru_cell_forward, gru_sequence_forward, prediction_head, sigmoid,
                          softmax, softmax_cross_entropy)


def zero_params(d_in, h):
    p = {}
    for g in "zrh":
        p[f"W_{g}"] = np.zeros((d_in, h))
        p[f"U_{g}"] = np.zeros((h, h))
        p[f"b_{g}"] = np.zeros(h)
    return p


def oracle_cell(p, x, h):
    """Elementwise transcription of the four GRU equations."""
    H = len(h)
    out = np.empty(H)
    s = lambda v: 1.0 / (1.0 + math.exp(-v))  # noqa: E731
    z = [s(sum(x[i] * p["W_z"][i, j] for i in range(len(x)))
           + sum(h[i] * p["U_z"][i, j] for i in range(H)) + p["b_z"][j]) for j in range(H)]
    r = [s(sum(x[i] * p["W_r"][i, j] for i in range(len(x)))
           + sum(h[i] * p["U_r"][i, j] for i in range(H)) + p["b_r"][j]) for j in range(H)]
    for j in range(H):
        c = math.tanh(sum(x[i] * p["W_h"][i, j] for i in range(len(x)))
                      + sum(r[i] * h[i] * p["U_h"][i, j] for i in range(H)) + p["b_h"][j])
        out[j] = (1 - z[j]) * h[j] + z[j] * c
    return out


def test_cell_zero_params():
    p = zero_params(3, 4)
    x = np.array([1.0, -2.0, 0.5])
    assert np.all(gru_cell_forward(p, x, np.zeros(4)) == 0.0)
    v = np.array([0.3, -1.0, 2.0, 0.0])
    np.testing.assert_allclose(gru_cell_forward(p, x, v), 0.5 * v, atol=1e-15)


def test_cell_matches_oracle(rng):
    layer = GRULayer(3, 4, rng)
    for _ in range(5):
        x, h = rng.normal(size=3), rng.normal(size=4)
        np.testing.assert_allclose(layer.cell(x, h), oracle_cell(layer.params, x, h), atol=1e-12)


def test_cell_dim_mismatch():
    with pytest.raises(ValueError):
        gru_cell_forward(zero_params(3, 4), np.zeros(2), np.zeros(4))


def test_layer_forward_equals_cell_loop(rng):
    layer = GRULayer(3, 5, rng)
    X = rng.normal(size=(2, 6, 3))
    H = layer.forward(X)
    h = np.zeros((2, 5))
    for t in range(6):
        h = layer.cell(X[:, t], h)
        np.testing.assert_allclose(H[:, t], h, atol=1e-13)


def test_single_step_stack_equals_cells(rng):
    stack = GRUStack(3, 4, 2, rng=rng)
    x = rng.normal(size=(1, 1, 3))
    h1 = stack.fwd[0].cell(x[0, 0], np.zeros(4))
    h2 = stack.fwd[1].cell(h1, np.zeros(4))
    np.testing.assert_allclose(gru_sequence_forward(stack, x)[0], h2, atol=1e-13)


def test_eval_mode_ignores_dropout(rng):
    stack = GRUStack(3, 4, 3, bidirectional=True, dropout=0.0, rng=np.random.default_rng(1))
    X = rng.normal(size=(4, 5, 3))
    a = gru_sequence_forward(stack, X, dropout=0.0, train=False)
    b = gru_sequence_forward(stack, X, dropout=0.2, train=False)
    assert np.array_equal(a, b)
    c = gru_sequence_forward(stack, X, dropout=0.2, train=True, rng=np.random.default_rng(0))
    assert not np.array_equal(a, c)


def test_bidirectional_palindrome_tied(rng):
    stack = GRUStack(3, 4, 1, bidirectional=True, rng=rng)
    for k, v in stack.fwd[0].params.items():
        stack.bwd[0].params[k][...] = v
    half = rng.normal(size=(2, 3, 3))
    X = np.concatenate([half, half[:, ::-1]], axis=1)
    rep = gru_sequence_forward(stack, X, bidirectional=True)
    np.testing.assert_allclose(rep[:, :4], rep[:, 4:], atol=1e-13)


def test_head_shapes_and_zero_weights():
    head = PredictionHead(8, 5, 128)
    assert prediction_head(head, np.ones(8)).shape == (1, 5, 128)
    for v in head.dense.params.values():
        v[...] = 0
    probs = softmax(prediction_head(head, np.ones((3, 8))))
    np.testing.assert_allclose(probs, 1 / 128, atol=1e-15)
    assert np.argmax(probs, axis=-1).shape == (3, 5)
    with pytest.raises(ValueError):
        prediction_head(head, np.ones(7))


def test_cross_entropy_examples(rng):
    assert cross_entropy(np.zeros((5, 128)), np.arange(5)) == pytest.approx(math.log(128), abs=1e-12)
    logits = np.zeros((2, 10))
    logits[0, 3] = logits[1, 7] = 1e3
    assert cross_entropy(logits, [3, 7]) < 1e-12
    logits = rng.normal(size=(5, 16)) * 3
    labels = rng.integers(0, 16, 5)
    want = np.mean([math.log(sum(math.exp(v) for v in row)) - row[l]
                    for row, l in zip(logits, labels)])
    assert cross_entropy(logits, labels) == pytest.approx(want, abs=1e-10)
    with pytest.raises(IndexError):
        cross_entropy(np.zeros((1, 4)), [4])


def test_softmax_ce_gradient_rows_sum_zero(rng):
    _, g = softmax_cross_entropy(rng.normal(size=(3, 5, 7)), rng.integers(0, 7, (3, 5)))
    np.testing.assert_allclose(g.sum(axis=-1), 0, atol=1e-15)


def test_sigmoid_stable():
    x = np.array([-1000.0, 0.0, 1000.0])
    np.testing.assert_allclose(sigmoid(x), [0, 0.5, 1])


def test_adam_first_step_magnitude():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    g = {"w": np.array([0.5, -4.0, 1e-3])}
    adam_step(p, g, AdamState(), lr=0.01)
    np.testing.assert_allclose(p["w"], [0.99, -1.99, 2.99], atol=1e-7)


def test_adam_zero_grad_noop():
    p = {"w": np.array([1.0, 2.0])}
    before = p["w"].copy()
    st_ = AdamState()
    for _ in range(3):
        adam_step(p, {"w": np.zeros(2)}, st_)
    assert np.array_equal(p["w"], before)


def test_adam_two_steps_hand_unrolled():
    lr, b1, b2, eps, g = 0.1, 0.9, 0.999, 1e-8, 0.3
    w = 1.0
    m1 = (1 - b1) * g
    v1 = (1 - b2) * g * g
    w1 = w - lr * (m1 / (1 - b1)) / (math.sqrt(v1 / (1 - b2)) + eps)
    m2 = b1 * m1 + (1 - b1) * g
    v2 = b2 * v1 + (1 - b2) * g * g
    w2 = w1 - lr * (m2 / (1 - b1**2)) / (math.sqrt(v2 / (1 - b2**2)) + eps)
    p = {"w": np.array([w])}
    s = AdamState()
    for _ in range(2):
        adam_step(p, {"w": np.array([g])}, s, lr, b1, b2, eps)
    assert p["w"][0] == pytest.approx(w2, abs=1e-12)


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_global_norm(g, 1.0) == pytest.approx(5.0)
    assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0, abs=1e-9)
    g = {"a": np.array([0.3])}
    clip_global_norm(g, None)
    assert g["a"][0] == 0.3


def _seq_batch(rng, B=3, T=4, D=5, m=2, Q=6):
    return rng.normal(size=(B, T, D)), rng.integers(0, Q, (B, m))


def test_grad_check_dense(rng):
    model = DenseClassifier(10, 2, 6, seed=1)
    X = rng.normal(size=(4, 10))
    rep = grad_check(model, (X, rng.integers(0, 6, (4, 2))), tolerance=1e-6)
    assert rep.passed and rep.num_coords >= 60


@pytest.mark.parametrize("bidirectional", [False, True])
def test_grad_check_gru(rng, bidirectional):
    model = SequenceClassifier(5, 16, 2, 2, 6, bidirectional=bidirectional, seed=2)
    rep = grad_check(model, _seq_batch(rng), tolerance=1e-4, num_coords=200)
    assert rep.num_coords >= 200
    assert rep.passed, rep


def test_grad_check_detects_planted_fault(rng):
    model = SequenceClassifier(5, 8, 1, 2, 6, seed=3)
    original = model.loss_and_grads

    def corrupted(*batch):
        loss, grads = original(*batch)
        grads = dict(grads)
        grads["l0.fwd.U_h"] = grads["l0.fwd.U_h"] * 2
        return loss, grads

    model.loss_and_grads = corrupted
    rep = grad_check(model, _seq_batch(rng), num_coords=300)
    assert rep.max_rel_error > 0.1 and rep.worst_param == "l0.fwd.U_h"


def test_mlp_grad_check(rng):
    net = MLP([4, 6, 3, 4], ["tanh", "sigmoid", "linear"], rng)

    class Wrap:
        params = net.params

        def loss_and_grads(self, x, y):
            net.zero_grad()
            out = net.forward(x)
            loss = float(np.mean((out - y) ** 2))
            net.backward(2 * (out - y) / out.size)
            return loss, net.grads

    rep = grad_check(Wrap(), (rng.normal(size=(5, 4)), rng.normal(size=(5, 4))), num_coords=80)
    assert rep.max_rel_error < 1e-6


def _fit(model, X, y, lr, epochs):
    state = AdamState()
    losses = []
    for _ in range(epochs):
        loss, grads = model.loss_and_grads(X, y)
        adam_step(model.params, grads, state, lr)
        losses.append(loss)
    return losses


def test_zero_lr_leaves_params_identical(rng):
    model = SequenceClassifier(5, 8, 2, 2, 6, seed=0)
    before = {k: v.copy() for k, v in model.params.items()}
    _fit(model, *_seq_batch(rng), lr=0.0, epochs=3)
    assert all(np.array_equal(before[k], v) for k, v in model.params.items())


def test_overfit_fifty_instances(rng):
    X = rng.normal(size=(50, 4, 8))
    y = rng.integers(0, 10, (50, 2))
    model = SequenceClassifier(8, 32, 1, 2, 10, seed=0)
    losses = _fit(model, X, y, lr=0.01, epochs=500)
    assert all(b < a for a, b in zip(losses[:5], losses[1:6]))
    assert min(losses) < 0.05


def test_inference_deterministic(rng):
    model = SequenceClassifier(5, 8, 2, 2, 6, bidirectional=True, dropout=0.3, seed=0)
    X, _ = _seq_batch(rng)
    assert np.array_equal(model.forward(X), model.forward(X))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(dropout=1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    assert TrainConfig().learning_rate == 1e-3 and TrainConfig().batch_size == 1000


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(["<f8", "<f4", "<i8"]), st.lists(st.integers(1, 4), min_size=0, max_size=3))
def test_array_encoding_roundtrip(dtype, shape):
    a = (np.arange(int(np.prod(shape)) if shape else 1) * 1.5).astype(dtype).reshape(shape)
    b = decode_array(encode_array(a))
    assert b.dtype == a.dtype and np.array_equal(a, b)
