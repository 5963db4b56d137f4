import math

import numpy as np
import pytest

from pfedgat.client import (
    ClientState,
    MlpSpec,
    client_feedback,
    client_rng,
    evaluate,
    forward_loss,
    init_params,
    local_train,
    loss_and_grad,
    loss_gradient_wrt_params,
)
from pfedgat.data import Dataset, PartitionSpec, generate_synthetic, partition


def _scalar_loss(spec, params, X, y):
    """Loop-only re-implementation of the MLP forward pass and mean cross-entropy."""
    widths = spec.layer_widths
    total = 0.0
    for x, label in zip(X, y):
        act = list(x)
        off = 0
        for li in range(len(widths) - 1):
            n_in, n_out = widths[li], widths[li + 1]
            W = params[off:off + n_in * n_out]
            off += n_in * n_out
            b = params[off:off + n_out]
            off += n_out
            pre = [sum(W[o * n_in + i] * act[i] for i in range(n_in)) + b[o] for o in range(n_out)]
            if li < len(widths) - 2:
                act = [p if p >= 0 else spec.hidden_slope * p for p in pre]
            else:
                act = pre
        m = max(act)
        lse = m + math.log(sum(math.exp(v - m) for v in act))
        total += lse - act[label]
    return total / len(y)


def _toy_state(spec, X, y, cid=0, seed=0):
    ds = Dataset(np.asarray(X, float), np.asarray(y), spec.n_classes)
    idx = np.arange(len(y))
    return ClientState(cid, spec, init_params(spec, client_rng(seed, cid)), ds, idx, idx, rng=client_rng(seed, cid))


def test_param_count_and_unflatten():
    spec = MlpSpec((32, 64, 32, 10))
    assert spec.n_params == 32 * 64 + 64 + 64 * 32 + 32 + 32 * 10 + 10
    flat = np.arange(spec.n_params, dtype=float)
    (W0, b0), *_ = spec.unflatten(flat)
    assert W0.shape == (64, 32) and b0[0] == 64 * 32
    with pytest.raises(ValueError):
        spec.unflatten(np.zeros(3))
    with pytest.raises(ValueError):
        MlpSpec((5,))


def test_glorot_init_bounds():
    spec = MlpSpec((4, 6, 3))
    flat = init_params(spec, np.random.default_rng(0))
    for (W, b), (o, i) in zip(spec.unflatten(flat), spec.shapes):
        assert np.all(np.abs(W) <= math.sqrt(6 / (o + i)))
        assert np.all(b == 0)


def test_zero_params_give_log_c():
    spec = MlpSpec((3, 4, 5))
    X = np.random.default_rng(0).standard_normal((7, 3))
    loss, probs = forward_loss(spec, np.zeros(spec.n_params), X, np.arange(7) % 5)
    assert loss == pytest.approx(math.log(5), abs=1e-15)
    np.testing.assert_allclose(probs, 0.2)


def test_perfect_margin_gives_zero_loss():
    spec = MlpSpec((1, 2))
    # W = [[50], [0]], b = 0  -> logits [50, 0] for x = 1
    params = np.array([50.0, 0.0, 0.0, 0.0])
    loss, _ = forward_loss(spec, params, [[1.0]], [0])
    assert loss == pytest.approx(math.log1p(math.exp(-50.0)), abs=1e-15)
    assert loss < 1e-10


def test_forward_matches_scalar_reimplementation():
    spec = MlpSpec((3, 4, 2))
    rng = np.random.default_rng(1)
    params = rng.standard_normal(spec.n_params)
    X, y = rng.standard_normal((3, 3)), np.array([0, 1, 1])
    loss, _ = forward_loss(spec, params, X, y)
    assert abs(loss - _scalar_loss(spec, params, X, y)) < 1e-12


def test_forward_dimension_mismatch():
    spec = MlpSpec((3, 2))
    with pytest.raises(ValueError):
        forward_loss(spec, np.zeros(spec.n_params), np.zeros((2, 4)), [0, 1])
    with pytest.raises(ValueError):
        forward_loss(spec, np.zeros(spec.n_params), np.zeros((0, 3)), [])


def test_duplicated_batch_has_same_loss():
    spec = MlpSpec((3, 4, 2))
    rng = np.random.default_rng(2)
    params, X, y = rng.standard_normal(spec.n_params), rng.standard_normal((4, 3)), np.array([0, 1, 0, 1])
    a, _ = forward_loss(spec, params, X, y)
    b, _ = forward_loss(spec, params, np.vstack([X, X]), np.concatenate([y, y]))
    assert a == pytest.approx(b, abs=1e-14)


def _fd_grad(spec, params, X, y, h=1e-5):
    g = np.zeros_like(params)
    for k in range(len(params)):
        e = np.zeros_like(params)
        e[k] = h
        g[k] = (_scalar_loss(spec, params + e, X, y) - _scalar_loss(spec, params - e, X, y)) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    spec = MlpSpec((2, 3, 2))
    rng = np.random.default_rng(seed)
    params = rng.standard_normal(spec.n_params)
    X, y = rng.standard_normal((5, 2)), rng.integers(0, 2, 5)
    g = loss_gradient_wrt_params(spec, params, X, y)
    fd = _fd_grad(spec, params, X, y)
    big = np.abs(fd) > 1e-7
    assert np.all(np.abs(g - fd)[~big] < 1e-7)
    assert np.all(np.abs(g - fd)[big] / np.abs(fd[big]) < 1e-5)


def test_gradient_zero_at_stationary_point():
    # same input, both labels: the zero network is optimal
    spec = MlpSpec((1, 2))
    g = loss_gradient_wrt_params(spec, np.zeros(spec.n_params), [[1.0], [1.0]], [0, 1])
    assert np.max(np.abs(g)) < 1e-8


def test_gradient_scales_with_loss():
    spec = MlpSpec((2, 3, 2))
    rng = np.random.default_rng(4)
    params, X, y = rng.standard_normal(spec.n_params), rng.standard_normal((4, 2)), np.array([0, 1, 1, 0])
    g = loss_gradient_wrt_params(spec, params, X, y)
    # duplicating the batch three times leaves the mean (and so the gradient) unchanged,
    # while summing three copies scales it by three
    g3 = 3.0 * loss_gradient_wrt_params(spec, params, np.vstack([X] * 3), np.tile(y, 3))
    np.testing.assert_allclose(g3, 3.0 * g, atol=1e-12)


def test_single_sgd_step_matches_hand_computation():
    spec = MlpSpec((2, 2))
    x, label, lr = np.array([0.5, -1.0]), 1, 0.1
    state = _toy_state(spec, [x], [label])
    W = state.params[:4].reshape(2, 2).copy()
    b = state.params[4:].copy()
    logits = W @ x + b
    p = np.exp(logits - logits.max())
    p /= p.sum()
    err = p - np.eye(2)[label]
    expected = np.concatenate([(W - lr * np.outer(err, x)).ravel(), b - lr * err])
    out = local_train(state, epochs=1, lr=lr, batch_size=64)
    np.testing.assert_allclose(out, expected, atol=1e-10)
    np.testing.assert_array_equal(state.params, out)


def test_zero_epochs_is_identity():
    spec = MlpSpec((2, 3, 2))
    state = _toy_state(spec, np.eye(2), [0, 1])
    before = state.params.copy()
    np.testing.assert_array_equal(local_train(state, 0, 0.1, 4), before)


def test_local_train_empty_raises():
    spec = MlpSpec((2, 2))
    state = _toy_state(spec, np.eye(2), [0, 1])
    state.train_idx = np.zeros(0, dtype=int)
    with pytest.raises(ValueError):
        local_train(state, 1, 0.1, 4)


def _synthetic_client(seed, sep=5.0, widths=(8, 16, 4)):
    ds = generate_synthetic(4, 50, 8, sep, seed=seed)
    part = partition(ds, 1, PartitionSpec(mode="iid", seed=seed))
    spec = MlpSpec(widths)
    rng = client_rng(seed, 0)
    return ClientState(0, spec, init_params(spec, rng), ds, part.train[0], part.test[0], rng=rng)


def test_epoch_loss_non_increasing_on_separable_data():
    ok = 0
    for seed in range(20):
        state = _synthetic_client(seed)
        local_train(state, 5, 0.05, 16)
        ok += all(b <= a for a, b in zip(state.epoch_losses, state.epoch_losses[1:]))
    assert ok >= 19


def test_local_train_is_deterministic():
    a, b = _synthetic_client(3), _synthetic_client(3)
    np.testing.assert_array_equal(local_train(a, 2, 0.05, 8), local_train(b, 2, 0.05, 8))


def test_evaluate_zero_params_and_purity():
    spec = MlpSpec((2, 3))
    X, y = np.random.default_rng(0).standard_normal((10, 2)), np.array([0, 1, 2, 0, 0, 1, 2, 2, 2, 0])
    params = np.zeros(spec.n_params)
    loss, acc = evaluate(spec, params, X, y)
    assert loss == pytest.approx(math.log(3))
    assert acc == pytest.approx(np.mean(y == 0))
    assert evaluate(spec, params, X, y) == (loss, acc)
    np.testing.assert_array_equal(params, 0)


def test_trained_model_is_accurate_on_separable_data():
    state = _synthetic_client(0, sep=6.0)
    local_train(state, 60, 0.1, 16)
    _, acc = evaluate(state.spec, state.params, *state.view("test"))
    assert acc > 0.9


def test_client_feedback_is_pure_and_consistent():
    state = _synthetic_client(1)
    theta = state.params.copy()
    fb = client_feedback(state, theta)
    np.testing.assert_array_equal(state.params, theta)
    loss, acc = evaluate(state.spec, theta, *state.view("test"))
    assert fb.loss == loss and fb.test_accuracy == acc
    np.testing.assert_array_equal(fb.grad_wrt_received, loss_and_grad(state.spec, theta, *state.view("test"))[1])
    assert fb.grad_wrt_received.shape == (state.spec.n_params,)
