import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfedgat.client import ClientFeedback
from pfedgat.gat import GatHead, GatParams, allocation_matrix, build_node_features
from pfedgat.gat_optimizer import HeadGrad, apply_update, backward, total_loss

from oracles import _random_instance, _surrogate, fd_check


def test_total_loss():
    fb = lambda v: ClientFeedback(v, np.zeros(1), 0.0)  # noqa: E731
    assert total_loss([fb(1.0), fb(2.0), fb(3.0)]) == 6.0
    assert total_loss([fb(0.7)]) == 0.7
    assert total_loss([fb(0.0), fb(0.0)]) == 0.0
    with pytest.raises(ValueError):
        total_loss([])


def test_zero_feedback_gives_zero_gradients():
    uploads, _, gat = _random_instance(0)
    R, tape = allocation_matrix(build_node_features(uploads), gat)
    grads = backward(tape, uploads, [np.zeros(6)] * 3)
    for g in grads:
        assert not g.dW.any() and not g.da.any()
    new = apply_update(gat, grads, 0.01)
    for a, b in zip(new.heads, gat.heads):
        np.testing.assert_array_equal(a.W, b.W)
        np.testing.assert_array_equal(a.a, b.a)


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    uploads, targets, gat = _random_instance(seed)
    assert fd_check(gat, build_node_features(uploads), uploads, targets) < 1e-5


def test_hand_expanded_two_client_example():
    """N=2, d'=1, one head, linear client losses L_i = c_i . theta_i'."""
    H = np.array([[1.0, 0.0], [0.0, 1.0]])
    uploads = [np.array([0.5, -1.0]), np.array([2.0, 1.0])]
    c = [np.array([1.0, 0.0]), np.array([-1.0, 2.0])]
    w, a1, a2, slope = np.array([1.0, 0.0]), 1.0, -1.0, 0.2
    gat = GatParams([GatHead(w[None, :].copy(), np.array([a1, a2]))], slope)
    _, tape = allocation_matrix(H, gat)
    g = backward(tape, uploads, c)[0]

    z = [float(w @ H[0]), float(w @ H[1])]
    raw = [[a1 * z[i] + a2 * z[j] for j in range(2)] for i in range(2)]
    e = [[r if r >= 0 else slope * r for r in row] for row in raw]
    alpha = [[np.exp(e[i][j]) / (np.exp(e[i][0]) + np.exp(e[i][1])) for j in range(2)] for i in range(2)]
    dW, da1, da2 = np.zeros(2), 0.0, 0.0
    for i in range(2):
        dR = [float(c[i] @ uploads[j]) for j in range(2)]
        for j in range(2):
            d_e = alpha[i][j] * (dR[j] - sum(alpha[i][k] * dR[k] for k in range(2)))
            d_raw = d_e * (1.0 if raw[i][j] >= 0 else slope)
            da1 += d_raw * z[i]
            da2 += d_raw * z[j]
            dW += d_raw * (a1 * H[i] + a2 * H[j])
    np.testing.assert_allclose(g.dW[0], dW, atol=1e-14)
    np.testing.assert_allclose(g.da, [da1, da2], atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_backward_is_linear_in_feedback(seed, alpha, beta):
    uploads, _, gat = _random_instance(seed, n=4, d=8)
    rng = np.random.default_rng(seed + 1)
    g1, g2 = rng.standard_normal((4, 8)), rng.standard_normal((4, 8))
    _, tape = allocation_matrix(build_node_features(uploads), gat)
    a = backward(tape, uploads, list(alpha * g1 + beta * g2))
    b1, b2 = backward(tape, uploads, list(g1)), backward(tape, uploads, list(g2))
    for x, y1, y2 in zip(a, b1, b2):
        np.testing.assert_allclose(x.dW, alpha * y1.dW + beta * y2.dW, atol=1e-10)
        np.testing.assert_allclose(x.da, alpha * y1.da + beta * y2.da, atol=1e-10)


def test_backward_rejects_bad_feedback():
    uploads, _, gat = _random_instance(0)
    _, tape = allocation_matrix(build_node_features(uploads), gat)
    with pytest.raises(ValueError, match="client 1"):
        backward(tape, uploads, [np.zeros(6), np.full(6, np.nan), np.zeros(6)])
    with pytest.raises(ValueError):
        backward(tape, uploads, [np.zeros(5)] * 3)
    with pytest.raises(ValueError):
        backward(tape, uploads[:2], [np.zeros(6)] * 2)


def test_apply_update_arithmetic():
    gat = GatParams([GatHead(np.ones((2, 3)), np.ones(4))], 0.2)
    dW = np.zeros((2, 3))
    dW[1, 2] = 1.0
    grads = [HeadGrad(dW, np.zeros(4))]
    new = apply_update(gat, grads, 0.01)
    assert new.heads[0].W[1, 2] == 1.0 - 0.01
    assert np.count_nonzero(new.heads[0].W != 1.0) == 1
    same = apply_update(gat, [HeadGrad(np.ones((2, 3)), np.ones(4))], 0.0)
    np.testing.assert_array_equal(same.heads[0].W, gat.heads[0].W)
    np.testing.assert_array_equal(gat.heads[0].W, 1.0)


def test_clip_limits_step():
    gat = GatParams([GatHead(np.zeros((1, 2)), np.zeros(2))], 0.2)
    new = apply_update(gat, [HeadGrad(np.array([[30.0, 40.0]]), np.zeros(2))], 1.0, max_norm=5.0)
    np.testing.assert_allclose(new.heads[0].W, [[-3.0, -4.0]])


def test_descent_on_frozen_round():
    wins = 0
    for seed in range(20):
        uploads, targets, gat = _random_instance(seed, n=4, d=8, spread=1.0)
        H = build_node_features(uploads)
        start, _, _ = _surrogate(gat, H, uploads, targets)
        for _ in range(50):
            _, tape, fb = _surrogate(gat, H, uploads, targets)
            gat = apply_update(gat, backward(tape, uploads, fb), 0.01)
        wins += _surrogate(gat, H, uploads, targets)[0] < start
    assert wins >= 19
