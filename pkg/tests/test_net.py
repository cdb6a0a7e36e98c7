import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from alloflow.flow import NonFiniteError
from alloflow.net import (
    AdamState,
    CheckpointError,
    GradBuffer,
    NetConfig,
    VelocityNet,
    adam_step,
    load,
    save,
    time_features,
)


def small_net(seed=0, activation="silu", hidden=(32, 32)):
    net = VelocityNet(NetConfig(2, list(hidden), 16, activation, seed))
    rng = np.random.default_rng(seed + 100)
    net.params += 0.1 * rng.standard_normal(net.param_count)
    return net


def test_config_validation():
    with pytest.raises(ValueError):
        NetConfig(2, [0])
    with pytest.raises(ValueError):
        NetConfig(2, [8], time_embed_dim=3)
    with pytest.raises(ValueError):
        NetConfig(2, [8], activation="relu")
    assert NetConfig(2, [8, 4], 6).layer_dims == [(8, 8), (8, 4), (4, 2)]


def test_param_count_and_layout():
    net = VelocityNet(NetConfig(2, [3], 2, "tanh", 0))
    # (4 -> 3) + (3 -> 2), weights row-major then bias per layer
    assert net.param_count == 3 * 4 + 3 + 2 * 3 + 2
    W1, b1 = net.layers()[0]
    assert W1.shape == (3, 4) and np.shares_memory(W1, net.params)
    np.testing.assert_array_equal(W1.ravel(), net.params[:12])
    np.testing.assert_array_equal(b1, net.params[12:15])


def test_layout_by_hand():
    # One hidden unit, tanh; forward traced against the documented layout.
    net = VelocityNet(NetConfig(1, [1], 2, "tanh", 0), np.zeros(3 + 1 + 1 + 1))
    net.params[:] = [0.5, 0.2, -0.3, 0.1, 2.0, -1.0]  # W1 (1x3), b1, W2 (1x1), b2
    z, t = 0.4, 0.25
    feats = [np.sin(np.pi * t), np.cos(np.pi * t)]
    h = np.tanh(0.5 * z + 0.2 * feats[0] - 0.3 * feats[1] + 0.1)
    assert net.forward(np.array([z]), t)[0] == pytest.approx(2.0 * h - 1.0, abs=1e-15)


def test_time_features():
    f = time_features([0.0, 0.5], 4)
    np.testing.assert_allclose(f[0], [0, 1, 0, 1], atol=1e-15)
    np.testing.assert_allclose(f[1], [1, 0, 0, -1], atol=1e-15)


def test_forward_contracts():
    net = VelocityNet(NetConfig(3, [16, 16], 8, "silu", 4))
    z = np.array([0.1, -2.0, 3.0])
    out = net.forward(z, 0.3)
    assert out.shape == (3,) and np.all(np.isfinite(out))
    assert np.array_equal(out, net.forward(z, 0.3))
    batch = net.forward(np.stack([z, z]), np.array([0.3, 0.3]))
    np.testing.assert_allclose(batch[0], out, rtol=1e-13, atol=1e-15)
    with pytest.raises(ValueError):
        net.forward(np.ones(2), 0.3)


@pytest.mark.parametrize("activation", ["silu", "tanh"])
def test_zero_params_give_zero_output(activation):
    net = VelocityNet(NetConfig(2, [8, 8], 4, activation, 0))
    net.params[:] = 0.0
    assert np.array_equal(net.forward(np.array([1.5, -2.0]), 0.7), np.zeros(2))


def test_init_determinism():
    a = VelocityNet(NetConfig(2, [8], 4, "silu", 11))
    b = VelocityNet(NetConfig(2, [8], 4, "silu", 11))
    c = VelocityNet(NetConfig(2, [8], 4, "silu", 12))
    assert np.array_equal(a.params, b.params)
    assert not np.array_equal(a.params, c.params)
    # zero biases
    assert np.all(a.layers()[0][1] == 0)


def test_backward_zero_upstream():
    net = small_net()
    buf = net.new_grad_buffer()
    gz = net.backward(np.array([0.2, 0.1]), 0.4, np.zeros(2), buf)
    assert np.array_equal(buf.grads, np.zeros(net.param_count))
    assert np.array_equal(gz, np.zeros(2))


def _fd(f, x, h=1e-5):
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _rel(a, n, floor=1e-5):
    return np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor))


@pytest.mark.parametrize("activation", ["silu", "tanh"])
def test_backward_matches_finite_differences(activation):
    """100 random draws on a 2->32->32->2 net, params and inputs."""
    rng = np.random.default_rng(1)
    worst_p = worst_z = 0.0
    for trial in range(100):
        net = small_net(trial, activation)
        z, t, u = rng.standard_normal(2), float(rng.uniform()), rng.standard_normal(2)
        buf = net.new_grad_buffer()
        gz = net.backward(z, t, u, buf)
        E = np.eye(net.param_count) * 1e-5
        plus = net.forward_params(net.params + E, z[None], t)[:, 0, :] @ u
        minus = net.forward_params(net.params - E, z[None], t)[:, 0, :] @ u
        worst_p = max(worst_p, _rel(buf.grads, (plus - minus) / 2e-5))
        worst_z = max(worst_z, _rel(gz, _fd(lambda v: float(net.forward(v, t) @ u), z)))
    assert worst_p < 1e-4
    assert worst_z < 1e-4


def test_backward_sums_over_batch():
    net = small_net(3)
    rng = np.random.default_rng(0)
    Z, T, U = rng.standard_normal((4, 2)), rng.uniform(size=4), rng.standard_normal((4, 2))
    buf = net.new_grad_buffer()
    net.backward(Z, T, U, buf)
    ref = net.new_grad_buffer()
    for i in range(4):
        net.backward(Z[i], T[i], U[i], ref)
    np.testing.assert_allclose(buf.grads, ref.grads, rtol=1e-12, atol=1e-14)
    assert buf.accumulation_count == ref.accumulation_count == 4


def test_grad_buffer():
    buf = GradBuffer(3)
    buf.add(np.array([1.0, 2.0, 3.0]))
    buf.add(np.array([0.5, 0.5, 0.5]))
    np.testing.assert_array_equal(buf.grads, [1.5, 2.5, 3.5])
    assert buf.accumulation_count == 2 and len(buf) == 3
    buf.zero()
    assert not buf.grads.any() and buf.accumulation_count == 0


class _Scalar:
    """Minimal stand-in exposing ``params`` and ``param_count``."""

    def __init__(self, p):
        self.params = np.array(p, dtype=np.float64)
        self.param_count = len(self.params)


def test_adam_first_step_is_lr_times_sign():
    net = _Scalar([0.0])
    buf = GradBuffer(1)
    buf.add(np.array([1.0]))
    state = AdamState(lr=0.1)
    delta = adam_step(net, buf, state)
    # m_hat = g, v_hat = g^2  ->  step = lr * g / (|g| + eps)
    assert net.params[0] == pytest.approx(-0.1, abs=1e-8)
    assert delta[0] == net.params[0]
    assert not buf.grads.any() and state.step_count == 1


@given(st.floats(-100, 100).filter(lambda g: abs(g) > 1e-3), st.floats(1e-4, 1.0))
def test_adam_first_step_property(g, lr):
    net = _Scalar([0.0])
    buf = GradBuffer(1)
    buf.add(np.array([g]))
    adam_step(net, buf, AdamState(lr=lr))
    assert net.params[0] == pytest.approx(-lr * np.sign(g), rel=1e-6)


def test_adam_zero_grad_and_monotone():
    net = _Scalar([1.0, -2.0])
    buf = GradBuffer(2)
    state = AdamState(lr=0.01)
    adam_step(net, buf, state)
    np.testing.assert_array_equal(net.params, [1.0, -2.0])
    prev = net.params.copy()
    for _ in range(3):
        buf.add(np.array([1.0, -1.0]))
        adam_step(net, buf, state)
        assert net.params[0] < prev[0] and net.params[1] > prev[1]
        prev = net.params.copy()
    assert state.step_count == 4


def test_adam_weight_decay_and_errors():
    net = _Scalar([2.0])
    adam_step(net, GradBuffer(1), AdamState(lr=0.1, weight_decay=0.5))
    assert net.params[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)
    bad = GradBuffer(1)
    bad.add(np.array([np.nan]))
    with pytest.raises(NonFiniteError, match="index 0"):
        adam_step(net, bad, AdamState())
    with pytest.raises(ValueError):
        adam_step(net, GradBuffer(2), AdamState())


def test_adam_fits_single_target():
    net = VelocityNet(NetConfig(2, [16, 16], 8, "silu", 0))
    z0, t0, y0 = np.array([0.3, -0.7]), 0.4, np.array([1.0, 2.0])
    state, buf = AdamState(lr=1e-2), net.new_grad_buffer()
    for _ in range(500):
        r = net.forward(z0, t0) - y0
        net.backward(z0, t0, 2 * r, buf)
        adam_step(net, buf, state)
    assert np.sum((net.forward(z0, t0) - y0) ** 2) < 1e-6


def test_checkpoint_round_trip():
    net = small_net(5, "tanh", (8, 6))
    net.meta = {"t_star": 0.26}
    blob = save(net)
    back = load(blob)
    assert np.array_equal(back.params, net.params)
    assert back.config == net.config
    assert back.meta == {"t_star": 0.26}
    assert save(back) == blob


def test_checkpoint_header_layout():
    net = VelocityNet(NetConfig(2, [5], 4, "silu", 0))
    blob = save(net)
    assert blob[:4] == b"AFLW"
    assert struct.unpack_from("<III", blob, 4) == (1, 2, 2)
    assert struct.unpack_from("<IIII", blob, 16) == (6, 5, 5, 2)
    params = np.frombuffer(blob, dtype="<f8", count=net.param_count, offset=32)
    assert np.array_equal(params, net.params)


def test_checkpoint_errors():
    blob = save(small_net(0, hidden=(4,)))
    with pytest.raises(CheckpointError, match="magic"):
        load(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="version"):
        load(blob[:4] + struct.pack("<I", 9) + blob[8:])
    for cut in (3, 20, 40, len(blob) - 3):
        with pytest.raises(CheckpointError):
            load(blob[:cut])
    with pytest.raises(CheckpointError, match="in_dim"):
        load(blob, expect_in_dim=3)
