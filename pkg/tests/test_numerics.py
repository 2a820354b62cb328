import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from action_codec import numerics as nx


def conv_oracle(x, k, b, stride, pad):
    """Triple loop over output step, output channel, tap."""
    T, C = x.shape
    c_out, c_in, w = k.shape
    xp = np.zeros((T + 2 * pad, C))
    xp[pad : pad + T] = x
    n_out = (T + 2 * pad - w) // stride + 1
    out = np.zeros((n_out, c_out))
    for t in range(n_out):
        for o in range(c_out):
            acc = b[o]
            for j in range(w):
                acc += xp[t * stride + j] @ k[o, :, j]
            out[t, o] = acc
    return out


@settings(max_examples=40, deadline=None)
@given(
    T=st.integers(3, 12),
    c_in=st.integers(1, 4),
    c_out=st.integers(1, 4),
    w=st.integers(1, 3),
    stride=st.integers(1, 3),
    pad=st.integers(0, 2),
    seed=st.integers(0, 2**16),
)
def test_conv_matches_loop_oracle(T, c_in, c_out, w, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(T, c_in))
    k = rng.normal(size=(c_out, c_in, w))
    b = rng.normal(size=c_out)
    got = nx.temporal_conv_forward(x, k, b, stride, pad)
    np.testing.assert_allclose(got, conv_oracle(x, k, b, stride, pad), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    T=st.integers(3, 12),
    c_in=st.integers(1, 4),
    c_out=st.integers(1, 4),
    w=st.integers(1, 3),
    stride=st.integers(1, 3),
    pad=st.integers(0, 1),
    seed=st.integers(0, 2**16),
)
def test_transposed_conv_is_adjoint(T, c_in, c_out, w, stride, pad, seed):
    # <conv(x), y> == <x, conv^T(y)> with no bias
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(T, c_in))
    k = rng.normal(size=(c_out, c_in, w))
    y_len = (T + 2 * pad - w) // stride + 1
    y = rng.normal(size=(y_len, c_out))
    cx = nx.conv1d(nx.Var(x), nx.Var(k), None, stride, pad).value
    op = T - ((y_len - 1) * stride + w - 2 * pad)
    cty = nx.conv_transpose1d(nx.Var(y), nx.Var(k), None, stride, pad, op).value
    assert cty.shape == x.shape
    assert abs(np.sum(cx * y) - np.sum(x * cty)) < 1e-10


def test_batched_conv_equals_per_sample():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 6, 3))
    k = rng.normal(size=(5, 3, 3))
    b = rng.normal(size=5)
    batched = nx.conv1d(nx.Var(x), nx.Var(k), nx.Var(b), 2, 1).value
    for i in range(4):
        np.testing.assert_allclose(batched[i], nx.temporal_conv_forward(x[i], k, b, 2, 1), atol=1e-13)


def test_deconv_wrapper_output_length():
    x = np.ones((3, 2))
    k = np.ones((2, 1, 3))
    assert nx.temporal_deconv_forward(x, k, None, 2, 1).shape == (5, 1)


def test_conv_rejects_bad_shapes():
    with pytest.raises(ValueError):
        nx.temporal_conv_forward(np.ones((4, 2)), np.ones((3, 5, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        nx.temporal_conv_forward(np.ones((1, 2)), np.ones((3, 2, 3)), np.zeros(3))


def test_gelu_values_match_normal_cdf():
    x = np.linspace(-6, 6, 101)
    np.testing.assert_allclose(nx.activation(x), x * norm.cdf(x), atol=1e-14)


def test_gelu_gradient_matches_finite_difference():
    x = np.linspace(-4, 4, 33)
    v = nx.Var(x.copy(), requires_grad=True)
    with nx.Tape() as tape:
        y = nx.sum_all(nx.gelu(v))
    g = tape.backward(y)[id(v)]
    h = 1e-6
    fd = (nx.activation(x + h) - nx.activation(x - h)) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-7, atol=1e-9)


def test_log_softmax_rows_normalize():
    rng = np.random.default_rng(0)
    y = nx.log_softmax(nx.Var(rng.normal(size=(5, 256)) * 30)).value
    np.testing.assert_allclose(np.exp(y).sum(axis=1), 1.0, atol=1e-12)


def _tiny_mlp(seed=0):
    rng = np.random.default_rng(seed)
    p = nx.ParamStore()
    p.add("w1", rng.normal(size=(6, 4)))
    p.add("b1", rng.normal(size=6))
    p.add("w2", rng.normal(size=(3, 6)))
    x = rng.normal(size=(5, 4))
    target = rng.integers(0, 3, size=5)

    def forward():
        h = nx.tanh(nx.linear(nx.Var(x), p["w1"], p["b1"]))
        h = nx.gelu(h)
        logp = nx.log_softmax(nx.linear(h, p["w2"]))
        return nx.mul(nx.mean_all(nx.pick(logp, target)), -1.0)

    return p, forward


def test_fd_check_passes_on_mlp():
    p, forward = _tiny_mlp()
    rep = nx.finite_difference_check(forward, p, tolerance=1e-6)
    assert rep.passed, rep.max_rel_error


def test_corrupted_backward_is_caught():
    p, forward = _tiny_mlp()

    def broken():
        loss = forward()
        # same value, but the recorded gradient is scaled by 1.5
        return nx._record(nx.Var(loss.value.copy()), (loss,), lambda g: (1.5 * g,))

    rep = nx.finite_difference_check(broken, p)
    assert not rep.passed
    assert rep.worst()[1] > 0.3


def test_take_rows_accumulates_duplicates():
    table = nx.Var(np.zeros((4, 2)), requires_grad=True)
    with nx.Tape() as tape:
        y = nx.sum_all(nx.take_rows(table, np.array([1, 1, 3])))
    g = tape.backward(y)[id(table)]
    np.testing.assert_array_equal(g[:, 0], [0, 2, 0, 1])


def test_straight_through_routes_gradient_to_input():
    x = nx.Var(np.array([1.0, 2.0]), requires_grad=True)
    q = nx.Var(np.array([5.0, -1.0]), requires_grad=True)
    with nx.Tape() as tape:
        y = nx.straight_through(x, q)
        loss = nx.sum_all(nx.mul(y, np.array([3.0, 4.0])))
    grads = tape.backward(loss)
    np.testing.assert_array_equal(y.value, q.value)
    np.testing.assert_array_equal(grads[id(x)], [3.0, 4.0])
    assert id(q) not in grads


def test_stop_gradient_blocks():
    x = nx.Var(np.array([2.0]), requires_grad=True)
    with nx.Tape() as tape:
        loss = nx.sum_all(nx.add(nx.square(x), nx.stop_gradient(nx.square(x))))
    assert tape.backward(loss)[id(x)][0] == pytest.approx(4.0)


def test_empty_tape_and_nonscalar_loss():
    with nx.Tape() as tape:
        pass
    with pytest.raises(RuntimeError):
        tape.backward(nx.Var(1.0))
    x = nx.Var(np.ones(3), requires_grad=True)
    with nx.Tape() as tape:
        y = nx.square(x)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_nonfinite_forward_raises():
    with pytest.raises(nx.NonFiniteError):
        nx.activation(np.array([np.nan]))


def test_adam_first_steps_closed_form():
    # with constant gradient g the bias-corrected update is lr*g/(|g|+eps) every step
    p = nx.ParamStore()
    p.add("w", np.array([1.0, -2.0, 0.5]))
    g = np.array([0.3, -4.0, 1e-3])
    expected = p.params["w"].copy()
    for _ in range(3):
        p.grads["w"][...] = g
        nx.adam_step(p, lr=0.01)
        expected -= 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.params["w"], expected, rtol=1e-12)
    assert p.step == 3
    assert not p.grads["w"].any()


def test_adam_rejects_nan_gradient():
    p = nx.ParamStore()
    p.add("w", np.zeros(2))
    p.grads["w"][0] = np.nan
    with pytest.raises(nx.NonFiniteError):
        nx.adam_step(p)
    assert p.step == 0


def test_identity_kernel_and_zero_input():
    x = np.random.default_rng(0).normal(size=(6, 3))
    eye = np.eye(3)[:, :, None]
    np.testing.assert_array_equal(nx.temporal_conv_forward(x, eye, np.zeros(3)), x)
    np.testing.assert_array_equal(nx.temporal_deconv_forward(x, eye, np.zeros(3)), x)
    b = np.array([0.5, -2.0])
    k = np.ones((2, 3, 3))
    np.testing.assert_array_equal(nx.temporal_conv_forward(np.zeros((6, 3)), k, b), np.tile(b, (4, 1)))
    np.testing.assert_array_equal(nx.temporal_deconv_forward(np.zeros((4, 2)), k, np.ones(3)), np.ones((6, 3)))


def test_random_six_by_three_conv_case():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(6, 3))
    k = rng.normal(size=(2, 3, 3))
    b = rng.normal(size=2)
    out = nx.temporal_conv_forward(x, k, b)
    assert out.shape == (4, 2)
    np.testing.assert_allclose(out, conv_oracle(x, k, b, 1, 0), atol=1e-12)


def test_linear_forward_cases():
    rng = np.random.default_rng(12)
    x = rng.normal(size=4)
    np.testing.assert_array_equal(nx.linear_forward(x, np.eye(4), np.zeros(4)), x)
    b = rng.normal(size=3)
    w = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(nx.linear_forward(np.zeros(4), w, b), b)
    oracle = [b[i] + sum(w[i, j] * x[j] for j in range(4)) for i in range(3)]
    np.testing.assert_allclose(nx.linear_forward(x, w, b), oracle, atol=1e-12)


def test_activation_limits():
    assert nx.activation(np.array([0.0]))[0] == 0.0
    assert nx.activation(np.array([40.0]))[0] == pytest.approx(40.0)
    assert abs(nx.activation(np.array([-40.0]))[0]) < 1e-300


def test_trivial_gradients():
    p = nx.ParamStore()
    p.add("a", np.arange(5.0))
    p.add("b", np.ones(2))
    with nx.Tape() as tape:
        loss = nx.sum_all(p["a"])
    tape.backward(loss, p)
    np.testing.assert_array_equal(p.grads["a"], np.ones(5))
    np.testing.assert_array_equal(p.grads["b"], np.zeros(2))


def test_linear_model_fd_is_exact():
    rng = np.random.default_rng(13)
    p = nx.ParamStore()
    p.add("w", rng.normal(size=(3, 4)))
    p.add("b", rng.normal(size=3))
    x = rng.normal(size=(5, 4))
    c = rng.normal(size=(5, 3))
    # central differences have no truncation error on a linear map; a wider
    # step only shrinks the rounding term eps*|loss|/h
    rep = nx.finite_difference_check(lambda: nx.sum_all(nx.mul(nx.linear(nx.Var(x), p["w"], p["b"]), c)), p, h=1e-3)
    assert max(rep.max_rel_error.values()) < 1e-9


def test_adam_zero_gradient_and_descent_direction():
    p = nx.ParamStore()
    p.add("w", np.array([1.0, 2.0]))
    nx.adam_step(p, lr=0.1)
    np.testing.assert_array_equal(p.params["w"], [1.0, 2.0])
    for _ in range(50):
        p.grads["w"][...] = [2.0, -0.5]
        nx.adam_step(p, lr=0.01)
    assert p.params["w"][0] < 1.0 and p.params["w"][1] > 2.0


def test_adam_single_scalar_step():
    p = nx.ParamStore()
    p.add("w", np.array([0.7]))
    p.grads["w"][0] = 0.25
    nx.adam_step(p, lr=1e-3, beta1=0.8, beta2=0.99, eps=1e-6)
    m = (1 - 0.8) * 0.25 / (1 - 0.8)
    v = (1 - 0.99) * 0.0625 / (1 - 0.99)
    assert abs(p.params["w"][0] - (0.7 - 1e-3 * m / (np.sqrt(v) + 1e-6))) < 1e-12


def test_forward_backward_bitwise_deterministic():
    outs = []
    for _ in range(2):
        p, forward = _tiny_mlp(5)
        with nx.Tape() as tape:
            loss = forward()
        tape.backward(loss, p)
        outs.append((loss.value.copy(), {k: v.copy() for k, v in p.grads.items()}))
    assert outs[0][0] == outs[1][0]
    for k in outs[0][1]:
        np.testing.assert_array_equal(outs[0][1][k], outs[1][1][k])
