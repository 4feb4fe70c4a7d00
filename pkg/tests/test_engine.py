import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echosynth.engine import (
    Adam, AdamState, Tape, Tensor, adam_step, conv3d, conv_transpose3d, instance_norm3d, kernels,
    ops, trilinear_upsample,
)
from echosynth.engine.ops import conv_output_extent, conv_transpose_output_extent

from gradcheck import check

SEEDS = range(10)


def _rand(rng, *shape):
    return rng.standard_normal(shape).astype(np.float32)


# ---------------------------------------------------------------------------
# conv3d
# ---------------------------------------------------------------------------


def test_conv3d_one_by_one_kernel_scales():
    x = Tensor(np.ones((1, 1, 3, 3, 3)))
    w = Tensor(np.full((1, 1, 1, 1, 1), 2.0))
    np.testing.assert_array_equal(conv3d(x, w).data, np.full((1, 1, 3, 3, 3), 2.0))


def test_conv3d_sum_of_cube():
    x = Tensor(np.arange(1, 9, dtype=np.float32).reshape(1, 1, 2, 2, 2))
    w = Tensor(np.ones((1, 1, 2, 2, 2)))
    out = conv3d(x, w)
    assert out.shape == (1, 1, 1, 1, 1)
    assert out.data.item() == 36.0


def test_conv3d_rejects_channel_mismatch():
    with pytest.raises(ValueError, match="channel"):
        conv3d(Tensor(np.zeros((1, 2, 4, 4, 4))), Tensor(np.zeros((1, 3, 3, 3, 3))))


@pytest.mark.parametrize("seed", SEEDS)
def test_conv3d_gradient(seed, kernel_backend):
    rng = np.random.default_rng(seed)
    x, w, b = _rand(rng, 1, 2, 4, 4, 4), _rand(rng, 3, 2, 3, 3, 3), _rand(rng, 3)
    err = check(lambda x, w, b: conv3d(x, w, b, stride=1, padding=1), [x, w, b], seed=seed)
    assert err < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
def test_conv3d_strided_gradient(seed):
    rng = np.random.default_rng(seed)
    x, w = _rand(rng, 1, 2, 5, 4, 6), _rand(rng, 2, 2, 4, 4, 4)
    err = check(lambda x, w: conv3d(x, w, stride=2, padding=1), [x, w], seed=seed)
    assert err < 1e-3


# ---------------------------------------------------------------------------
# conv_transpose3d
# ---------------------------------------------------------------------------


def test_conv_transpose_single_voxel_stamp():
    x = Tensor(np.full((1, 1, 1, 1, 1), 1.75))
    w = Tensor(np.ones((1, 1, 2, 2, 2)))
    np.testing.assert_array_equal(conv_transpose3d(x, w, stride=2).data, np.full((1, 1, 2, 2, 2), 1.75))


def test_conv_transpose_overlap_bump():
    x = Tensor(np.ones((1, 1, 2, 1, 1)))
    w = Tensor(np.ones((1, 1, 3, 1, 1)))
    out = conv_transpose3d(x, w, stride=(2, 1, 1))
    np.testing.assert_array_equal(out.data.reshape(-1), [1, 1, 2, 1, 1])


def test_conv_transpose_rejects_nonpositive_extent():
    with pytest.raises(ValueError):
        conv_transpose3d(Tensor(np.ones((1, 1, 1, 1, 1))), Tensor(np.ones((1, 1, 1, 1, 1))), padding=1)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_transpose_adjoint(seed, kernel_backend):
    rng = np.random.default_rng(seed)
    s = int(rng.integers(1, 3))
    p = int(rng.integers(0, 2))
    k = int(rng.integers(max(2, 2 * p + 1), 5))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    # matching geometry: the strided windows tile the padded input exactly
    dims = tuple(k - 2 * p + s * int(m) for m in rng.integers(1, 4, size=3))
    x = Tensor(_rand(rng, 2, cin, *dims))
    w = Tensor(_rand(rng, cout, cin, k, k, k))
    y_shape = conv3d(x, w, stride=s, padding=p).shape
    y = Tensor(_rand(rng, *y_shape))
    lhs = float(np.sum(conv3d(x, w, stride=s, padding=p).data.astype(np.float64) * y.data))
    back = conv_transpose3d(y, w, stride=s, padding=p).data
    assert back.shape == x.shape
    rhs = float(np.sum(x.data.astype(np.float64) * back))
    assert abs(lhs - rhs) <= 1e-4 * max(abs(lhs), 1.0)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_transpose_gradient(seed):
    rng = np.random.default_rng(seed)
    x, w, b = _rand(rng, 1, 2, 3, 3, 2), _rand(rng, 2, 2, 4, 4, 4), _rand(rng, 2)
    err = check(lambda x, w, b: conv_transpose3d(x, w, b, stride=2, padding=1), [x, w, b], seed=seed)
    assert err < 1e-3


@settings(max_examples=60, deadline=None)
@given(n=st.integers(2, 9), k=st.integers(1, 4), s=st.integers(1, 3), p=st.integers(0, 2))
def test_conv_shape_formulas(n, k, s, p):
    if n + 2 * p < k:
        return
    x = Tensor(np.zeros((1, 1, n, n + 1, n), np.float32))
    out = conv3d(x, Tensor(np.zeros((2, 1, k, k, k))), stride=s, padding=p)
    assert out.shape[2:] == tuple(conv_output_extent(m, k, s, p) for m in x.shape[2:])
    t_ext = conv_transpose_output_extent(n, k, s, p)
    if t_ext > 0:
        up = conv_transpose3d(x, Tensor(np.zeros((1, 2, k, k, k))), stride=s, padding=p)
        assert up.shape[2:] == tuple(conv_transpose_output_extent(m, k, s, p) for m in x.shape[2:])


# ---------------------------------------------------------------------------
# upsampling
# ---------------------------------------------------------------------------


def test_upsample_constant():
    out = trilinear_upsample(Tensor(np.full((1, 2, 2, 3, 4), 0.3)), 2)
    assert out.shape == (1, 2, 4, 6, 8)
    np.testing.assert_allclose(out.data, 0.3, rtol=1e-6)


def test_upsample_ramp_align_corners():
    x = Tensor(np.array([0.0, 1.0], dtype=np.float32).reshape(1, 1, 2, 1, 1))
    out = trilinear_upsample(x, 2).data[0, 0, :, 0, 0]
    np.testing.assert_allclose(out, [0, 1 / 3, 2 / 3, 1], atol=1e-7)


def test_upsample_rejects_zero_factor():
    with pytest.raises(ValueError):
        trilinear_upsample(Tensor(np.zeros((1, 1, 2, 2, 2))), 0)


def test_upsample_conv_matches_transposed_shape():
    x = Tensor(np.zeros((1, 4, 4, 4, 2), np.float32))
    a = conv3d(trilinear_upsample(x, 2), Tensor(np.zeros((3, 4, 3, 3, 3))), padding=1)
    b = conv_transpose3d(x, Tensor(np.zeros((4, 3, 4, 4, 4))), stride=2, padding=1)
    assert a.shape == b.shape == (1, 3, 8, 8, 4)


@pytest.mark.parametrize("seed", SEEDS)
def test_upsample_gradient(seed):
    rng = np.random.default_rng(seed)
    err = check(lambda x: trilinear_upsample(x, 2), [_rand(rng, 1, 2, 3, 2, 2)], seed=seed)
    assert err < 1e-3


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def test_activation_values():
    x = Tensor(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(ops.relu(x).data, [0, 0, 2])
    assert ops.sigmoid(Tensor(np.zeros(1))).data[0] == 0.5
    assert ops.tanh(Tensor(np.zeros(1))).data[0] == 0.0
    np.testing.assert_allclose(ops.leaky_relu(x).data, [-0.2, 0, 2], rtol=1e-6)


def test_leaky_relu_slope_range():
    with pytest.raises(ValueError):
        ops.leaky_relu(Tensor(np.zeros(2)), 1.5)


@pytest.mark.parametrize("kind", ["relu", "leaky_relu", "tanh", "sigmoid"])
@pytest.mark.parametrize("seed", SEEDS)
def test_activation_gradient(kind, seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, 2, 3, 4)
    x = np.where(np.abs(x) < 0.05, 0.5, x).astype(np.float32)  # keep away from the kink
    assert check(lambda t: ops.activation(t, kind), [x], seed=seed) < 1e-3


# ---------------------------------------------------------------------------
# instance norm
# ---------------------------------------------------------------------------


def test_instance_norm_constant_channel():
    x = Tensor(np.full((1, 2, 3, 3, 2), 4.0))
    g, b = Tensor(np.ones(2)), Tensor(np.array([0.5, -1.0]))
    out = instance_norm3d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(out.data, 0.0)
    out = instance_norm3d(x, g, b)
    np.testing.assert_array_equal(out.data[0, 0], 0.5)
    np.testing.assert_array_equal(out.data[0, 1], -1.0)


def test_instance_norm_moments(rng):
    x = Tensor(rng.normal(3.0, 2.0, (2, 3, 6, 5, 4)))
    out = instance_norm3d(x, Tensor(np.ones(3)), Tensor(np.zeros(3))).data.astype(np.float64)
    assert np.abs(out.mean(axis=(2, 3, 4))).max() < 1e-5
    assert np.abs(out.var(axis=(2, 3, 4)) - 1).max() < 1e-3


def test_instance_norm_guards():
    with pytest.raises(ValueError):
        instance_norm3d(Tensor(np.ones((1, 1, 1, 1, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)), eps=0.0)
    with pytest.raises(ValueError):
        instance_norm3d(Tensor(np.ones((1, 1, 1, 1, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)))


@pytest.mark.parametrize("seed", SEEDS)
def test_instance_norm_gradient(seed):
    rng = np.random.default_rng(seed)
    x, g, b = _rand(rng, 2, 2, 3, 3, 2), _rand(rng, 2), _rand(rng, 2)
    assert check(lambda x, g, b: instance_norm3d(x, g, b), [x, g, b], seed=seed) < 1e-3


# ---------------------------------------------------------------------------
# tape semantics
# ---------------------------------------------------------------------------


def test_backward_sum_of_squares_exact(rng):
    x = Tensor(_rand(rng, 3, 4), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.square(x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * x.data)


@pytest.mark.parametrize("seed", SEEDS)
def test_backward_tanh_squared(seed):
    rng = np.random.default_rng(seed)
    fn = lambda x: ops.reshape(ops.sum(ops.square(ops.tanh(x))), (1,))  # noqa: E731
    assert check(fn, [_rand(rng, 4, 5)], seed=seed) < 1e-3


def test_fan_in_accumulates(rng):
    x = Tensor(_rand(rng, 5), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.add(ops.mul(x, 3.0), x))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 4.0)


def test_backward_twice_is_error(rng):
    x = Tensor(_rand(rng, 3), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(x)
    tape.backward(loss)
    with pytest.raises(RuntimeError):
        tape.backward(loss)


def test_backward_needs_scalar(rng):
    x = Tensor(_rand(rng, 3), requires_grad=True)
    with Tape() as tape:
        y = ops.mul(x, 2.0)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_tape_visits_in_topological_order(rng):
    x = Tensor(_rand(rng, 4), requires_grad=True)
    with Tape() as tape:
        a = ops.tanh(x)
        b = ops.mul(a, a)
        loss = ops.sum(b)
    ids = [n.output.node_id for n in tape.nodes]
    assert ids == sorted(ids)
    for node in tape.nodes:
        for p in node.parents:
            assert p.node_id is None or p.node_id < node.output.node_id
    tape.backward(loss)


def test_ops_are_deterministic(rng):
    x, w = _rand(rng, 2, 3, 6, 6, 4), _rand(rng, 4, 3, 3, 3, 3)
    a = conv3d(Tensor(x), Tensor(w), padding=1).data
    b = conv3d(Tensor(x), Tensor(w), padding=1).data
    assert a.tobytes() == b.tobytes()


@pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")
def test_backends_agree(rng):
    xp, w = _rand(rng, 2, 3, 7, 6, 5), _rand(rng, 4, 3, 3, 2, 3)
    res = {}
    for name in kernels.BACKENDS:
        prev = kernels.set_backend(name)
        try:
            y = kernels.conv3d_forward(xp, w, (2, 1, 2))
            res[name] = (y, kernels.conv3d_backward_input(y, w, (2, 1, 2), xp.shape),
                         kernels.conv3d_backward_weight(xp, y, (2, 1, 2), w.shape))
        finally:
            kernels.set_backend(prev)
    for a, b in zip(res["numpy"], res["numba"]):
        np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-4)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_first_step_is_sign(rng):
    p = _rand(rng, 20)
    g = _rand(rng, 20)
    before = p.copy()
    adam_step({"p": p}, {"p": g}, AdamState(), lr=1e-3)
    np.testing.assert_allclose(p - before, -1e-3 * np.sign(g), rtol=1e-3, atol=1e-7)


def test_adam_zero_gradient_is_noop(rng):
    p = _rand(rng, 5)
    before = p.copy()
    state = AdamState()
    for _ in range(50):
        adam_step({"p": p}, {"p": np.zeros(5, np.float32)}, state, lr=0.1)
    np.testing.assert_array_equal(p, before)
    assert state.step == 50


def test_adam_quadratic():
    # scalar reference recurrence, float64
    ref, m, v = 0.0, 0.0, 0.0
    for t in range(1, 201):
        g = 2 * (ref - 3)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)

    x = Tensor(np.zeros(1), requires_grad=True)
    opt = Adam([("x", x)], lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        with Tape() as tape:
            loss = ops.sum(ops.square(ops.sub(x, 3.0)))
        tape.backward(loss)
        opt.step()
    assert abs(x.data[0] - 3) < 1e-2
    assert abs(x.data[0] - ref) < 1e-3


def test_adam_rejects_nonfinite_and_names_param():
    p = np.zeros(3, np.float32)
    with pytest.raises(FloatingPointError, match="enc1.weight"):
        adam_step({"enc1.weight": p}, {"enc1.weight": np.array([0, np.nan, 1], np.float32)}, AdamState(), 0.1)


def test_adam_state_invariants():
    with pytest.raises(ValueError):
        AdamState(beta1=1.0)
    with pytest.raises(ValueError):
        AdamState(epsilon=0.0)
