import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import naive_matmul
from pulseform import tensorgrad as tg
from pulseform.errors import GraphCycle, IndivisibleLength, MissingGradient, NonFiniteDetected, ShapeMismatch
from pulseform.tensorgrad import AdamState, Tensor, adam_step, backward, parameter

RNG = np.random.default_rng(1234)


def fd_check(build, arrays, n_coords=20, h=1e-6, seed=0):
    """Compare analytic gradients of sum(w * build(*params)) with central differences."""
    rng = np.random.default_rng(seed)
    params = [parameter(a.copy()) for a in arrays]
    out = build(*params)
    w = rng.normal(size=out.shape)
    loss = tg.sum_all(tg.mul(out, Tensor(w)))
    backward(loss)
    for p in params:
        flat = p.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(n_coords, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(np.sum(w * build(*params).data))
            flat[i] = orig - h
            fm = float(np.sum(w * build(*params).data))
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            ana = p.grad.reshape(-1)[i]
            assert abs(ana - num) <= 1e-6 * max(1.0, abs(num)), (ana, num)


def r(*shape):
    return RNG.normal(size=shape)


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize(
    "name,build,arrays",
    [
        ("matmul", lambda a, b: tg.matmul(a, b), [r(3, 4), r(4, 2)]),
        ("matmul_batched", lambda a, b: tg.matmul(a, b), [r(2, 3, 4), r(2, 4, 5)]),
        ("matmul_flat", lambda a, b: tg.matmul(a, b), [r(2, 3, 4), r(4, 5)]),
        ("matmul_bcast", lambda a, b: tg.matmul(a, b), [r(3, 4), r(2, 4, 5)]),
        ("add_bcast", lambda a, b: tg.add(a, b), [r(2, 3, 4), r(4)]),
        ("mul", lambda a, b: tg.mul(a, b), [r(2, 3), r(1, 3)]),
        ("mul_scalar", lambda a: tg.mul_scalar(a, -2.5), [r(3, 3)]),
        ("conv1d_k1", lambda x, w, b: tg.conv1d_k1(x, w, b), [r(2, 3, 5), r(4, 3), r(4)]),
        ("relu", lambda a: tg.relu(a), [r(4, 5) + 0.05]),
        ("softmax", lambda a: tg.softmax_lastdim(a), [r(3, 6)]),
        ("layer_norm", lambda x, g, b: tg.layer_norm(x, g, b), [r(2, 3, 8), r(8), r(8)]),
        ("mean_pool", lambda a: tg.mean_pool_time(a, 3), [r(2, 6, 4)]),
        ("reshape", lambda a: tg.reshape(a, (6, 4)), [r(2, 3, 4)]),
        ("transpose", lambda a: tg.transpose(a, (1, 0, 2)), [r(2, 3, 4)]),
        ("concat", lambda a, b: tg.concat_lastdim([a, b]), [r(2, 3), r(2, 5)]),
        ("mse", lambda a: tg.mse_loss(a, np.ones((3, 2))), [r(3, 2)]),
    ],
)
def test_op_gradients_match_finite_differences(name, build, arrays):
    fd_check(build, arrays)


def test_dropout_gradient_uses_the_same_mask():
    x = parameter(r(5, 6))
    y = tg.dropout(x, 0.7, np.random.default_rng(0))
    backward(tg.sum_all(y))
    mask = y.data / x.data
    np.testing.assert_allclose(x.grad, mask)


# ---------------------------------------------------------------- forward examples


def test_conv1d_identity():
    x = r(2, 5, 7)
    out = tg.conv1d_k1(x, np.eye(5), np.zeros(5))
    np.testing.assert_array_equal(out.data, x)


def test_conv1d_matches_definition():
    x, w, b = r(2, 3, 4), r(5, 3, 1), r(5)
    out = tg.conv1d_k1(x, w, b).data
    for n in range(2):
        for o in range(5):
            for t in range(4):
                ref = b[o] + sum(w[o, k, 0] * x[n, k, t] for k in range(3))
                assert out[n, o, t] == pytest.approx(ref, abs=1e-12)


def test_softmax_equal_logits():
    np.testing.assert_allclose(tg.softmax_lastdim(np.ones((1, 4))).data, [[0.25] * 4], atol=1e-15)


def test_matmul_matches_naive_oracle():
    a, b = r(3, 4), r(4, 2)
    np.testing.assert_allclose(tg.matmul(a, b).data, naive_matmul(a, b), atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        tg.matmul(r(3, 4), r(3, 2))


def test_mean_pool_indivisible():
    with pytest.raises(IndivisibleLength):
        tg.mean_pool_time(r(1, 5, 2), 2)


@given(seed=st.integers(0, 2**31), shift=st.floats(-50, 50))
def test_softmax_rows_and_shift_invariance(seed, shift):
    x = np.random.default_rng(seed).normal(scale=5.0, size=(4, 7))
    y = tg.softmax_lastdim(x).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(tg.softmax_lastdim(x + shift).data, y, atol=1e-12)


@given(seed=st.integers(0, 2**31), scale=st.floats(1e-3, 1e3), shift=st.floats(-1e3, 1e3))
def test_layer_norm_statistics_and_shift(seed, scale, shift):
    x = np.random.default_rng(seed).normal(scale=scale, size=(6, 16))
    y = tg.layer_norm(x).data
    assert np.max(np.abs(y.mean(axis=-1))) < 1e-9
    assert np.max(np.abs(y.var(axis=-1) - 1.0)) < 1e-9
    np.testing.assert_allclose(tg.layer_norm(x + shift).data, y, atol=1e-6)


def test_dropout_identity_cases():
    x = Tensor(r(3, 3))
    assert tg.dropout(x, 1.0, np.random.default_rng(0)) is x
    assert tg.dropout(x, 0.5, np.random.default_rng(0), training=False) is x


def test_dropout_preserves_expectation():
    x = np.linspace(0.5, 2.0, 10)
    rng = np.random.default_rng(0)
    total = np.zeros_like(x)
    for _ in range(10_000):
        total += tg.dropout(Tensor(x), 0.85, rng).data
    np.testing.assert_allclose(total / 10_000, x, rtol=0.02)


def test_non_finite_forward_is_detected():
    with pytest.raises(NonFiniteDetected):
        tg.mul_scalar(Tensor([1.0, np.inf]), 2.0)


# ---------------------------------------------------------------- backward


def test_sum_gradient_is_ones():
    x = parameter(r(3, 4))
    backward(tg.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_relu_subgradient():
    x = parameter([-1.0, 2.0])
    backward(tg.sum_all(tg.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_gradients_accumulate():
    x = parameter(r(4))
    backward(tg.sum_all(tg.mul_scalar(x, 3.0)))
    backward(tg.sum_all(tg.mul_scalar(x, 3.0)))
    np.testing.assert_array_equal(x.grad, np.full(4, 6.0))
    x.zero_grad()
    assert x.grad is None


def test_shared_subexpression():
    # y = x * x through two paths of one node
    x = parameter([3.0])
    backward(tg.sum_all(tg.mul(x, x)))
    assert x.grad[0] == pytest.approx(6.0)


def test_graph_cycle_detected():
    a = parameter([1.0])
    b = tg.mul_scalar(a, 2.0)
    c = tg.mul_scalar(b, 2.0)
    b._parents = (c,)
    with pytest.raises(GraphCycle):
        backward(tg.sum_all(c))


def test_backward_needs_scalar():
    with pytest.raises(ShapeMismatch):
        backward(tg.mul_scalar(parameter(r(3)), 1.0))


def test_no_grad_builds_no_graph():
    x = parameter(r(3))
    with tg.no_grad():
        y = tg.mul_scalar(x, 2.0)
    assert not y.requires_grad and y._parents == ()


# ---------------------------------------------------------------- loss


def test_mse_examples():
    assert tg.mse_loss(Tensor([[1.0, 2.0]]), [[1.0, 2.0]]).data == 0.0
    assert tg.mse_loss(Tensor([[1.0, 2.0]]), [[3.0, 2.0]]).data == 2.0
    p, t = r(5, 2), r(5, 2)
    base = tg.mse_loss(Tensor(p), t).data
    assert tg.mse_loss(Tensor(t + 2 * (p - t)), t).data == pytest.approx(4 * base, rel=1e-12)
    with pytest.raises(ShapeMismatch):
        tg.mse_loss(Tensor(r(3, 2)), r(2, 2))


# ---------------------------------------------------------------- Adam


def test_adam_first_step():
    p = parameter([0.0])
    p.grad = np.array([1.0])
    adam_step(AdamState(lr=0.1), [p])
    assert p.data[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-12)
    assert abs(p.data[0] - (-0.0999999)) < 1e-6


def test_adam_zero_gradient_leaves_params():
    p = parameter(r(4))
    before = p.data.copy()
    for _ in range(5):
        p.grad = np.zeros(4)
        adam_step(AdamState(lr=0.1), [p])
    np.testing.assert_array_equal(p.data, before)


def test_adam_is_deterministic():
    rng = np.random.default_rng(0)
    a, b = parameter(r(3, 3)), None
    b = parameter(a.data.copy())
    sa, sb = AdamState(lr=1e-2, weight_decay=1e-3), AdamState(lr=1e-2, weight_decay=1e-3)
    for _ in range(100):
        g = rng.normal(size=(3, 3))
        a.grad, b.grad = g.copy(), g.copy()
        adam_step(sa, [a])
        adam_step(sb, [b])
    assert np.array_equal(a.data, b.data)
    assert sa.step == 100


def test_adam_leaves_gradients_and_needs_them():
    p = parameter(r(2))
    p.grad = np.ones(2)
    adam_step(AdamState(), [p])
    np.testing.assert_array_equal(p.grad, np.ones(2))
    q = parameter(r(2))
    with pytest.raises(MissingGradient):
        adam_step(AdamState(), [q])


def test_decoupled_weight_decay():
    p = parameter([2.0])
    p.grad = np.zeros(1)
    adam_step(AdamState(lr=0.1, weight_decay=0.5), [p])
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.05))


def test_cosine_decay_endpoints():
    assert tg.cosine_decay(1e-4, 0, 400) == pytest.approx(1e-4)
    assert tg.cosine_decay(1e-4, 399, 400) == pytest.approx(0.0, abs=1e-20)
    vals = [tg.cosine_decay(1.0, e, 50) for e in range(50)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
