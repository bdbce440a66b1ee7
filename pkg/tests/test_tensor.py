import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bgadapt import tensor as T
from bgadapt.gradcheck import Case, analytic_grads, numeric_grad, scaled_error

finite = st.floats(-50, 50, allow_nan=False, width=32)


def vec(n_min=1, n_max=12):
    return arrays(np.float32, st.integers(n_min, n_max), elements=finite)


def grad_of(fn, *values, dtype=np.float64):
    ts = [T.tensor(v, requires_grad=True, dtype=dtype) for v in values]
    T.backward(fn(*ts))
    return [t.grad for t in ts]


def naive_conv(x, w, b, stride=1):
    """Direct loop convolution with zero 'same' padding, used as an oracle."""
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    xp = np.zeros((c, h + 2 * p, wd + 2 * p))
    xp[:, p : p + h, p : p + wd] = x
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride : i * stride + k, j * stride : j * stride + k]
                out[oc, i, j] = (patch * w[oc]).sum() + b[oc]
    return out


# -- elementwise ---------------------------------------------------------------

def test_add_mul_square_values():
    assert np.array_equal(T.add(T.tensor([1.0, 2.0]), T.tensor([3.0, 4.0])).data, [4, 6])
    x = T.tensor([1.5, -2.0, 7.0])
    assert np.array_equal(T.mul(x, 1).data, x.data)
    assert np.array_equal(T.square(T.tensor([-2.0, 3.0])).data, [4, 9])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2,\).*\(3,\)"):
        T.add(T.tensor([1.0, 2.0]), T.tensor([1.0, 2.0, 3.0]))


def test_no_general_broadcasting():
    with pytest.raises(T.ShapeError):
        T.mul(T.tensor(np.ones((2, 3))), T.tensor(np.ones((1, 3))))


def test_scalar_broadcast_gradient_sums():
    s = T.tensor(2.0, requires_grad=True, dtype=np.float64)
    x = T.tensor([1.0, 2.0, 3.0], requires_grad=True, dtype=np.float64)
    T.backward(T.sum(s * x))
    assert s.grad == pytest.approx(6.0)
    assert np.allclose(x.grad, 2.0)


@given(vec(), vec())
def test_add_commutes(a, b):
    n = min(len(a), len(b))
    a, b = T.tensor(a[:n]), T.tensor(b[:n])
    assert np.array_equal(T.add(a, b).data, T.add(b, a).data)


# -- sigmoid -----------------------------------------------------------------

def test_sigmoid_values_and_slope():
    assert T.sigmoid(T.tensor(0.0)).item() == 0.5
    (g,) = grad_of(lambda x: T.sum(T.sigmoid(x)), [0.0])
    assert g[0] == pytest.approx(0.25)
    exact = 1 / (1 + math.exp(-20))
    assert abs(T.sigmoid(T.tensor(20.0)).item() - exact) < 1e-6
    assert abs(T.sigmoid(T.tensor(20.0)).item() - 1.0) < 1e-6


@given(arrays(np.float32, st.integers(1, 20), elements=st.floats(-1e4, 1e4, width=32)))
def test_sigmoid_stays_in_open_interval(x):
    y = T.sigmoid(T.tensor(x)).data
    assert np.all(y > 0) and np.all(y < 1)


# -- clamp / hinge -----------------------------------------------------------

def test_clamp_nonpositive():
    x = T.tensor([-2.0, 0.5, 0.0, 3.0])
    assert np.array_equal(T.clamp_nonpositive(x).data, [-2.0, 0.0, 0.0, 0.0])
    neg = T.tensor([-1.0, -0.25, -9.0])
    assert np.array_equal(T.clamp_nonpositive(neg).data, neg.data)


def test_clamp_gradient_matches_differences():
    case = Case({"x": np.array([-1.0, 2.0])}, lambda t: T.sum(T.clamp_nonpositive(t["x"])), ("x",))
    assert np.allclose(numeric_grad(case, "x"), [1, 0])
    assert np.array_equal(analytic_grads(case)["x"], [1, 0])


def test_kink_subgradient_is_zero():
    (g,) = grad_of(lambda x: T.sum(T.clamp_nonpositive(x)), [0.0])
    (h,) = grad_of(lambda x: T.sum(T.hinge(x)), [0.0])
    assert g[0] == 0 and h[0] == 0


def test_hinge():
    assert np.array_equal(T.hinge(T.tensor([-1.0, 2.0])).data, [0, 2])
    assert np.array_equal(T.hinge(T.tensor([-1.0, -3.0])).data, [0, 0])
    case = Case({"x": np.array([-1.0, 2.0])}, lambda t: T.sum(T.hinge(t["x"])), ("x",))
    assert np.allclose(numeric_grad(case, "x"), [0, 1])
    assert np.array_equal(analytic_grads(case)["x"], [0, 1])


@given(vec())
def test_clamp_idempotent(x):
    once = T.clamp_nonpositive(T.tensor(x))
    assert np.array_equal(T.clamp_nonpositive(once).data, once.data)
    assert np.all(once.data <= 0)


# -- log ---------------------------------------------------------------------

def test_log_values():
    assert T.log(T.tensor(1.0)).item() == 0
    assert abs(T.log(T.tensor(math.e, dtype=np.float64)).item() - 1) < 1e-6
    guarded = T.log(T.tensor(0.0, dtype=np.float64), guard=True).item()
    assert guarded == pytest.approx(math.log(1e-12))


def test_log_domain_error_names_index():
    with pytest.raises(T.DomainError, match=r"\(1, 0\)"):
        T.log(T.tensor([[1.0, 2.0], [0.0, 3.0]]))


def test_guarded_log_has_no_gradient_where_clamped():
    (g,) = grad_of(lambda x: T.sum(T.log(x, guard=True)), [0.0, 2.0])
    assert g[0] == 0 and g[1] == pytest.approx(0.5)


# -- conv2d ------------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(3, 5, 5)).astype(np.float32)
    w = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
    out = T.conv2d(T.tensor(x), T.tensor(w), T.tensor(np.zeros(3)))
    assert np.array_equal(out.data, x)


def test_conv_ones_kernel_footprint():
    for pos in [(0, 0), (1, 1), (2, 1)]:
        x = np.zeros((1, 3, 3))
        x[0][pos] = 1
        out = T.conv2d(T.tensor(x), T.tensor(np.ones((1, 1, 3, 3))), T.tensor(np.zeros(1))).data[0]
        want = np.zeros((3, 3))
        want[max(0, pos[0] - 1) : pos[0] + 2, max(0, pos[1] - 1) : pos[1] + 2] = 1
        assert np.array_equal(out, want)


@pytest.mark.parametrize("k,stride", [(1, 1), (3, 1), (3, 2), (5, 1)])
def test_conv_matches_loop_oracle(k, stride):
    rng = np.random.default_rng(k * 10 + stride)
    x, w, b = rng.normal(size=(2, 6, 7)), rng.normal(size=(3, 2, k, k)), rng.normal(size=3)
    got = T.conv2d(T.tensor(x, dtype=np.float64), T.tensor(w, dtype=np.float64), T.tensor(b, dtype=np.float64), stride=stride)
    assert np.allclose(got.data, naive_conv(x, w, b, stride), atol=1e-10)


def test_conv_batched_equals_per_image():
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(3, 2, 4, 4)), rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)
    batched = T.conv2d(T.tensor(x, dtype=np.float64), T.tensor(w, dtype=np.float64), T.tensor(b, dtype=np.float64)).data
    for i in range(3):
        assert np.allclose(batched[i], naive_conv(x[i], w, b), atol=1e-10)


def test_conv_channel_mismatch():
    with pytest.raises(T.ShapeError):
        T.conv2d(T.tensor(np.zeros((2, 4, 4))), T.tensor(np.zeros((3, 3, 3, 3))), T.tensor(np.zeros(3)))


def test_conv_gradient_small_instance():
    rng = np.random.default_rng(11)
    probe = rng.normal(size=(3, 4, 4))
    case = Case(
        {"x": rng.normal(size=(2, 4, 4)), "w": rng.normal(size=(3, 2, 3, 3)), "b": rng.normal(size=3)},
        lambda t: T.sum(T.conv2d(t["x"], t["w"], t["b"]) * probe),
        ("x", "w", "b"),
    )
    got = analytic_grads(case)
    for k in case.wrt:
        assert scaled_error(got[k], numeric_grad(case, k)).max() <= 1e-3


# -- reductions --------------------------------------------------------------

def test_reductions():
    assert T.mean(T.tensor([1.0, 2.0, 3.0])).item() == 2
    assert T.masked_mean(T.tensor([5.0, 9.0]), np.array([1, 0])).item() == 5


def test_masked_mean_empty_mask_warns():
    with pytest.warns(T.EmptyMaskWarning):
        out = T.masked_mean(T.tensor([5.0, 9.0], requires_grad=True), np.zeros(2))
    assert out.item() == 0


def test_masked_mean_broadcasts_single_channel_mask():
    x = np.arange(2 * 3 * 2 * 2, dtype=np.float64).reshape(2, 3, 2, 2)
    mask = np.zeros((2, 1, 2, 2))
    mask[0, 0, 0, 0] = mask[1, 0, 1, 1] = 1
    full = np.broadcast_to(mask, x.shape)
    assert T.masked_mean(T.tensor(x), mask).item() == pytest.approx(x[full > 0].mean())


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e3, 1e3)))
def test_mean_is_sum_over_count(x):
    assert T.mean(T.tensor(x)).item() == pytest.approx(T.sum(T.tensor(x)).item() / x.size, rel=1e-9, abs=1e-9)


# -- detach / backward -------------------------------------------------------

def test_detach():
    x = T.tensor([1.0, -2.0, 3.0], requires_grad=True, dtype=np.float64)
    y = T.tensor([0.5, 4.0, -1.0], requires_grad=True, dtype=np.float64)
    d = T.detach(x)
    assert np.array_equal(d.data, x.data)
    T.backward(T.sum(d * y))
    assert x.grad is None or np.array_equal(x.grad, np.zeros(3))
    assert np.array_equal(y.grad, x.data)


def test_backward_basics():
    x = np.random.default_rng(1).normal(size=(3, 2))
    (g,) = grad_of(T.sum, x)
    assert np.array_equal(g, np.ones_like(x))
    (g,) = grad_of(lambda t: T.sum(T.square(t)), [1.0, -2.0])
    assert np.array_equal(g, [2, -4])


def test_backward_rejects_non_scalar():
    x = T.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(T.ShapeError):
        T.backward(T.square(x))


def test_reused_node_accumulates():
    (g,) = grad_of(lambda x: T.sum(x * x + x), [3.0])
    assert g[0] == pytest.approx(7.0)


def test_composite_chain_matches_differences():
    rng = np.random.default_rng(5)
    x = rng.choice([-1, 1], size=(2, 4, 4)) * rng.uniform(0.1, 2, size=(2, 4, 4))
    probe = rng.normal(size=(3, 4, 4))
    case = Case(
        {"x": x, "w": rng.normal(size=(3, 2, 3, 3)), "b": rng.normal(size=3)},
        lambda t: T.sum(T.sigmoid(T.conv2d(T.relu(t["x"]), t["w"], t["b"])) * probe),
        ("x", "w", "b"),
    )
    got = analytic_grads(case)
    for k in case.wrt:
        assert scaled_error(got[k], numeric_grad(case, k)).max() <= 1e-3


def test_no_grad_records_nothing():
    x = T.tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.square(x)
    assert not y.requires_grad
    assert T.is_grad_enabled()


# -- structural ops ----------------------------------------------------------

def test_maxpool_and_upsample():
    x = T.tensor(np.arange(16, dtype=np.float32).reshape(1, 4, 4), requires_grad=True)
    p = T.maxpool2(x)
    assert np.array_equal(p.data, [[[5, 7], [13, 15]]])
    T.backward(T.sum(p))
    assert x.grad.sum() == 4 and x.grad[0, 1, 1] == 1
    u = T.nearest_upsample2(T.tensor([[[1.0, 2.0]]]))
    assert np.array_equal(u.data, [[[1, 1, 2, 2], [1, 1, 2, 2]]])


def test_concat_slice_roundtrip():
    a = T.tensor(np.ones((2, 1, 3, 3)))
    b = T.tensor(np.zeros((2, 2, 3, 3)))
    c = T.concat_channels([a, b])
    assert c.shape == (2, 3, 3, 3)
    assert np.array_equal(T.slice_channels(c, 1, 3).data, b.data)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_elementwise_gradients_property(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3))
    y = rng.normal(size=(2, 3))
    gx, gy = grad_of(lambda a, b: T.sum(a * b - T.square(a)), x, y)
    assert np.allclose(gx, y - 2 * x) and np.allclose(gy, x)


def test_float32_default_and_float64_preserved():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert T.tensor([1, 2]).dtype == np.float32
        assert T.tensor(np.zeros(2)).dtype == np.float64
