import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sgnet import autograd as ag
from sgnet.autograd import NumericError, ShapeError, Tensor
from sgnet.gradcheck import check_function
from sgnet.nn import AdamState, GruParams, adam_update, gru_cell_reference


def leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True, dtype=np.float64)


def test_matmul_examples():
    eye = Tensor(np.eye(2))
    m = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(ag.matmul(eye, m).data, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(ag.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data, [[11]])
    out = ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.random.default_rng(0).normal(size=(3, 2))))
    np.testing.assert_array_equal(out.data, np.zeros((2, 2)))


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_elementwise_examples():
    np.testing.assert_array_equal(ag.relu(Tensor([-1, 0, 2])).data, [0, 0, 2])
    np.testing.assert_allclose(ag.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert ag.tanh(Tensor(0.0)).item() == 0.0
    assert ag.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_softmax_empty_axis():
    with pytest.raises(ShapeError):
        ag.softmax(Tensor(np.zeros((2, 0))))


def test_softmax_mask_zeroes_entries():
    w = ag.softmax(Tensor(np.zeros((3, 3))), mask=np.triu(np.ones((3, 3), dtype=bool)))
    np.testing.assert_allclose(w.data, [[1 / 3, 1 / 3, 1 / 3], [0, 0.5, 0.5], [0, 0, 1]], atol=1e-7)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    y = ag.softmax(Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)


def test_backward_square():
    x = leaf(3.0)
    ag.backward(x * x)
    assert x.grad == 6.0


def test_backward_accumulates_without_reset():
    x = leaf(3.0)
    ag.backward(x * x)
    ag.backward(x * x)
    assert x.grad == 12.0


def test_backward_detached_constant_has_no_grad():
    x = leaf([1.0, 2.0])
    c = Tensor([3.0, 4.0], dtype=np.float64)
    ag.backward(ag.sum(x * c))
    assert c.grad is None
    np.testing.assert_array_equal(x.grad, [3.0, 4.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        ag.backward(leaf([1.0, 2.0]) * 2.0)


def test_backward_rejects_nonfinite_loss():
    x = leaf(np.inf)
    with pytest.raises(NumericError):
        ag.backward(x * 2.0)


def test_mean_relu_matches_finite_differences():
    rng = np.random.default_rng(1)
    W = leaf(rng.normal(size=(4, 3)))
    x = Tensor(rng.normal(size=(5, 4)), dtype=np.float64)
    assert check_function(lambda: ag.mean(ag.relu(ag.matmul(x, W))), [W]) <= 1e-4


# every primitive, checked in float64 against central differences
PRIMITIVES = {
    "add": (lambda a, b: ag.sum(ag.tanh(a + b)), [(3, 2), (2,)]),
    "sub": (lambda a, b: ag.sum(ag.tanh(a - b)), [(3, 2), (3, 1)]),
    "mul": (lambda a, b: ag.sum(a * b * a), [(2, 3), (2, 3)]),
    "matmul_batched": (lambda a, b: ag.sum(ag.tanh(ag.matmul(a, b))), [(2, 3, 4), (4, 2)]),
    "linear": (lambda x, w, b: ag.sum(ag.tanh(ag.linear(x, w, b))), [(2, 3, 4), (4, 5), (5,)]),
    "tanh": (lambda a: ag.sum(ag.tanh(a) * a), [(4,)]),
    "sigmoid": (lambda a: ag.sum(ag.sigmoid(a) * a), [(4,)]),
    "exp": (lambda a: ag.sum(ag.exp(a)), [(3,)]),
    "sqrt": (lambda a: ag.sum(ag.sqrt(a * a + 1.0)), [(3,)]),
    "softmax": (lambda a, b: ag.sum(ag.softmax(a) * b), [(2, 4), (2, 4)]),
    "masked_softmax": (lambda a, b: ag.sum(ag.softmax(a, mask=np.triu(np.ones((4, 4), bool))) * b),
                       [(4, 4), (4, 4)]),
    "mean_axis": (lambda a: ag.sum(ag.tanh(ag.mean(a, axis=(-2, -1)))), [(2, 3, 2)]),
    "concat_slice": (lambda a, b: ag.sum(ag.tanh(ag.concat([a, b], -1)[:, 1:4])), [(2, 2), (2, 3)]),
    "stack_reshape": (lambda a, b: ag.sum(ag.tanh(ag.stack([a, b], 1).reshape(2, 6)) * 1.5), [(2, 3), (2, 3)]),
    "take": (lambda a: ag.sum(ag.tanh(ag.take(a, np.array([[0, 1], [1, 2], [2, 2]]), axis=1))), [(2, 3, 2)]),
    "repeat": (lambda a: ag.sum(ag.tanh(ag.repeat(a, 3, axis=0)) * np.arange(18.0).reshape(6, 3)), [(2, 3)]),
    "fancy_getitem": (lambda a: ag.sum(ag.tanh(a[np.array([0, 1, 1]), np.array([2, 0, 0])])), [(2, 3)]),
    "swapaxes": (lambda a: ag.sum(ag.swapaxes(a, 0, 1) * np.arange(6.0).reshape(3, 2)), [(2, 3)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    fn, shapes = PRIMITIVES[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    with ag.precision(np.float64):
        inputs = [leaf(rng.normal(size=s)) for s in shapes]
        assert check_function(lambda: fn(*inputs), inputs) <= 1e-4


# ----------------------------------------------------------------------------
# gated recurrent cell


def gru_params(D, H, scale=0.5, seed=0, zero=False):
    rng = np.random.default_rng(seed)
    make = (lambda *s: leaf(np.zeros(s))) if zero else (lambda *s: leaf(rng.normal(scale=scale, size=s)))
    return GruParams(make(D, H), make(D, H), make(D, H), make(H, H), make(H, H), make(H, H),
                     make(H), make(H), make(H))


def test_gru_zero_params_halves_hidden():
    p = gru_params(3, 4, zero=True)
    h = np.random.default_rng(0).uniform(-1, 1, size=(2, 4))
    out = ag.gru_cell(Tensor(np.ones((2, 3))), Tensor(h), p)
    np.testing.assert_allclose(out.data, 0.5 * h)


def test_gru_fixed_point_at_zero():
    p = gru_params(3, 4, seed=3)
    for b in (p.b_z, p.b_r, p.b_h):
        b.data[:] = 0
    out = ag.gru_cell(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 4))), p)
    np.testing.assert_array_equal(out.data, 0)


def test_gru_scalar_hand_evaluation():
    vals = dict(w_xz=0.5, w_xr=-0.3, w_xh=0.8, w_hz=0.2, w_hr=0.7, w_hh=-0.4, b_z=0.1, b_r=-0.2, b_h=0.05)
    p = GruParams(**{k: leaf(np.full((1, 1) if k.startswith("w") else (1,), v)) for k, v in vals.items()})
    x, h = 1.2, -0.6
    sig = lambda v: 1 / (1 + math.exp(-v))  # noqa: E731
    z = sig(vals["w_xz"] * x + vals["w_hz"] * h + vals["b_z"])
    r = sig(vals["w_xr"] * x + vals["w_hr"] * h + vals["b_r"])
    c = math.tanh(vals["w_xh"] * x + vals["w_hh"] * (r * h) + vals["b_h"])
    expected = (1 - z) * h + z * c
    out = ag.gru_cell(Tensor([[x]], dtype=np.float64), Tensor([[h]], dtype=np.float64), p)
    assert abs(out.item() - expected) < 1e-12


def test_fused_gru_matches_reference_values_and_grads():
    rng = np.random.default_rng(5)
    p = gru_params(3, 4, seed=5)
    x = leaf(rng.normal(size=(2, 3)))
    h = leaf(rng.uniform(-1, 1, size=(2, 4)))
    w = rng.normal(size=(2, 4))
    leaves = [x, h] + [getattr(p, k) for k in ("w_xz", "w_xr", "w_xh", "w_hz", "w_hr", "w_hh", "b_z", "b_r", "b_h")]

    ag.backward(ag.sum(ag.gru_cell(x, h, p) * w))
    fused = [t.grad.copy() for t in leaves]
    for t in leaves:
        t.grad = None
    ref = gru_cell_reference(x, h, p)
    ag.backward(ag.sum(ref * w))
    np.testing.assert_allclose(ag.gru_cell(x, h, p).data, ref.data, atol=1e-12)
    for a, b in zip(fused, [t.grad for t in leaves]):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_gru_gradients_finite_differences():
    rng = np.random.default_rng(7)
    with ag.precision(np.float64):
        p = gru_params(3, 2, seed=7)
        x = leaf(rng.normal(size=(2, 3)))
        h = leaf(rng.uniform(-1, 1, size=(2, 2)))
        leaves = [x, h, p.w_xz, p.w_hh, p.b_r, p.w_hr]
        assert check_function(lambda: ag.sum(ag.tanh(ag.gru_cell(x, h, p))), leaves) <= 1e-4


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_gru_output_bounded_when_hidden_bounded(seed):
    rng = np.random.default_rng(seed)
    p = gru_params(3, 5, scale=2.0, seed=seed)
    h = rng.uniform(-0.999, 0.999, size=(4, 5))
    out = ag.gru_cell(Tensor(rng.normal(scale=3, size=(4, 3))), Tensor(h), p).data
    # convex combination of h and a tanh; saturated tanh rounds to exactly 1
    assert np.all(np.abs(out) <= 1)


def test_gru_shape_mismatch():
    p = gru_params(3, 4)
    with pytest.raises(ShapeError):
        ag.gru_cell(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 4))), p)


def test_injected_fault_is_detected():
    rng = np.random.default_rng(2)
    with ag.precision(np.float64):
        a = leaf(rng.normal(size=(4,)))
        with ag.inject_fault("tanh"):
            assert check_function(lambda: ag.sum(ag.tanh(a)), [a]) > 1e-2


def test_forward_is_deterministic():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(3, 4))
    p = gru_params(4, 4, seed=1)
    a = ag.gru_cell(Tensor(x), Tensor(np.zeros((3, 4))), p).data
    b = ag.gru_cell(Tensor(x), Tensor(np.zeros((3, 4))), p).data
    assert a.tobytes() == b.tobytes()


# ----------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_keeps_params():
    p = {"w": leaf([1.0, -2.0])}
    state = AdamState(lr=0.1)
    for _ in range(3):
        adam_update(p, state, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    assert state.step == 3


def test_adam_first_step_hand_value():
    p = {"w": leaf([1.0])}
    adam_update(p, AdamState(lr=0.1), {"w": np.ones(1)})
    # bias-corrected moments are both 1 at t=1
    assert abs(p["w"].data[0] - (1.0 - 0.1 / (1.0 + 1e-8))) < 1e-15


def test_adam_symmetric_parameters():
    p = {"a": leaf([0.3]), "b": leaf([0.3])}
    state = AdamState(lr=0.01)
    for g in (0.5, -1.0, 2.0):
        adam_update(p, state, {"a": np.array([g]), "b": np.array([g])})
    assert p["a"].data.tobytes() == p["b"].data.tobytes()


def test_adam_rejects_nonfinite_gradient():
    with pytest.raises(NumericError):
        adam_update({"w": leaf([1.0])}, AdamState(), {"w": np.array([np.nan])})
