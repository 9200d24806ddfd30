import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from urm import autodiff as ad
from urm.autodiff import ContractError, DimensionError, Tensor, backward, grad_check

from reference import matmul_loops


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# ---------------------------------------------------------------- matmul


def test_matmul_identity(rng):
    x = rng.normal(size=(3, 3))
    assert np.array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(x)).data, x)


def test_matmul_hand_checked():
    out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    assert out.data.tolist() == [[2.0], [4.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(ad.matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_matmul_batch_broadcast(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    out = ad.matmul(Tensor(a), Tensor(b)).data
    for i in range(2):
        np.testing.assert_allclose(out[i], matmul_loops(a[i], b), atol=1e-12)


# ---------------------------------------------------------------- softmax


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor(np.zeros(4))).data, [0.25] * 4)


def test_softmax_shift_invariance(rng):
    x = rng.normal(size=(3, 6))
    np.testing.assert_allclose(ad.softmax(Tensor(x + 37.5)).data, ad.softmax(Tensor(x)).data, atol=1e-15)


def test_softmax_extended_precision():
    mpmath.mp.dps = 50
    ex = [mpmath.exp(v) for v in (1, 2, 3)]
    expected = [float(e / sum(ex)) for e in ex]
    np.testing.assert_allclose(ad.softmax(Tensor([1.0, 2.0, 3.0])).data, expected, rtol=1e-15)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    y = ad.softmax(Tensor(x), axis=-1).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------- layer norm


def test_layer_norm_constant_row_is_zero():
    out = ad.layer_norm(Tensor(np.full((2, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    assert np.array_equal(out.data, np.zeros((2, 5)))


def test_layer_norm_zero_gamma_gives_beta(rng):
    b = rng.normal(size=5)
    out = ad.layer_norm(Tensor(rng.normal(size=(3, 5))), Tensor(np.zeros(5)), Tensor(b))
    np.testing.assert_array_equal(out.data, np.broadcast_to(b, (3, 5)))


def test_layer_norm_row_stats(rng):
    out = ad.layer_norm(Tensor(rng.normal(size=(2, 8))), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.all(np.abs(out.mean(axis=1)) < 1e-7)
    assert np.all(np.abs(out.var(axis=1) - 1.0) < 1e-4)


# ---------------------------------------------------------------- elementwise


def test_unary_at_zero():
    assert ad.unary_elementwise("tanh", Tensor([0.0])).data[0] == 0.0
    assert ad.unary_elementwise("sigmoid", Tensor([0.0])).data[0] == 0.5


def test_tanh_range(rng):
    y = ad.tanh(Tensor(rng.normal(scale=3, size=1000))).data
    assert np.all(np.abs(y) < 1)


def test_gelu_extended_precision():
    mpmath.mp.dps = 50
    x = mpmath.mpf(1)
    expected = float(0.5 * x * (1 + mpmath.erf(x / mpmath.sqrt(2))))
    assert abs(ad.gelu(Tensor([1.0])).data[0] - expected) < 1e-15


def test_sigmoid_no_overflow():
    y = ad.sigmoid(Tensor([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(y)) and y[0] == 0.0 and y[1] == 1.0


def test_binary_identities(rng):
    a = rng.normal(size=(3, 4))
    assert np.array_equal(ad.binary_elementwise("add", Tensor(a), Tensor(np.zeros((3, 4)))).data, a)
    assert np.array_equal(ad.binary_elementwise("mul", Tensor(a), Tensor(np.ones((3, 4)))).data, a)


def test_mul_gradient_is_other_operand(rng):
    a, b = leaf(rng, 3, 4), Tensor(rng.normal(size=(3, 4)))
    backward(ad.reduce_sum(ad.mul(a, b)))
    np.testing.assert_array_equal(a.grad, b.data)
    assert grad_check(lambda: ad.reduce_sum(ad.mul(a, b)), [a]) < 1e-9


def test_binary_shape_error():
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


# ---------------------------------------------------------------- structural ops


def test_concat_and_slice(rng):
    a, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(5, 4)))
    assert ad.concat([a], 0).data.tobytes() == a.data.tobytes()
    c = ad.concat([a, b], 0)
    assert c.shape == (8, 4)
    assert ad.slice_axis(c, 3, 8, 0).data.tobytes() == b.data.tobytes()


def test_concat_mismatch():
    with pytest.raises(DimensionError):
        ad.concat([Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 5)))], 0)


def test_reduce_mean(rng):
    assert ad.reduce_mean(Tensor(np.full((4, 3), 2.5)), axis=0).data.tolist() == [2.5] * 3
    assert ad.reduce_mean(Tensor([1.0, 2.0, 3.0]), axis=0).item() == 2.0
    x = rng.normal(size=(6, 4))
    oracle = [sum(x[i, j] for i in range(6)) / 6 for j in range(4)]
    np.testing.assert_allclose(ad.reduce_mean(Tensor(x), axis=0).data, oracle, atol=1e-12)


def test_outer_product(rng):
    u = Tensor(rng.normal(size=5))
    assert np.array_equal(ad.outer_product(u, Tensor(np.zeros(5))).data, np.zeros((5, 5)))
    e = np.eye(4)
    out = ad.outer_product(Tensor(e[1]), Tensor(e[2])).data
    assert out[1, 2] == 1 and out.sum() == 1
    m = ad.outer_product(Tensor(rng.normal(size=6)), Tensor(rng.normal(size=6))).data
    for i in range(6):
        for j in range(i + 1, 6):
            for k in range(6):
                for l in range(k + 1, 6):
                    assert abs(m[i, k] * m[j, l] - m[i, l] * m[j, k]) < 1e-10


def test_outer_product_length_mismatch():
    with pytest.raises(DimensionError):
        ad.outer_product(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


# ---------------------------------------------------------------- backward


def test_backward_sum_is_ones(rng):
    x = leaf(rng, 3, 2)
    backward(ad.reduce_sum(x))
    assert np.array_equal(x.grad, np.ones((3, 2)))


def test_backward_tanh_at_zero():
    x = Tensor(np.zeros(4), requires_grad=True)
    backward(ad.reduce_sum(ad.tanh(x)))
    assert np.array_equal(x.grad, np.ones(4))


def test_backward_non_scalar_is_contract_error(rng):
    with pytest.raises(ContractError):
        backward(ad.tanh(leaf(rng, 3)))


def test_backward_accumulates(rng):
    x = leaf(rng, 3)
    backward(ad.reduce_sum(x))
    backward(ad.reduce_sum(x))
    assert np.array_equal(x.grad, 2 * np.ones(3))


def test_multiple_consumers_add(rng):
    x = leaf(rng, 4)
    backward(ad.reduce_sum(ad.add(ad.mul(x, 2.0), ad.mul(x, 3.0))))
    np.testing.assert_allclose(x.grad, 5.0)


def test_tape_visits_each_node_once(rng):
    x = leaf(rng, 3)
    y = ad.tanh(x)
    out = ad.reduce_sum(ad.add(y, y))
    tape = ad.Tape.record(out)
    assert len(tape) == len({id(n) for n in tape.nodes}) == 3
    assert [n.seq for n in tape.nodes] == sorted(n.seq for n in tape.nodes)


def test_no_grad_records_nothing(rng):
    x = leaf(rng, 3)
    with ad.no_grad():
        y = ad.tanh(x)
    assert y.node is None and not y.requires_grad


def test_backward_deterministic(rng):
    w = leaf(rng, 5, 5)
    x = Tensor(rng.normal(size=(4, 5)))

    def run():
        w.zero_grad()
        backward(ad.reduce_sum(ad.softmax(ad.matmul(x, w))))
        return w.grad.tobytes()

    assert run() == run()


# ---------------------------------------------------------------- grad check


def test_grad_check_linear_exact(rng):
    W, x = leaf(rng, 4, 5), Tensor(rng.normal(size=(5, 1)))
    assert grad_check(lambda: ad.reduce_sum(ad.matmul(W, x)), {"W": W}) < 1e-9


def test_grad_check_rejects_nondeterministic(rng):
    x = leaf(rng, 3)
    noise = np.random.default_rng(0)
    with pytest.raises(ContractError):
        grad_check(lambda: ad.reduce_sum(ad.mul(x, noise.normal())), [x])


def test_grad_check_requires_double(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True, precision="single")
    with pytest.raises(ContractError):
        grad_check(lambda: ad.reduce_sum(x), [x])


PRIMITIVES = {
    "matmul": (lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)]),
    "batched_matmul": (lambda a, b: ad.matmul(a, b), [(2, 3, 4), (4, 5)]),
    "add_broadcast": (lambda a, b: ad.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: ad.sub(a, b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: ad.mul(a, b), [(2, 3), (1, 3)]),
    "sigmoid": (ad.sigmoid, [(3, 4)]),
    "tanh": (ad.tanh, [(3, 4)]),
    "gelu": (ad.gelu, [(3, 4)]),
    "negate": (ad.negate, [(5,)]),
    "softmax": (lambda x: ad.softmax(x, axis=-1), [(3, 5)]),
    "softmax_axis0": (lambda x: ad.softmax(x, axis=0), [(3, 5)]),
    "layer_norm": (lambda x, g, b: ad.layer_norm(x, g, b), [(3, 6), (6,), (6,)]),
    "concat": (lambda a, b: ad.concat([a, b], axis=-2), [(2, 3), (4, 3)]),
    "slice": (lambda x: ad.slice_axis(x, 1, 3, axis=0), [(4, 3)]),
    "mean": (lambda x: ad.reduce_mean(x, axis=-2), [(2, 5, 3)]),
    "sum": (lambda x: ad.reduce_sum(x, axis=1), [(2, 5, 3)]),
    "outer": (ad.outer_product, [(2, 4), (2, 4)]),
    "transpose": (ad.transpose, [(2, 3, 4)]),
    "reshape": (lambda x: ad.reshape(x, (6, 2)), [(3, 4)]),
    "broadcast": (lambda x: ad.broadcast_to(x, (3, 2, 4)), [(1, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name, rng):
    fn, shapes = PRIMITIVES[name]
    leaves = [leaf(rng, *s) for s in shapes]
    out_shape = fn(*leaves).shape
    # a random weighting keeps every output element in the scalar objective
    w = Tensor(rng.normal(size=out_shape))
    err = grad_check(lambda: ad.reduce_sum(ad.mul(fn(*leaves), w)), leaves)
    assert err < 1e-5, name


def test_cross_entropy_gradient(rng):
    z = leaf(rng, 4, 6)
    labels = rng.integers(6, size=4)
    assert grad_check(lambda: ad.cross_entropy(z, labels), [z]) < 1e-5


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        ad.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
