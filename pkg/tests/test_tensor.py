import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from spectralformer import tensor as T
from spectralformer.errors import ConfigError, ContractError, DimensionError
from spectralformer.tensor import Tape, Tensor
from spectralformer.training import cross_entropy


def triple_loop(a, b):
    p, q = a.shape
    r = b.shape[1]
    out = np.zeros((p, r))
    for i in range(p):
        for j in range(r):
            out[i, j] = math.fsum(a[i, k] * b[k, j] for k in range(q))
    return out


def softmax_oracle(row):
    e = [math.exp(x) for x in row]
    s = math.fsum(e)
    return [x / s for x in e]


def gelu_oracle(x):
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(a)).data, a)


def test_matmul_selector_row():
    out = T.matmul(Tensor([[1.0, 0.0]]), Tensor([[5.0], [7.0]]))
    np.testing.assert_array_equal(out.data, [[5.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, triple_loop(a, b), atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_backward_rules():
    rng = np.random.default_rng(0)
    a, b, g = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    tape = Tape()
    ta, tb = tape.leaf(a), tape.leaf(b)
    loss = T.sum_all(T.mul(T.matmul(ta, tb), Tensor(g)))
    tape.backward(loss)
    np.testing.assert_allclose(tape.grad(ta), g @ b.T, atol=1e-12)
    np.testing.assert_allclose(tape.grad(tb), a.T @ g, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_matmul_associativity(seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
    left = T.matmul(T.matmul(Tensor(a), Tensor(b)), Tensor(c)).data
    right = T.matmul(Tensor(a), T.matmul(Tensor(b), Tensor(c))).data
    np.testing.assert_allclose(left, right, atol=1e-10)
    a32, b32, c32 = (x.astype(np.float32) for x in (a, b, c))
    left = T.matmul(T.matmul(Tensor(a32), Tensor(b32)), Tensor(c32)).data
    right = T.matmul(Tensor(a32), T.matmul(Tensor(b32), Tensor(c32))).data
    np.testing.assert_allclose(left, right, atol=1e-5)


# ---------------------------------------------------------------- softmax


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3])


@pytest.mark.parametrize("c", [-50.0, 0.0, 3.5, 700.0])
def test_softmax_shift_pair(c):
    out = T.softmax_rows(Tensor([[c, c + math.log(2.0)]])).data
    np.testing.assert_allclose(out, [[1 / 3, 2 / 3]], atol=1e-12)


def test_softmax_reference_values():
    out = T.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0]
    np.testing.assert_allclose(out, softmax_oracle([1.0, 2.0, 3.0]), atol=1e-12)
    np.testing.assert_allclose(out, [0.09003, 0.24473, 0.66524], atol=1e-5)


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                     elements=st.floats(-300, 300, allow_nan=False))


@settings(max_examples=100, deadline=None)
@given(finite_rows, st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    y = T.softmax_rows(Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(T.softmax_rows(Tensor(x + c)).data, y, atol=1e-6)


# ---------------------------------------------------------------- gelu / layer norm / dropout


def test_gelu_values():
    out = T.gelu(Tensor(np.array([0.0, 1.0, -10.0]))).data
    assert out[0] == 0.0
    assert abs(out[1] - gelu_oracle(1.0)) < 1e-12
    assert abs(out[1] - 0.84134) < 1e-5
    assert abs(out[2]) < 1e-8


def test_gelu_is_exact_erf_not_tanh():
    x = np.linspace(-4, 4, 41)
    expected = [gelu_oracle(v) for v in x]
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, expected, atol=1e-12)


def ones_ln(d):
    return Tensor(np.ones(d)), Tensor(np.zeros(d))


def test_layer_norm_constant_vector_is_zero():
    g, b = ones_ln(5)
    np.testing.assert_array_equal(T.layer_norm(Tensor(np.full(5, 3.0)), g, b).data, np.zeros(5))


def test_layer_norm_symmetric_pair():
    g, b = ones_ln(2)
    out = T.layer_norm(Tensor([1.0, -1.0]), g, b).data
    np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-5)


def test_layer_norm_two_pass_oracle():
    rng = np.random.default_rng(11)
    x = rng.normal(size=8) * 3 + 1
    gamma, beta = rng.normal(size=8), rng.normal(size=8)
    mean = math.fsum(x) / 8
    var = math.fsum((v - mean) ** 2 for v in x) / 8
    expected = [gamma[i] * (x[i] - mean) / math.sqrt(var + 1e-5) + beta[i] for i in range(8)]
    out = T.layer_norm(Tensor(x), Tensor(gamma), Tensor(beta)).data
    np.testing.assert_allclose(out, expected, atol=1e-6)


def test_dropout_identities():
    x = Tensor(np.arange(10.0))
    rng = T.make_rng(0)
    assert T.dropout(x, 0.0, True, rng) is x
    assert T.dropout(x, 0.1, False, rng) is x


def test_dropout_mean_preserved():
    x = Tensor(np.ones(10 ** 6))
    out = T.dropout(x, 0.1, True, T.make_rng(5)).data
    assert 0.99 <= out.mean() <= 1.01
    zero_frac = np.mean(out == 0)
    assert 0.09 < zero_frac < 0.11
    np.testing.assert_allclose(out[out != 0], 1 / 0.9)


@pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
def test_dropout_rate_validation(p):
    with pytest.raises(ConfigError):
        T.dropout(Tensor(np.ones(3)), p, True, T.make_rng(0))


# ---------------------------------------------------------------- tape


def test_backward_linear_map():
    x = np.array([[1.0], [2.0], [-3.0]])
    tape = Tape()
    w = tape.leaf(np.random.default_rng(0).normal(size=(2, 3)))
    tape.backward(T.sum_all(T.matmul(w, Tensor(x))))
    np.testing.assert_array_equal(tape.grad(w), np.broadcast_to(x.T, (2, 3)))


def test_backward_softmax_cross_entropy_is_p_minus_onehot():
    logits = np.array([0.3, -1.2, 2.0, 0.5])
    tape = Tape()
    z = tape.leaf(logits)
    tape.backward(cross_entropy(z, [3]))
    p = np.array(softmax_oracle(logits))
    np.testing.assert_allclose(tape.grad(z), p - np.eye(4)[2], atol=1e-12)


def test_backward_sum_of_parameters_is_all_ones():
    tape = Tape()
    a, b = tape.leaf(np.random.default_rng(1).normal(size=(3, 4))), tape.leaf(np.zeros(4))
    tape.backward(T.sum_all(T.add(a, b)))
    assert np.array_equal(tape.grad(a), np.ones((3, 4)))
    assert np.array_equal(tape.grad(b), np.full(4, 3.0))
    tape = Tape()
    c = tape.leaf(np.arange(6.0))
    tape.backward(T.sum_all(c))
    assert np.array_equal(tape.grad(c), np.ones(6))


def test_backward_requires_scalar():
    tape = Tape()
    a = tape.leaf(np.ones(3))
    with pytest.raises(ContractError):
        tape.backward(T.mul_const(a, 2.0))


def test_tape_is_topological_and_grads_shaped():
    tape = Tape()
    a = tape.leaf(np.ones((2, 3)))
    w = tape.leaf(np.ones((3, 3)))
    loss = T.sum_all(T.gelu(T.matmul(a, w)))
    for i, node in enumerate(tape.nodes):
        assert all(j is None or j < i for j in node.inputs)
    grads = tape.backward(loss)
    assert grads[a.node_id].shape == a.shape and grads[w.node_id].shape == w.shape


def test_unused_leaf_gets_zero_grad():
    tape = Tape()
    a, unused = tape.leaf(np.ones(2)), tape.leaf(np.ones(3))
    tape.backward(T.sum_all(a))
    assert np.array_equal(tape.grad(unused), np.zeros(3))


def test_mixing_tapes_is_rejected():
    a, b = Tape().leaf(np.ones((2, 2))), Tape().leaf(np.ones((2, 2)))
    with pytest.raises(ContractError):
        T.matmul(a, b)


def test_debug_mode_flags_non_finite():
    T.set_debug(True)
    try:
        with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
            T.mul_const(Tensor(np.array([1e308])), 10.0)
    finally:
        T.set_debug(False)


# ---------------------------------------------------------------- grad check


def test_grad_check_quadratic():
    res = T.grad_check(lambda tape, p: T.sum_all(T.mul(p["x"], p["x"])), {"x": np.array(3.0)})
    assert res.max_error < 1e-8


OPS = {
    "softmax": lambda p: T.sum_all(T.mul(T.softmax_rows(p["x"]), Tensor(np.arange(12.0).reshape(3, 4)))),
    "log_softmax": lambda p: T.sum_all(T.mul(T.log_softmax(p["x"]), Tensor(np.arange(12.0).reshape(3, 4)))),
    "gelu": lambda p: T.sum_all(T.gelu(p["x"])),
    "layer_norm": lambda p: T.sum_all(T.mul(T.layer_norm(p["x"], p["g"], p["b"]),
                                            Tensor(np.linspace(-1, 1, 12).reshape(3, 4)))),
    "matmul_batched": lambda p: T.sum_all(T.gelu(T.matmul(T.reshape(p["x"], (3, 1, 4)), p["w"]))),
    "matmul_left_shared": lambda p: T.sum_all(T.gelu(T.matmul(T.transpose(p["w"]),
                                                                T.reshape(p["x"], (3, 4, 1))))),
    "scale_take": lambda p: T.sum_all(T.gelu(T.scale(p["x"], T.take(p["g"], 1, 0)))),
    "permute_reshape": lambda p: T.sum_all(T.gelu(
        T.reshape(T.permute(T.reshape(p["x"], (3, 2, 2)), (1, 0, 2)), (2, 6)))),
    "concat_expand_narrow": lambda p: T.sum_all(T.gelu(T.concat(
        [T.expand(p["g"], (2,)), T.narrow(p["x"], 0, 2, 0)], axis=0))),
    "mean_axis": lambda p: T.sum_all(T.gelu(T.mean_axis(p["x"], 0))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(7)
    params = {"x": rng.normal(size=(3, 4)), "g": 1 + 0.2 * rng.normal(size=4),
              "b": rng.normal(size=4), "w": rng.normal(size=(4, 4))}
    res = T.grad_check(lambda tape, p: OPS[name](p), params)
    assert res.max_error < 1e-6, res


def test_same_seed_same_tape_and_gradients():
    def run():
        rng = T.make_rng(42)
        tape = Tape()
        w = tape.leaf(rng.normal(size=(4, 4)))
        x = Tensor(rng.normal(size=(3, 4)))
        h = T.dropout(T.gelu(T.matmul(x, w)), 0.3, True, rng)
        tape.backward(T.sum_all(h))
        return [n.op for n in tape.nodes], h.data, tape.grad(w)

    ops1, h1, g1 = run()
    ops2, h2, g2 = run()
    assert ops1 == ops2
    assert h1.tobytes() == h2.tobytes() and g1.tobytes() == g2.tobytes()


def test_flop_counter_counts_matmuls():
    with T.count_flops() as fc:
        T.matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((4, 5))))
    assert fc.matmul == 2 * 2 * 3 * 4 * 5
