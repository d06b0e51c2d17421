import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from castling import tensor as T
from castling.gradcheck import check, relative_error
from castling.rng import SplitMix64
from castling.tensor import ConfigError, ContractError, Parameter, ShapeError, Tensor


def arr(x):
    return Tensor(np.array(x, dtype=np.float64))


# -- matmul -------------------------------------------------------------------


def test_matmul_identity():
    a = arr([[1, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(arr(np.eye(2)), a).data, a.data)


def test_matmul_zero():
    np.testing.assert_array_equal(T.matmul(arr(np.eye(2)), arr(np.zeros((2, 2)))).data, np.zeros((2, 2)))


def test_matmul_hand_dot():
    assert T.matmul(arr([[1, 2]]), arr([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        T.matmul(arr(np.ones((2, 3))), arr(np.ones((4, 5))))
    assert "[2, 3]" in str(err.value) and "[4, 5]" in str(err.value)


def test_matmul_backward_formula():
    a, b = Parameter(np.arange(6.0).reshape(2, 3)), Parameter(np.arange(12.0).reshape(3, 4) / 7)
    g = SplitMix64(3).normal((2, 4))
    with T.Tape():
        out = T.matmul(a, b)
        T.backward(T.sum(T.mul(out, Tensor(g))))
    np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-14)
    np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 64), st.integers(1, 64), st.integers(0, 2**32))
def test_matmul_associativity(m, k, n, p, seed):
    rng = SplitMix64(seed)
    A, B, C = (arr(rng.uniform(-1, 1, s)) for s in [(m, k), (k, n), (n, p)])
    left = T.matmul(T.matmul(A, B), C).data
    right = T.matmul(A, T.matmul(B, C)).data
    assert np.abs(left - right).max() < 1e-9


# -- softmax ------------------------------------------------------------------


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax_rows(arr([[0, 0]])).data, [[0.5, 0.5]])


def test_softmax_hand_value():
    np.testing.assert_allclose(T.softmax_rows(arr([[1, 0]])).data, [[0.731059, 0.268941]], atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.floats(-50, 50), st.integers(0, 2**32))
def test_softmax_rows_sum_to_one_and_shift_invariant(m, n, c, seed):
    x = SplitMix64(seed).normal((m, n), scale=5.0)
    y = T.softmax_rows(arr(x)).data
    assert np.all(y >= 0)
    assert np.abs(y.sum(axis=1) - 1).max() < 1e-12
    np.testing.assert_allclose(T.softmax_rows(arr(x + c)).data, y, atol=1e-12)


def test_softmax_large_inputs_stay_finite():
    y = T.softmax_rows(arr([[1000.0, 0.0, -1000.0]])).data
    assert np.all(np.isfinite(y)) and y[0, 0] == 1.0


# -- l2 normalisation ---------------------------------------------------------


def test_l2_normalize_examples():
    np.testing.assert_allclose(T.l2_normalize_rows(arr([[3, 4]])).data, [[0.6, 0.8]])
    np.testing.assert_array_equal(T.l2_normalize_rows(arr([[1, 0]])).data, [[1, 0]])
    np.testing.assert_array_equal(T.l2_normalize_rows(arr([[0, 0]]), eps=1e-12).data, [[0, 0]])


def test_l2_normalize_rows_have_unit_norm():
    x = SplitMix64(1).normal((10, 5))
    norms = np.linalg.norm(T.l2_normalize_rows(arr(x)).data, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-14)


# -- depthwise convolution ----------------------------------------------------


def test_dwconv1d_identity_kernel():
    x = SplitMix64(2).normal((7, 3))
    kernel = np.tile([0.0, 1.0, 0.0], (3, 1))
    np.testing.assert_array_equal(T.dwconv1d(arr(x), arr(kernel)).data, x)


def test_dwconv1d_hand_convolution():
    out = T.dwconv1d(arr([[1], [2], [3]]), arr([[1, 1, 1]])).data
    assert out[:, 0].tolist() == [3.0, 6.0, 5.0]


def test_dwconv1d_zero_kernel_and_even_size():
    x = arr(np.ones((4, 2)))
    np.testing.assert_array_equal(T.dwconv1d(x, arr(np.zeros((2, 3)))).data, 0.0)
    with pytest.raises(ConfigError):
        T.dwconv1d(x, arr(np.zeros((2, 2))))


def test_dwconv1d_is_cross_correlation():
    # asymmetric kernel: out[i] = sum_j k[j] x[i + j - 1]
    out = T.dwconv1d(arr([[1], [2], [3]]), arr([[1, 0, 0]])).data
    assert out[:, 0].tolist() == [0.0, 1.0, 2.0]


def test_dwconv2d_examples():
    x = SplitMix64(4).normal((3, 5, 2))
    delta = np.zeros((2, 3, 3))
    delta[:, 1, 1] = 1.0
    np.testing.assert_array_equal(T.dwconv2d(arr(x), arr(delta)).data, x)
    ones = arr(np.ones((1, 3, 3)))
    assert T.dwconv2d(arr([[[5.0]]]), ones).data.tolist() == [[[5.0]]]
    np.testing.assert_array_equal(T.dwconv2d(arr(np.ones((2, 2, 1))), ones).data, 4.0)
    with pytest.raises(ConfigError):
        T.dwconv2d(arr(x), arr(np.zeros((2, 2, 2))))


def test_dwconv_delta_identity_5x5_batched():
    x = SplitMix64(5).normal((2, 4, 4, 3))
    k = np.zeros((3, 5, 5))
    k[:, 2, 2] = 1
    np.testing.assert_array_equal(T.dwconv2d(arr(x), arr(k)).data, x)


# -- pooling ------------------------------------------------------------------


def test_avg_pool_examples():
    assert T.avg_pool_tokens(arr([[1], [3], [5], [7]]), 2).data[:, 0].tolist() == [2.0, 6.0]
    assert T.avg_pool_tokens(arr([[1], [2], [3]]), 2).data[:, 0].tolist() == [1.5, 3.0]
    x = SplitMix64(6).normal((5, 3))
    np.testing.assert_array_equal(T.avg_pool_tokens(arr(x), 1).data, x)
    with pytest.raises(ConfigError):
        T.avg_pool_tokens(arr(x), 0)


# -- tape semantics -----------------------------------------------------------


def test_backward_visits_reverse_order():
    x = Parameter(np.array([[0.3, -0.2]]))
    with T.Tape() as tape:
        y = T.tanh(x)
        z = T.exp(y)
        loss = T.sum(z)
        T.backward(loss)
    assert [tape.nodes[i].name for i in tape.backward_order] == ["sum", "exp", "tanh"]
    assert tape.backward_order == sorted(tape.backward_order, reverse=True)


def test_backward_populates_every_reachable_parameter():
    a, b = Parameter(np.ones((2, 2))), Parameter(np.full((2,), 0.5))
    unused = Parameter(np.ones(3))
    with T.Tape():
        T.backward(T.sum(T.add(T.mul(a, a), b)))
    np.testing.assert_array_equal(a.grad, 2.0)
    np.testing.assert_array_equal(b.grad, 2.0)
    np.testing.assert_array_equal(unused.grad, 0.0)


def test_gradients_accumulate_until_zeroed():
    p = Parameter(np.array([2.0]))
    for _ in range(2):
        with T.Tape():
            T.backward(T.sum(T.mul(p, 3.0)))
    assert p.grad.tolist() == [6.0]
    p.zero_grad()
    assert p.grad.tolist() == [0.0] and p.grad.shape == p.data.shape


def test_non_scalar_loss_is_a_contract_error():
    p = Parameter(np.ones(3))
    with T.Tape():
        with pytest.raises(ContractError):
            T.backward(T.mul(p, 2.0))


def test_outputs_finite_on_finite_inputs():
    x = arr(SplitMix64(9).normal((4, 6), scale=30.0))
    for op in (T.softmax_rows, T.log_softmax_rows, T.l2_normalize_rows, T.tanh, T.gelu):
        assert np.all(np.isfinite(op(x).data))


# -- gradient checks (a spread of seeds; the 50-seed sweep lives in the bench suite) --


@pytest.mark.parametrize("name,fn,shapes", [
    ("softmax_rows", T.softmax_rows, [(3, 4)]),
    ("layer_norm", T.layer_norm, [(3, 4), (4,), (4,)]),
    ("dwconv1d", T.dwconv1d, [(6, 2), (2, 5)]),
    ("dwconv2d", T.dwconv2d, [(3, 3, 2), (2, 3, 3)]),
    ("matmul", T.matmul, [(2, 3), (3, 4)]),
    ("avg_pool_tokens", lambda x: T.avg_pool_tokens(x, 3), [(7, 2)]),
])
def test_gradcheck_ops(name, fn, shapes):
    for seed in range(5):
        rng = SplitMix64(seed)
        assert check(fn, [rng.normal(s) for s in shapes], rng=rng) < 1e-5, name


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0]), np.array([1.0 + 1e-7])) < 1e-6


# -- fixture I/O --------------------------------------------------------------


def test_tensor_roundtrip_and_format(tmp_path):
    x = SplitMix64(0).normal((2, 3))
    T.save_tensor(arr(x), tmp_path / "x")
    raw = (tmp_path / "x.bin").read_bytes()
    assert raw == x.astype("<f8").tobytes()
    assert (tmp_path / "x.json").read_text() == '{"shape": [2, 3]}'
    np.testing.assert_array_equal(T.load_tensor(tmp_path / "x").data, x)


def test_dotted_names_do_not_collide(tmp_path):
    T.save_tensor(np.ones(2), tmp_path / "l0.ln.g")
    T.save_tensor(np.zeros(2), tmp_path / "l0.ln.b")
    assert T.load_tensor(tmp_path / "l0.ln.g").data.tolist() == [1.0, 1.0]


def test_load_rejects_mismatched_sidecar(tmp_path):
    T.save_tensor(np.ones(4), tmp_path / "x")
    (tmp_path / "x.json").write_text('{"shape": [5]}')
    with pytest.raises(ShapeError):
        T.load_tensor(tmp_path / "x")
