import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from laso import numerics as nx
from laso.gradcheck import check_gradients
from laso.numerics import ConfigurationError, DimensionError, Parameter, Tape, Tensor

FD_TOL = 1e-5


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    return nx.sum_all(nx.mul(out, Tensor(w)))


# -- tape mechanics ----------------------------------------------------------


def test_tape_records_one_entry_per_primitive_and_replays_in_reverse():
    rng = np.random.default_rng(0)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    a.requires_grad = b.requires_grad = True
    with Tape() as tape:
        y = nx.relu(nx.matmul(a, b))
        z = nx.softmax_rows(y)
        loss = nx.sum_all(z)
    assert len(tape) == 4
    visited = tape.backward(loss)
    assert visited == ["sum", "softmax", "relu", "matmul"]


def test_no_records_outside_a_tape():
    p = Parameter(np.ones((2, 2)))
    out = nx.matmul(p, p)
    assert not out.requires_grad


def test_zero_grad_resets_exactly():
    p = Parameter(np.arange(4.0).reshape(2, 2))
    with Tape() as tape:
        loss = nx.sum_all(nx.matmul(p, p))
    tape.backward(loss)
    assert np.abs(p.grad).sum() > 0
    p.zero_grad()
    assert p.grad.shape == p.data.shape
    assert (p.grad == 0.0).all()


def test_grad_accumulates_across_backward_calls():
    p = Parameter(np.array([[1.0, 2.0]]))
    for _ in range(2):
        with Tape() as tape:
            loss = nx.sum_all(nx.scale(p, 3.0))
        tape.backward(loss)
    np.testing.assert_array_equal(p.grad, [[6.0, 6.0]])


# -- matmul --------------------------------------------------------------------


def test_matmul_identity_and_hand_case():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(nx.matmul(Tensor(np.eye(2)), m).data, m.data)
    np.testing.assert_array_equal(nx.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_of_sum_matches_finite_differences():
    rng = np.random.default_rng(1)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    errs = check_gradients(lambda: nx.sum_all(nx.matmul(a, b)), [a, b])
    assert max(errs) < 1e-6


def test_batched_matmul_gradients():
    rng = np.random.default_rng(2)
    a, b, w = rand(rng, 2, 3, 4), rand(rng, 4, 5), rng.standard_normal((2, 3, 5))
    assert max(check_gradients(lambda: weighted_sum(nx.matmul(a, b), w), [a, b])) < FD_TOL
    c, d, w2 = rand(rng, 2, 3, 4), rand(rng, 2, 4, 2), rng.standard_normal((2, 3, 2))
    assert max(check_gradients(lambda: weighted_sum(nx.matmul(c, d), w2), [c, d])) < FD_TOL


def test_head_projection_equals_per_head_products():
    rng = np.random.default_rng(3)
    x, w = rand(rng, 2, 5, 6), rand(rng, 3, 6, 2)
    out = nx.head_projection(x, w).data
    for h in range(3):
        np.testing.assert_allclose(out[:, h], x.data @ w.data[h], rtol=0, atol=1e-14)
    g = rng.standard_normal(out.shape)
    assert max(check_gradients(lambda: weighted_sum(nx.head_projection(x, w), g), [x, w])) < FD_TOL


# -- softmax -------------------------------------------------------------------


def test_softmax_hand_cases():
    np.testing.assert_array_equal(nx.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    big = nx.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.isfinite(big).all()
    assert big[0, 0] == pytest.approx(1.0, abs=1e-300) and big[0, 1] < 1e-300
    x = np.array([1.0, 2.0, 3.0])
    direct = np.array([math.exp(v - 3.0) for v in x])
    direct /= direct.sum()
    np.testing.assert_allclose(nx.softmax_rows(Tensor(x[None])).data[0], direct, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (3, 5), elements=st.floats(-50, 50)),
    st.floats(-100, 100),
)
def test_softmax_rows_stochastic_and_shift_invariant(x, c):
    s = nx.softmax_rows(Tensor(x)).data
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(nx.softmax_rows(Tensor(x + c)).data, s, atol=1e-12)


def test_softmax_gradient():
    rng = np.random.default_rng(4)
    x, w = rand(rng, 3, 6), rng.standard_normal((3, 6))
    assert max(check_gradients(lambda: weighted_sum(nx.softmax_rows(x), w), [x])) < FD_TOL


# -- layer norm ------------------------------------------------------------------


def test_layer_norm_degenerate_cases():
    g, b = Parameter(np.ones(3)), Parameter(np.zeros(3))
    out = nx.layer_norm(Tensor([[0.7, 0.7, 0.7]]), g, b, 1e-5).data
    np.testing.assert_allclose(out, 0.0, atol=1e-12)
    g0, b1 = Parameter(np.zeros(3)), Parameter(np.array([1.0, -2.0, 3.0]))
    out = nx.layer_norm(Tensor(np.random.default_rng(0).standard_normal((4, 3))), g0, b1).data
    np.testing.assert_array_equal(out, np.broadcast_to(b1.data, (4, 3)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 8), elements=st.floats(-100, 100)))
def test_layer_norm_normalises(x):
    x = x + np.linspace(0, 1000, 8)  # row variance >= ~1e5, far above eps
    out = nx.layer_norm(Tensor(x), Parameter(np.ones(8)), Parameter(np.zeros(8))).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-10
    assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-8


def test_layer_norm_gradient():
    rng = np.random.default_rng(5)
    x = rand(rng, 2, 8)
    g = Tensor(1.0 + 0.1 * rng.standard_normal(8))
    b = Tensor(0.1 * rng.standard_normal(8))
    w = rng.standard_normal((2, 8))
    assert max(check_gradients(lambda: weighted_sum(nx.layer_norm(x, g, b), w), [x, g, b])) < FD_TOL


# -- GLU / relu / sigmoid ----------------------------------------------------------


def test_glu_gate_cases():
    a = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(nx.glu(Tensor(np.concatenate([a, np.zeros(3)]))).data, 0.5 * a)
    sat = nx.glu(Tensor(np.concatenate([a, np.full(3, 50.0)]))).data
    np.testing.assert_allclose(sat, a, rtol=0, atol=1e-12)
    with pytest.raises(DimensionError):
        nx.glu(Tensor(np.ones(5)))


def test_glu_gradient():
    rng = np.random.default_rng(6)
    x, w = rand(rng, 10), rng.standard_normal(5)
    assert max(check_gradients(lambda: weighted_sum(nx.glu(x), w), [x])) < FD_TOL


def test_relu_sigmoid_values_and_gradients():
    np.testing.assert_array_equal(nx.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])
    s = nx.sigmoid(Tensor([-800.0, 0.0, 800.0])).data
    np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])
    rng = np.random.default_rng(7)
    x = Tensor(rng.uniform(0.1, 2.0, 6) * rng.choice([-1, 1], 6))
    w = rng.standard_normal(6)
    assert max(check_gradients(lambda: weighted_sum(nx.relu(x), w), [x])) < FD_TOL
    assert max(check_gradients(lambda: weighted_sum(nx.sigmoid(x), w), [x])) < FD_TOL


# -- shape ops -------------------------------------------------------------------------


def test_split_merge_heads_inverse_pair():
    x = Tensor(np.random.default_rng(8).standard_normal((2, 5, 12)))
    heads = nx.split_heads(x, 3)
    assert heads.shape == (2, 3, 5, 4)
    np.testing.assert_array_equal(heads.data[1, 2], x.data[1, :, 8:12])
    np.testing.assert_array_equal(nx.merge_heads(heads).data, x.data)
    with pytest.raises(ConfigurationError):
        nx.split_heads(x, 5)


def test_shape_op_gradients():
    rng = np.random.default_rng(9)
    x, y = rand(rng, 2, 4, 6), rand(rng, 2, 4, 3)
    w = rng.standard_normal((2, 4, 9))
    assert max(check_gradients(lambda: weighted_sum(nx.concat_last_dim([x, y]), w), [x, y])) < FD_TOL
    wm = rng.standard_normal((2, 4, 6))
    assert max(check_gradients(lambda: weighted_sum(nx.merge_heads(nx.split_heads(x, 2)), wm), [x])) < FD_TOL
    wt = rng.standard_normal((2, 6, 4))
    assert max(check_gradients(lambda: weighted_sum(nx.transpose_2d(x), wt), [x])) < FD_TOL
    wr = rng.standard_normal((8, 6))
    assert max(check_gradients(lambda: weighted_sum(nx.reshape(x, (8, 6)), wr), [x])) < FD_TOL
    keep = rng.random((2, 4, 6)) > 0.3
    assert max(check_gradients(lambda: weighted_sum(nx.masked_fill(x, keep, -7.0), wm), [x])) < FD_TOL
    c = rand(rng, 6)
    assert max(check_gradients(lambda: weighted_sum(nx.add(x, c), wm), [x, c])) < FD_TOL


def test_embedding_gradient_accumulates_over_repeated_ids():
    rng = np.random.default_rng(10)
    table = Tensor(rng.standard_normal((5, 3)))
    w = rng.standard_normal(3)

    def loss(ids):
        return lambda: nx.sum_all(nx.mul(nx.embedding_lookup(table, ids), Tensor(w)))

    single = check_gradients(loss([3]), [table])
    assert single[0] < FD_TOL
    g1 = table.grad.copy()
    assert max(check_gradients(loss([3, 3]), [table])) < FD_TOL
    np.testing.assert_allclose(table.grad[3], 2 * g1[3], atol=1e-14)


def test_dropout_mask_and_identity():
    rng = np.random.default_rng(11)
    x = Tensor(np.ones((200, 50)))
    out = nx.dropout(x, 0.1, rng).data
    assert set(np.unique(out)) <= {0.0, 1.0 / 0.9}
    assert abs((out == 0).mean() - 0.1) < 0.01
    assert nx.dropout(x, 0.0, rng) is x


# -- conv frontend ----------------------------------------------------------------------


@pytest.mark.parametrize("t0, expected", [(100, 25), (4, 1), (5, 2), (8, 2), (40, 10)])
def test_two_stride2_layers_length_arithmetic(t0, expected):
    def out_len(n, k=3, s=2, p=1):
        return (n + 2 * p - k) // s + 1

    assert out_len(out_len(t0)) == expected
    assert nx.conv_out_len(nx.conv_out_len(t0)) == expected
    x = Tensor(np.ones((1, t0, 8, 1)))
    w1, b = Tensor(np.ones((3, 3, 1, 2))), Tensor(np.zeros(2))
    h = nx.conv2d_s2(nx.conv2d_s2(x, w1, b), Tensor(np.ones((3, 3, 2, 2))), b)
    assert h.shape[1] == expected


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(12)
    x, w, b = rng.standard_normal((2, 7, 6, 3)), rng.standard_normal((3, 3, 3, 4)), rng.standard_normal(4)
    out = nx.conv2d_s2(Tensor(x), Tensor(w), Tensor(b)).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros(out.shape)
    for n in range(2):
        for t in range(out.shape[1]):
            for f in range(out.shape[2]):
                patch = xp[n, 2 * t : 2 * t + 3, 2 * f : 2 * f + 3, :]
                ref[n, t, f] = np.einsum("ijc,ijco->o", patch, w) + b
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_gradient_on_8x8():
    rng = np.random.default_rng(13)
    x = rand(rng, 1, 8, 8, 1)
    w1, b1 = Tensor(0.5 * rng.standard_normal((3, 3, 1, 3))), Tensor(rng.standard_normal(3))
    w2, b2 = Tensor(0.5 * rng.standard_normal((3, 3, 3, 2))), Tensor(rng.standard_normal(2))
    g = rng.standard_normal((1, 2, 2, 2))

    def loss():
        return weighted_sum(nx.conv2d_s2(nx.relu(nx.conv2d_s2(x, w1, b1)), w2, b2), g)

    assert max(check_gradients(loss, [x, w1, b1, w2, b2])) < FD_TOL


# -- positional encodings ------------------------------------------------------------------


def test_pe_direct_values():
    pe = nx.sinusoidal_pe(10, 8)
    assert pe[0, 0] == pytest.approx(0.841471, abs=1e-6)
    assert pe[0, 1] == pytest.approx(0.540302, abs=1e-6)
    i, j = 7, 2
    assert pe[i - 1, 2 * j] == math.sin(i / 10000 ** (2 * j / 8))
    assert pe[i - 1, 2 * j + 1] == math.cos(i / 10000 ** (2 * j / 8))
    with pytest.raises(ConfigurationError):
        nx.sinusoidal_pe(4, 7)


def test_pe_relative_positions_are_fixed_rotations():
    length, d = 24, 16
    pe = nx.sinusoidal_pe(length, d)
    worst = 0.0
    for k in range(1, length):
        for j in range(d // 2):
            a = pe[: length - k, 2 * j : 2 * j + 2]
            b = pe[k:, 2 * j : 2 * j + 2]
            # least-squares fit of one 2x2 map from all pairs, independent of the closed form
            m, *_ = np.linalg.lstsq(a, b, rcond=None)
            worst = max(worst, np.abs(a @ m - b).max(), np.abs(a @ nx.pe_rotation(k, j, d).T - b).max())
    assert worst < 1e-9


def test_forward_is_deterministic():
    rng = np.random.default_rng(14)
    x, w = rng.standard_normal((3, 4)), rng.standard_normal((4, 6))
    outs = [nx.glu(nx.matmul(Tensor(x), Tensor(w))).data for _ in range(2)]
    assert outs[0].tobytes() == outs[1].tobytes()
