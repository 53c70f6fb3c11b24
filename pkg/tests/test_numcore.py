import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from reroute import numcore as nc

finite = st.floats(-30, 30, allow_nan=False, allow_infinity=False)


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def check_grad(build, *inputs, tol=1e-6):
    """``build(*tensors) -> scalar Tensor``; compares tape gradients with central differences."""
    with nc.Tape() as tape:
        leaves = [tape.watch(x) for x in inputs]
        loss = build(*leaves)
    grads = nc.backward(loss, leaves)
    for i, x in enumerate(inputs):
        def f(v, i=i):
            args = list(inputs)
            args[i] = v
            return build(*args).item()

        num = numeric_grad(f, x)
        assert np.allclose(grads[i], num, atol=tol, rtol=tol), (i, np.abs(grads[i] - num).max())


# -- forward examples ----------------------------------------------------------


def test_matmul_example():
    out = nc.matmul([[1.0, 2.0], [3.0, 4.0]], [[5.0], [6.0]])
    assert out.data.tolist() == [[17.0], [39.0]]


def test_softmax_example_and_shift_invariance():
    p = nc.softmax(np.array([0.0, math.log(3.0)])).data
    assert p == pytest.approx([0.25, 0.75], abs=1e-15)


@given(arrays(np.float64, st.integers(1, 12), elements=finite), finite)
def test_softmax_sums_to_one_and_ignores_shift(v, c):
    p = nc.softmax(v).data
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.abs(nc.softmax(v + c).data - p).max() < 1e-12


def test_cross_entropy_matches_logsumexp_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(7, 11)) * 5
    y = rng.integers(0, 11, 7)
    expect = sum(math.log(sum(math.exp(v) for v in row)) - row[t] for row, t in zip(x.tolist(), y))
    assert nc.cross_entropy(x, y).item() == pytest.approx(expect, rel=1e-12)
    assert nc.cross_entropy(x, y, reduction="mean").item() == pytest.approx(expect / 7, rel=1e-12)


def test_cross_entropy_uniform_logits():
    assert nc.cross_entropy(np.zeros((3, 4)), [0, 1, 3]).item() == pytest.approx(3 * math.log(4))


def test_cross_entropy_rejects_bad_target():
    with pytest.raises(IndexError):
        nc.cross_entropy(np.zeros((2, 3)), [0, 3])


def test_rmsnorm_unit_rms():
    x = np.array([[3.0, 4.0]])
    out = nc.rmsnorm(x, np.ones(2)).data
    assert np.sqrt((out**2).mean()) == pytest.approx(1.0, abs=1e-6)


def test_causal_attention_first_position_copies_value():
    rng = np.random.default_rng(1)
    q, k, v = (rng.normal(size=(2, 5, 3)) for _ in range(3))
    out = nc.causal_attention(q, k, v).data
    assert np.allclose(out[:, 0], v[:, 0])
    # later keys must not influence earlier outputs
    k2, v2 = k.copy(), v.copy()
    k2[:, 3:] += 10
    v2[:, 3:] -= 7
    assert np.array_equal(nc.causal_attention(q, k2, v2).data[:, :3], out[:, :3])


def test_nonfinite_raises():
    with pytest.raises(nc.NonFiniteError):
        nc.add(np.array([np.inf]), 1.0)


# -- gradients ------------------------------------------------------------------


def test_grad_matmul_add_mean():
    rng = np.random.default_rng(2)
    a, b, c = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(2,))
    check_grad(lambda a, b, c: nc.mean(nc.add(nc.matmul(a, b), c)), a, b, c)


def test_grad_softmax_cross_entropy():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 6))
    w = rng.normal(size=(4, 6))
    check_grad(lambda x: nc.vdot(nc.softmax(x), w), x)
    check_grad(lambda x: nc.cross_entropy(x, [1, 0, 5, 2]), x)


def test_grad_rmsnorm_and_gather():
    rng = np.random.default_rng(4)
    table, gain = rng.normal(size=(5, 3)), rng.normal(size=(3,))
    w = rng.normal(size=(4, 3))
    check_grad(lambda t, g: nc.vdot(nc.rmsnorm(nc.gather_rows(t, [0, 2, 2, 4]), g), w), table, gain)


def test_grad_attention():
    rng = np.random.default_rng(5)
    q, k, v = (rng.normal(size=(2, 4, 3)) for _ in range(3))
    w = rng.normal(size=(2, 4, 3))
    check_grad(lambda q, k, v: nc.vdot(nc.causal_attention(q, k, v), w), q, k, v)


def test_grad_expert_mixture():
    rng = np.random.default_rng(6)
    T, d, f, E = 5, 3, 4, 3
    h = rng.normal(size=(T, d))
    gates = rng.uniform(size=(T, 2))
    idx = np.array([[0, 1], [2, 0], [1, 2], [0, 2], [1, 0]])
    w1, b1 = rng.normal(size=(E, d, f)), rng.normal(size=(E, f))
    w2, b2 = rng.normal(size=(E, f, d)), rng.normal(size=(E, d))
    w = rng.normal(size=(T, d))
    check_grad(lambda h, g, a, b, c, e: nc.vdot(nc.expert_mixture(h, g, idx, a, b, c, e), w),
               h, gates, w1, b1, w2, b2)


def test_grad_take_rows_cols_transpose_reshape():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 6))
    idx = np.array([[1, 3], [0, 5], [2, 2]])
    w = rng.normal(size=(3, 2))
    check_grad(lambda x: nc.vdot(nc.take_cols(nc.take_rows(nc.reshape(nc.transpose(x, (1, 0)), (4, 6)), 3), idx), w), x)


def test_scale_and_broadcast_add_grad():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(3, 1)), rng.normal(size=(1, 4))
    check_grad(lambda a, b: nc.mean(nc.scale(nc.add(a, b), 2.5)), a, b)


# -- tape semantics --------------------------------------------------------------


def test_tape_does_not_change_forward_values():
    rng = np.random.default_rng(9)
    x, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 4))
    plain = nc.softmax(nc.matmul(x, w)).data
    with nc.Tape() as tape:
        taped = nc.softmax(nc.matmul(tape.watch(x), w)).data
    assert np.array_equal(plain, taped)


def test_untracked_leaf_gets_zero_and_foreign_tensor_rejected():
    with nc.Tape() as tape:
        a, b = tape.watch(np.ones(3)), tape.watch(np.ones(3))
        loss = nc.mean(a)
    ga, gb = nc.backward(loss, [a, b])
    assert np.allclose(ga, 1 / 3) and np.array_equal(gb, np.zeros(3))
    with pytest.raises(LookupError):
        nc.backward(loss, [nc.Tensor(np.ones(3), requires_grad=True)])


def test_no_recording_outside_tape():
    with nc.Tape() as tape:
        x = tape.watch(np.ones(2))
    y = nc.scale(x, 2.0)
    assert not tape.nodes and y.tape is None


def test_backward_named_mapping():
    with nc.Tape() as tape:
        p = {"w": tape.watch(np.array([2.0]))}
        loss = nc.vdot(p["w"], np.array([3.0]))
    assert nc.backward(loss, p)["w"].tolist() == [3.0]
