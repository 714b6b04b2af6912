"""Tensor ops, reverse-mode gradients, AdamW and checkpoint round trips."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from agrimae import numcore as nc
from agrimae.numcore import Parameter, ShapeError, Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def param(values, name="p"):
    return Parameter(np.asarray(values, dtype=np.float64), name)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    a = np.arange(9.0).reshape(3, 3)
    out = nc.matmul(Tensor(np.eye(3)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_matmul_all_ones():
    out = nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))


def test_matmul_grad_is_ones_times_b_transpose():
    rng = np.random.default_rng(0)
    a, b = param(rng.normal(size=(3, 4)), "a"), param(rng.normal(size=(4, 2)), "b")
    nc.backward(nc.sum_all(nc.matmul(a, b)))
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=1e-12)

    def f():
        return nc.sum_all(nc.matmul(a, b))

    numeric = nc.numerical_grad(f, a, h=1e-6)
    np.testing.assert_allclose(a.grad, numeric, atol=1e-8)


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_batched_matmul_gradcheck():
    rng = np.random.default_rng(1)
    a, b = param(rng.normal(size=(2, 3, 4)), "a"), param(rng.normal(size=(2, 4, 5)), "b")
    rep = nc.gradcheck(lambda: nc.sum_all(nc.square(nc.matmul(a, b))), [a, b])
    assert max(rep.values()) < 1e-6


# ---------------------------------------------------------------------------
# softmax and layer norm
# ---------------------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(nc.softmax_lastdim(Tensor(np.zeros(3))).data, np.full(3, 1 / 3), atol=1e-15)


def test_softmax_large_logits_do_not_overflow():
    out = nc.softmax_lastdim(Tensor(np.array([1000.0, 0.0]))).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0) and out[1] < 1e-300


def test_softmax_matches_direct_sum():
    x = np.random.default_rng(2).normal(size=4)
    direct = np.exp(x) / np.exp(x).sum()
    np.testing.assert_allclose(nc.softmax_lastdim(Tensor(x)).data, direct, atol=1e-12)


def test_softmax_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        nc.softmax_lastdim(Tensor(np.array([np.nan, 1.0])))


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    out = nc.softmax_lastdim(Tensor(x)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_layer_norm_constant_slice_is_zero():
    out = nc.layer_norm(Tensor(np.full((1, 4), 5.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_unit_slice_is_unchanged():
    out = nc.layer_norm(Tensor(np.array([[1.0, -1.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-5)


def test_layer_norm_gradcheck():
    rng = np.random.default_rng(3)
    x = param(rng.normal(size=(3, 5)), "x")
    g, b = param(1 + 0.3 * rng.normal(size=5), "g"), param(rng.normal(size=5), "b")
    weights = Tensor(rng.normal(size=(3, 5)))
    rep = nc.gradcheck(lambda: nc.sum_all(nc.mul(nc.layer_norm(x, g, b), weights)), [x, g, b])
    assert max(rep.values()) < 1e-6


@given(arrays(np.float64, (3, 6), elements=st.floats(-20, 20)))
def test_layer_norm_output_is_standardised(x):
    out = nc.layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
    var = x.var(axis=-1)
    expected = var / (var + 1e-5)
    np.testing.assert_allclose(out.var(axis=-1), expected, atol=1e-9)


# ---------------------------------------------------------------------------
# elementwise ops and shape algebra
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("op", [nc.add, nc.sub, nc.mul])
def test_elementwise_ops_refuse_broadcasting(op):
    with pytest.raises(ShapeError):
        op(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_add_bias_broadcasts_over_trailing_axis():
    out = nc.add_bias(Tensor(np.zeros((2, 3))), Tensor(np.array([1.0, 2.0, 3.0])))
    np.testing.assert_array_equal(out.data, [[1, 2, 3], [1, 2, 3]])
    with pytest.raises(ShapeError):
        nc.add_bias(Tensor(np.zeros((2, 3))), Tensor(np.ones(2)))


def test_gelu_tanh_form():
    x = np.linspace(-4, 4, 17)
    expected = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(nc.gelu(Tensor(x)).data, expected, atol=1e-14)


def test_shape_ops_gradcheck():
    rng = np.random.default_rng(4)
    x = param(rng.normal(size=(2, 3, 4)), "x")
    y = param(rng.normal(size=(2, 3, 4)), "y")
    fill = param(rng.normal(size=4), "fill")
    mask = rng.random((2, 3)) < 0.5
    idx = np.array([[2, 0], [1, 1]])
    proj = Tensor(rng.normal(size=(2, 2, 8)))

    def f():
        a = nc.transpose(nc.roll(x, (1, -1), (1, 2)), (0, 2, 1))
        a = nc.reshape(a, (2, 3, 4))
        b = nc.masked_select(nc.add(a, y), fill, mask)
        c = nc.concat([nc.gather_rows(b, idx), nc.gather_rows(nc.gelu(y), idx)], axis=2)
        return nc.sum_all(nc.mul(c, proj))

    assert max(nc.gradcheck(f, [x, y, fill]).values()) < 1e-6


def test_sum_axis_and_broadcast_rows():
    rng = np.random.default_rng(5)
    v = param(rng.normal(size=3), "v")
    out = nc.broadcast_rows(v, (2, 4))
    assert out.shape == (2, 4, 3)
    nc.backward(nc.sum_all(nc.sum_axis(out, 1)))
    np.testing.assert_array_equal(v.grad, np.full(3, 8.0))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    p = param(np.random.default_rng(6).normal(size=(3, 2)))
    nc.backward(nc.sum_all(p))
    np.testing.assert_array_equal(p.grad, np.ones((3, 2)))


def test_backward_quadratic_gives_identity():
    p = param(np.random.default_rng(7).normal(size=5))
    nc.backward(nc.scale(nc.sum_all(nc.mul(p, p)), 0.5))
    np.testing.assert_allclose(p.grad, p.data, rtol=1e-15)


def test_backward_accumulates_until_zero_grad():
    p = param(np.ones(3))
    nc.backward(nc.sum_all(p))
    nc.backward(nc.sum_all(p))
    np.testing.assert_array_equal(p.grad, np.full(3, 2.0))
    nc.zero_grad([p])
    nc.backward(nc.sum_all(p))
    np.testing.assert_array_equal(p.grad, np.ones(3))


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        nc.backward(nc.scale(param(np.ones(2)), 2.0))


def test_shared_subexpression_gradient():
    p = param(np.array([2.0]))
    q = nc.mul(p, p)
    nc.backward(nc.sum_all(nc.add(q, q)))  # 2 p^2 -> 4 p
    np.testing.assert_allclose(p.grad, [8.0])


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

def test_adamw_zero_grad_zero_decay_is_noop():
    p = param(np.array([1.5, -2.0]))
    p.grad = np.zeros(2)
    nc.adamw_step([p], nc.OptimConfig(learning_rate=0.1, weight_decay=0.0))
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_adamw_first_step_hand_value():
    p = param(np.array([1.0]))
    p.grad = np.array([1.0])
    cfg = nc.OptimConfig(learning_rate=0.1, weight_decay=0.0)
    nc.adamw_step([p], cfg)
    # m_hat = v_hat = 1 at step 1, so the move is lr / (1 + eps)
    assert p.data[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
    assert cfg.step_count == 1


def test_adamw_decay_is_decoupled():
    p = param(np.array([2.0]))
    p.grad = np.array([0.0])
    nc.adamw_step([p], nc.OptimConfig(learning_rate=0.1, weight_decay=0.5))
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5), abs=1e-15)


def test_adamw_converges_on_quadratic():
    p = param(np.array([0.0]))
    cfg = nc.OptimConfig(learning_rate=0.1, weight_decay=0.0)
    for _ in range(200):
        nc.zero_grad([p])
        d = nc.add_bias(p, Tensor(np.array([-3.0])))
        nc.backward(nc.sum_all(nc.square(d)))
        nc.adamw_step([p], cfg)
    assert abs(p.data[0] - 3.0) < 0.1


@pytest.mark.parametrize("kw", [dict(learning_rate=0.0), dict(beta1=1.0), dict(beta2=-0.1),
                                dict(epsilon=0.0), dict(weight_decay=-1.0)])
def test_optim_config_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        nc.OptimConfig(**kw)


def test_adamw_determinism():
    def run():
        rng = np.random.default_rng(9)
        p = param(rng.normal(size=(4, 4)))
        cfg = nc.OptimConfig()
        for _ in range(10):
            nc.zero_grad([p])
            nc.backward(nc.sum_all(nc.square(nc.matmul(p, p))))
            nc.adamw_step([p], cfg)
        return p.data.tobytes()

    assert run() == run()


# ---------------------------------------------------------------------------
# init and checkpoints
# ---------------------------------------------------------------------------

def test_trunc_normal_bounds():
    w = nc.trunc_normal(np.random.default_rng(0), (200, 50), std=0.02)
    assert np.abs(w).max() <= 0.04
    assert w.std() == pytest.approx(0.02 * 0.88, rel=0.05)  # truncation at 2 sigma shrinks std to ~0.88


def test_checkpoint_layout_by_hand(tmp_path):
    p = Parameter(np.array([[1.0, 2.0, 3.0]]), "w")
    path = tmp_path / "a.ckpt"
    nc.save_checkpoint(path, [p], include_moments=False)
    blob = path.read_bytes()
    expected = (b"AMCK" + struct.pack("<II", 1, 1) + struct.pack("<H", 1) + b"w"
                + struct.pack("<B", 2) + struct.pack("<II", 1, 3) + struct.pack("<3d", 1, 2, 3)
                + b"\x00")
    assert blob == expected


def test_checkpoint_round_trip_with_moments(tmp_path):
    rng = np.random.default_rng(10)
    ps = [Parameter(rng.normal(size=(2, 3)), "a.w"), Parameter(rng.normal(size=4), "a.b")]
    for p in ps:
        p.first_moment = rng.normal(size=p.shape)
        p.second_moment = rng.random(p.shape)
    path = tmp_path / "m.ckpt"
    nc.save_checkpoint(path, ps, include_moments=True)
    fresh = [Parameter(np.zeros((2, 3)), "a.w"), Parameter(np.zeros(4), "a.b")]
    nc.load_checkpoint(path, fresh)
    for a, b in zip(ps, fresh):
        assert a.data.tobytes() == b.data.tobytes()
        assert a.first_moment.tobytes() == b.first_moment.tobytes()
        assert a.second_moment.tobytes() == b.second_moment.tobytes()


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "x.ckpt"
    nc.save_checkpoint(path, [Parameter(np.zeros(3), "w")], include_moments=False)
    with pytest.raises(nc.CheckpointError):
        nc.load_checkpoint(path, [Parameter(np.zeros(4), "w")])
    with pytest.raises(nc.CheckpointError):
        nc.load_checkpoint(path, [Parameter(np.zeros(3), "v")])
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(nc.CheckpointError):
        nc.read_checkpoint(bad)
    bad.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(nc.CheckpointError):
        nc.read_checkpoint(bad)


# ---------------------------------------------------------------------------
# gradcheck helpers
# ---------------------------------------------------------------------------

def test_relative_error_floor_hides_fd_noise_only():
    assert nc.relative_error(np.zeros(3), np.full(3, 1e-10)) < 1e-4
    assert nc.relative_error(np.ones(3), np.ones(3) * 1.01) > 1e-3


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-2, 2)))
def test_gradcheck_composite_property(x0):
    x = param(x0.copy(), "x")
    w = param(np.arange(12.0).reshape(3, 4) / 10, "w")
    rep = nc.gradcheck(lambda: nc.sum_all(nc.gelu(nc.linear(x, w))), [x, w])
    assert max(rep.values()) < 1e-6
