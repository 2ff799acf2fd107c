import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from speech2c.autodiff import (
    AdamState, Tensor, adam_step, conv1d, cosine_sim, cross_entropy, gelu, layer_norm,
    log_softmax, logsumexp, matmul, parameter, softmax, tsum,
)
from speech2c.autodiff.gradcheck import check_entrywise, rel_err
from speech2c.errors import ContractError, DimensionError, InputTooShortError


def rng(seed=0):
    return np.random.default_rng(seed)


# -- matmul -------------------------------------------------------------------
def test_matmul_identity():
    out = matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_projector():
    out = matmul(Tensor([[1, 0], [0, 0]]), Tensor([[5, 6], [7, 8]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@pytest.mark.parametrize("seed", range(5))
def test_matmul_gradcheck(seed):
    r = rng(seed)
    a, b = parameter(r.standard_normal((3, 4))), parameter(r.standard_normal((4, 2)))
    w = r.standard_normal((3, 2))
    errs = check_entrywise(lambda: tsum(matmul(a, b) * w), {"a": a, "b": b})
    assert max(errs.values()) < 1e-6


# -- softmax ------------------------------------------------------------------
def test_softmax_uniform_and_stable():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0, 0]), 0.1).data, [1 / 3] * 3, atol=1e-15)
    out = softmax(Tensor([1000.0, 0.0]), 1.0).data
    assert np.all(np.isfinite(out))
    assert abs(out[0] - 1) < 1e-12 and out[1] < 1e-12


def test_softmax_temperature_direct_formula():
    out = softmax(Tensor([0.5, -0.5]), 0.1).data
    e1, e2 = math.exp(5.0), math.exp(-5.0)
    np.testing.assert_allclose(out, [e1 / (e1 + e2), e2 / (e1 + e2)], rtol=1e-14)


def test_softmax_rejects_nonpositive_temperature():
    with pytest.raises(ValueError):
        softmax(Tensor([1.0]), 0.0)


def test_softmax_fully_masked_row_is_zero():
    out = softmax(Tensor([[1.0, 2.0], [3.0, 4.0]]), mask=np.array([[True, False], [False, False]]))
    np.testing.assert_array_equal(out.data, [[1.0, 0.0], [0.0, 0.0]])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e6, 1e6)),
       st.floats(1e-3, 1e3))
def test_softmax_sums_to_one(x, tau):
    assert abs(softmax(Tensor(x), tau).data.sum() - 1.0) < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_softmax_gradcheck(seed):
    r = rng(seed)
    x = parameter(r.standard_normal((3, 5)))
    w = r.standard_normal((3, 5))
    mask = r.random((3, 5)) > 0.3
    mask[:, 0] = True
    errs = check_entrywise(lambda: tsum(softmax(x, 0.7, mask) * w), {"x": x})
    assert errs["x"] < 1e-6


# -- layer norm -------------------------------------------------------------------
def test_layer_norm_constant_vector_gives_zeros():
    out = layer_norm(Tensor([3.0, 3.0, 3.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-5)
    np.testing.assert_array_equal(out.data, [0, 0, 0])


def test_layer_norm_already_normalized():
    out = layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-14)
    np.testing.assert_allclose(out.data, [1, -1], atol=1e-12)


def test_layer_norm_dim_mismatch():
    with pytest.raises(DimensionError):
        layer_norm(Tensor(np.ones(3)), Tensor(np.ones(2)), Tensor(np.zeros(2)))


@pytest.mark.parametrize("seed", range(3))
def test_layer_norm_gradcheck(seed):
    r = rng(seed)
    x, g, b = (parameter(r.standard_normal(s)) for s in [(4, 6), (6,), (6,)])
    w = r.standard_normal((4, 6))
    errs = check_entrywise(lambda: tsum(layer_norm(x, g, b, 1e-5) * w), {"x": x, "g": g, "b": b})
    assert max(errs.values()) < 1e-5


# -- conv1d -------------------------------------------------------------------
def naive_conv(x, k, stride):
    t_in, c_in = x.shape
    c_out, _, width = k.shape
    t_out = (t_in - width) // stride + 1
    out = np.zeros((t_out, c_out))
    for t in range(t_out):
        for o in range(c_out):
            acc = 0.0
            for c in range(c_in):
                for j in range(width):
                    acc += x[t * stride + j, c] * k[o, c, j]
            out[t, o] = acc
    return out


def test_conv1d_subsampling_identity():
    out = conv1d(Tensor([[1.0], [2], [3], [4]]), Tensor([[[1.0]]]), 2)
    np.testing.assert_array_equal(out.data, [[1], [3]])


def test_conv1d_single_frame():
    out = conv1d(Tensor(np.ones((10, 1))), Tensor(np.ones((1, 1, 10))), 5)
    assert out.shape == (1, 1)


def test_conv1d_too_short():
    with pytest.raises(InputTooShortError):
        conv1d(Tensor(np.ones((3, 1))), Tensor(np.ones((1, 1, 4))), 1)


@pytest.mark.parametrize("seed,stride", [(0, 1), (1, 2), (2, 3), (3, 5)])
def test_conv1d_matches_naive_oracle(seed, stride):
    r = rng(seed)
    # integer-valued inputs make both summation orders exact
    x = r.integers(-5, 6, size=(23, 3)).astype(float)
    k = r.integers(-5, 6, size=(4, 3, 3)).astype(float)
    np.testing.assert_array_equal(conv1d(Tensor(x), Tensor(k), stride).data, naive_conv(x, k, stride))


@pytest.mark.parametrize("seed", range(3))
def test_conv1d_gradcheck(seed):
    r = rng(seed)
    x, k = parameter(r.standard_normal((17, 2))), parameter(r.standard_normal((3, 2, 4)))
    out_shape = conv1d(x, k, 3).shape
    w = r.standard_normal(out_shape)
    errs = check_entrywise(lambda: tsum(conv1d(x, k, 3) * w), {"x": x, "k": k})
    assert max(errs.values()) < 1e-6


# -- cosine -------------------------------------------------------------------
def test_cosine_cases():
    assert cosine_sim(Tensor([3.0, 4.0]), Tensor([3.0, 4.0])).item() == pytest.approx(1.0, abs=1e-15)
    assert cosine_sim(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0
    assert cosine_sim(Tensor([0.0, 0.0]), Tensor([1.0, 0.0])).item() == 0.0


@pytest.mark.parametrize("seed", range(3))
def test_cosine_gradcheck(seed):
    r = rng(seed)
    a, b = parameter(r.standard_normal(5)), parameter(r.standard_normal(5))
    errs = check_entrywise(lambda: cosine_sim(a, b), {"a": a, "b": b})
    assert max(errs.values()) < 1e-5


# -- cross entropy ---------------------------------------------------------------
def test_cross_entropy_uniform():
    lp = Tensor(np.log(np.full((1, 4), 0.25)))
    assert cross_entropy(lp, [2]).item() == pytest.approx(math.log(4), abs=1e-15)


def test_cross_entropy_all_ignored():
    lp = parameter(np.log(np.full((3, 4), 0.25)))
    loss = cross_entropy(lp, [-1, -1, -1], ignore_index=-1)
    assert loss.item() == 0.0
    loss.backward()
    np.testing.assert_array_equal(lp.grad, np.zeros((3, 4)))


def test_cross_entropy_direct_sum():
    r = rng(3)
    raw = r.standard_normal((3, 5))
    lp = raw - np.log(np.exp(raw).sum(axis=1, keepdims=True))
    tgt = [4, 0, 2]
    expected = -(lp[0, 4] + lp[1, 0] + lp[2, 2]) / 3
    assert cross_entropy(Tensor(lp), tgt).item() == pytest.approx(expected, rel=1e-14)


def test_cross_entropy_bad_target_reports_position():
    with pytest.raises(IndexError, match="position 1"):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_cross_entropy_ignores_ignored_rows(seed):
    r = np.random.default_rng(seed)
    base = r.standard_normal((6, 4))
    tgt = r.integers(0, 4, 6)
    tgt[r.random(6) < 0.5] = -100
    results = []
    for perturb in (False, True):
        data = base.copy()
        if perturb:
            data[tgt == -100] += r.standard_normal(data[tgt == -100].shape)
        lp = parameter(data)
        loss = cross_entropy(log_softmax(lp), tgt, ignore_index=-100)
        loss.backward()
        results.append((loss.item(), lp.grad.copy()))
    assert results[0][0] == results[1][0]
    kept = tgt != -100
    np.testing.assert_array_equal(results[0][1][kept], results[1][1][kept])
    np.testing.assert_array_equal(results[1][1][~kept], 0.0)


# -- misc ops -------------------------------------------------------------------
@pytest.mark.parametrize("seed", range(3))
def test_gelu_logsoftmax_logsumexp_gradcheck(seed):
    r = rng(seed)
    x = parameter(r.standard_normal((3, 4)))
    w = r.standard_normal((3, 4))
    assert check_entrywise(lambda: tsum(gelu(x) * w), {"x": x})["x"] < 1e-6
    assert check_entrywise(lambda: tsum(log_softmax(x) * w), {"x": x})["x"] < 1e-6
    assert check_entrywise(lambda: tsum(logsumexp(x, 0) * w[0, :]), {"x": x})["x"] < 1e-6


def test_logsumexp_all_neg_inf_is_safe():
    x = parameter([[-np.inf, -np.inf], [0.0, -np.inf]])
    out = logsumexp(x, -1)
    assert out.data[0] == -np.inf and out.data[1] == 0.0
    tsum(out[1:]).backward()
    np.testing.assert_array_equal(x.grad, [[0, 0], [1, 0]])


# -- backward -------------------------------------------------------------------
def test_backward_sum_gives_ones():
    w = parameter(np.arange(6.0).reshape(2, 3))
    tsum(w).backward()
    np.testing.assert_array_equal(w.grad, np.ones((2, 3)))


def test_backward_square():
    w = parameter([1.0, 2.0])
    tsum(w * w).backward()
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])


def test_backward_shared_subexpression_accumulates():
    w = parameter([3.0])
    y = w * w
    tsum(y + y + w).backward()
    np.testing.assert_array_equal(w.grad, [13.0])


def test_backward_twice_is_error():
    w = parameter([1.0])
    loss = tsum(w * 2)
    loss.backward()
    with pytest.raises(ContractError):
        loss.backward()


def test_backward_requires_scalar():
    w = parameter([1.0, 2.0])
    with pytest.raises(ContractError):
        (w * 2).backward()


def test_backward_deterministic():
    def run():
        r = rng(7)
        a, b = parameter(r.standard_normal((4, 4))), parameter(r.standard_normal((4,)))
        tsum(log_softmax(gelu(a @ a) + b) * a).backward()
        return a.grad.tobytes(), b.grad.tobytes()

    assert run() == run()


# -- adam -------------------------------------------------------------------
def test_adam_zero_grad_no_change():
    p = {"w": parameter([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), 0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    # m1 = (1-b1), v1 = (1-b2); bias-corrected both are 1 -> delta = -lr / (1 + eps)
    p = {"w": parameter([0.5])}
    state = AdamState()
    adam_step(p, {"w": np.ones(1)}, state, 0.01)
    assert abs((p["w"].data[0] - 0.5) - (-0.01)) < 1e-9
    assert state.step == 1


def test_adam_decreases_quadratic():
    p = {"w": parameter([2.0])}
    state = AdamState()
    losses = []
    for _ in range(3):
        w = p["w"]
        w.grad = None
        loss = tsum(w * w) * 0.5
        losses.append(loss.item())
        loss.backward()
        adam_step(p, {"w": w.grad}, state, 0.1)
    assert losses[0] > losses[1] > losses[2]


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step({"w": parameter([1.0])}, {"w": np.zeros(2)}, AdamState(), 0.1)


def test_rel_err_helper():
    assert rel_err([1.0, 2.0], [1.0, 2.0]) == 0.0
