import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corrpost import tensornet as tn
from corrpost.classifier import build_model
from corrpost.errors import (FormatError, InputError, ModelStateError, ShapeError, StateError,
                             TrainingDivergenceError)

from gradcheck import CENTRAL, layer_errors, micro_net_error, numeric_grad, rel_error


def T(x, grad=False):
    return tn.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def block_params(in_ch, width, proj):
    n = 9 * in_ch * width + 2 * width + 9 * width * width + 2 * width
    return n + (in_ch * width + 2 * width if proj else 0)


def expected_params(w, n_stages=4, blocks_per_stage=2):
    """Layer-by-layer trainable scalar count for the residual network."""
    n = 2 + 9 * w + 2 * w
    in_ch = w
    for s in range(n_stages):
        width = w * 2 ** s
        for b in range(blocks_per_stage):
            n += block_params(in_ch, width, in_ch != width)
            in_ch = width
    return n + in_ch + 1


# --- convolution ------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.random.default_rng(0).random((1, 1, 4, 4))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(tn.conv2d(T(x), T(w)).data, x)


def test_conv_ones_hand_sums():
    out = tn.conv2d(T(np.ones((1, 1, 3, 3))), T(np.ones((1, 1, 3, 3)))).data[0, 0]
    np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_stride_and_shape_errors():
    assert tn.conv2d(T(np.ones((1, 1, 8, 8))), T(np.ones((2, 1, 3, 3))), 2).shape == (1, 2, 4, 4)
    assert tn.conv2d(T(np.ones((1, 3, 8, 8))), T(np.ones((2, 3, 1, 1))), 2).shape == (1, 2, 4, 4)
    with pytest.raises(ShapeError):
        tn.conv2d(T(np.ones((1, 2, 4, 4))), T(np.ones((1, 3, 3, 3))))


def conv_oracle(x, w, stride):
    """Direct loop convolution with zero padding."""
    n, c, h, wd = x.shape
    k = w.shape[-1]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, w.shape[0], h // stride, wd // stride))
    for i in range(out.shape[2]):
        for j in range(out.shape[3]):
            win = xp[:, :, i * stride:i * stride + k, j * stride:j * stride + k]
            out[:, :, i, j] = np.einsum("nchw,kchw->nk", win, w)
    return out


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from([1, 2]), st.sampled_from([1, 3]))
def test_conv_matches_loop_oracle(seed, stride, k):
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, k, k))
    np.testing.assert_allclose(tn.conv2d(T(x), T(w), stride).data, conv_oracle(x, w, stride),
                               atol=1e-10)


# --- batch norm ---------------------------------------------------------------

def bn_state(c):
    return tn.BNState(np.zeros(c), np.ones(c))


def test_bn_constant_channels_give_zero():
    x = np.ones((4, 2, 3, 3)) * np.array([3.0, -1.0])[None, :, None, None]
    out = tn.batchnorm(T(x), T(np.ones(2)), T(np.zeros(2)), bn_state(2), True)
    assert not out.data.any()


def test_bn_train_output_moments():
    x = np.random.default_rng(1).normal(3, 5, size=(8, 3, 4, 4))
    out = tn.batchnorm(T(x), T(np.ones(3)), T(np.zeros(3)), bn_state(3), True).data
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-6
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-4


def test_bn_infer_affine():
    x = np.random.default_rng(2).normal(size=(2, 1, 3, 3))
    out = tn.batchnorm(T(x), T([2.0]), T([3.0]), bn_state(1), False).data
    np.testing.assert_allclose(out, 2 * x / np.sqrt(1 + tn.BN_EPS) + 3)


def test_bn_running_stats_momentum():
    x = np.random.default_rng(3).normal(2, 3, size=(4, 1, 2, 2))
    st_ = bn_state(1)
    tn.batchnorm(T(x), T([1.0]), T([0.0]), st_, True)
    assert st_.mean[0] == pytest.approx(0.1 * x.mean())
    assert st_.var[0] == pytest.approx(0.9 + 0.1 * x.var())


def test_bn_pooled_mode_gives_population_moments():
    rng = np.random.default_rng(4)
    batches = [rng.normal(1, 2, size=(n, 2, 3, 3)) for n in (5, 2, 7)]
    st_ = bn_state(2)
    st_.pooled = 0
    for b in batches:
        tn.batchnorm(T(b), T(np.ones(2)), T(np.zeros(2)), st_, True)
    st_.finish_average()
    allx = np.concatenate(batches)
    np.testing.assert_allclose(st_.mean, allx.mean(axis=(0, 2, 3)), rtol=1e-12)
    np.testing.assert_allclose(st_.var, allx.var(axis=(0, 2, 3)), rtol=1e-10)
    assert st_.pooled is None


def test_bn_degenerate_batch_and_missing_stats():
    with pytest.raises(InputError):
        tn.batchnorm(T(np.ones((1, 1, 1, 1))), T([1.0]), T([0.0]), bn_state(1), True)
    bad = tn.BNState(np.array([np.nan]), np.ones(1))
    with pytest.raises(ModelStateError):
        tn.batchnorm(T(np.ones((2, 1, 2, 2))), T([1.0]), T([0.0]), bad, False)


# --- activations, pooling, head, loss -----------------------------------------

def test_swish_values_and_derivative():
    assert tn.swish(T(0.0)).data == 0.0
    assert tn.swish(T(10.0)).data == pytest.approx(10 / (1 + np.exp(-10)), rel=1e-12)
    assert float(tn.swish(T(10.0)).data) == pytest.approx(9.999546, abs=1e-6)
    x = T(0.0, grad=True)
    tn.swish(x).backward()
    assert x.grad == pytest.approx(0.5)


def test_swish_of_scaled_input_chain():
    x = T(np.ones((1, 1, 1, 1)), grad=True)
    w = T(np.full((1, 1, 1, 1), 3.0))
    tn.backward(tn.swish(tn.conv2d(x, w)))
    f = lambda: float(tn.swish(tn.conv2d(T(xd), w)).data.sum())
    xd = np.ones((1, 1, 1, 1))
    num = numeric_grad(f, xd, h=1e-4, stencil=CENTRAL)
    assert rel_error(x.grad, num) < 1e-6


def test_swish_is_stable_for_large_inputs():
    out = tn.swish(T([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(out)) and out[0] == pytest.approx(0.0) and out[1] == 1000.0


def test_global_avg_pool():
    assert tn.global_avg_pool(T(np.full((1, 1, 3, 3), 2.5))).data[0, 0] == 2.5
    assert tn.global_avg_pool(T([[[[1, 2], [3, 4]]]])).data[0, 0] == 2.5
    x = np.random.default_rng(5).random((2, 3, 4, 4))
    np.testing.assert_allclose(tn.global_avg_pool(T(x)).data, x.mean(axis=(2, 3)), atol=1e-12)


def test_dense_sigmoid():
    x = np.random.default_rng(6).normal(size=(3, 4))
    assert np.all(tn.dense_sigmoid(T(x), T(np.zeros(4)), T(0.0)).data == 0.5)
    low = tn.dense_sigmoid(T([[1.0]]), T([-1e4]), T(0.0)).data
    assert np.isfinite(low).all() and low[0] < 1e-300 + 1e-12
    w, b = np.random.default_rng(7).normal(size=4), 0.3
    np.testing.assert_allclose(tn.dense_sigmoid(T(x), T(w), T(b)).data,
                               1 / (1 + np.exp(-(x @ w + b))), rtol=1e-12)
    with pytest.raises(ShapeError):
        tn.dense_sigmoid(T(x), T(np.zeros(3)), T(0.0))


def test_bce_examples():
    assert tn.bce_loss(T([0.5]), [1.0]).data == pytest.approx(np.log(2))
    assert tn.bce_loss(T([1.0, 0.0]), [1.0, 0.0]).data < 1e-6
    w = T([3.0, 4.0], grad=True)
    base = tn.bce_loss(T([0.5]), [1.0]).data
    assert tn.bce_loss(T([0.5]), [1.0], [w], l2=0.005).data - base == pytest.approx(0.125)


def test_bce_clamped_path_has_zero_gradient():
    p = T([1.0, 0.0], grad=True)
    tn.bce_loss(p, [1.0, 0.0]).backward()
    assert not p.grad.any()


# --- autodiff plumbing ----------------------------------------------------------

def test_backward_needs_graph():
    with pytest.raises(StateError):
        tn.backward(T(1.0))
    x = T([1.0, 2.0], grad=True)
    y = tn.swish(x)
    tn.backward(y, grad=np.ones(2))
    with pytest.raises(StateError):
        tn.backward(y, grad=np.ones(2))


def test_backward_seed_shape_checked():
    y = tn.swish(T([1.0, 2.0], grad=True))
    with pytest.raises(ShapeError):
        tn.backward(y, grad=np.ones(3))


def test_no_grad_records_nothing():
    x = T([1.0], grad=True)
    with tn.no_grad():
        y = tn.swish(x)
    assert not y.requires_grad
    with pytest.raises(StateError):
        y.backward()


def test_gradients_accumulate_over_shared_inputs():
    x = T([0.3, -0.7], grad=True)
    tn.backward(tn.add(tn.swish(x), tn.swish(x)), grad=np.ones(2))
    s = 1 / (1 + np.exp(-x.data))
    np.testing.assert_allclose(x.grad, 2 * (s + x.data * s * (1 - s)), rtol=1e-12)


def test_backward_is_deterministic():
    grads = []
    for _ in range(2):
        m = build_model(2, seed=3, dtype=np.float64, n_stages=2, blocks_per_stage=1, input_size=8)
        x = np.random.default_rng(0).random((4, 1, 8, 8))
        tn.bce_loss(m.forward(x, train=True), [1, 0, 1, 0], m.params.decay_tensors(), 0.005).backward()
        grads.append(np.concatenate([t.grad.ravel() for _, t in m.params.items()]))
    assert grads[0].tobytes() == grads[1].tobytes()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_layer_gradients_full(seed):
    errors = layer_errors(seed)
    assert max(errors.values()) < 1e-4, errors


@pytest.mark.parametrize("seed", [0, 1])
def test_micro_net_gradients_full(seed):
    assert micro_net_error(seed) < 1e-4


# --- residual block ---------------------------------------------------------------

def test_zero_weight_block_passes_swish_of_input():
    rng = np.random.default_rng(8)
    p = tn.ModelParams(np.float64)
    tn.init_residual_block(p, "b", 3, 3, 1, rng)
    for k in ("b.conv1", "b.conv2"):
        p[k].data[:] = 0
    x = rng.normal(size=(2, 3, 4, 4))
    out = tn.residual_block(T(x), p, "b", 1, train=True).data
    np.testing.assert_allclose(out, tn.swish(T(x)).data, atol=1e-12)


def test_block_shapes_and_errors():
    rng = np.random.default_rng(9)
    p = tn.ModelParams(np.float64)
    tn.init_residual_block(p, "b", 3, 5, 2, rng)
    assert tn.residual_block(T(rng.random((1, 3, 8, 8))), p, "b", 2, True).shape == (1, 5, 4, 4)
    with pytest.raises(ShapeError):
        tn.residual_block(T(rng.random((1, 4, 8, 8))), p, "b", 2, True)
    q = tn.ModelParams(np.float64)
    tn.init_residual_block(q, "b", 3, 3, 1, rng)
    with pytest.raises(ShapeError):
        tn.residual_block(T(rng.random((2, 3, 8, 8))), q, "b", 2, True)


# --- parameter counts -------------------------------------------------------------

def test_dense_layer_count():
    p = tn.ModelParams()
    p.add("w", np.zeros(4), decay=True)
    p.add("b", np.zeros(()))
    assert tn.param_count(p) == 5


@pytest.mark.parametrize("w,stages,blocks", [(2, 2, 1), (3, 4, 2), (21, 4, 2)])
def test_param_count_matches_formula(w, stages, blocks):
    m = build_model(w, n_stages=stages, blocks_per_stage=blocks)
    assert tn.param_count(m.params) == expected_params(w, stages, blocks)


def test_doubling_widths_quadruples_conv_count():
    def conv_count(w):
        return sum(t.size for k, t in build_model(w).params.items() if t.data.ndim == 4)
    ratio = conv_count(42) / conv_count(21)
    assert ratio == pytest.approx(4.0, rel=0.01)


# --- optimizers -----------------------------------------------------------------

def test_sgd_step():
    t = T([1.0], grad=True)
    t.grad = np.array([2.0])
    tn.SGD(lr=0.1).step([("t", t)])
    assert t.data[0] == pytest.approx(0.8)
    t.grad = np.array([0.0])
    tn.SGD(lr=0.1).step([("t", t)])
    assert t.data[0] == pytest.approx(0.8)


def test_sgd_momentum():
    t = T([0.0], grad=True)
    opt = tn.SGD(lr=1.0, momentum=0.5)
    for _ in range(2):
        t.grad = np.array([1.0])
        opt.step([("t", t)])
    assert t.data[0] == pytest.approx(-(1 + 1.5))


def test_adam_first_step_formula():
    g = np.array([0.3, -2.0, 1e-6])
    t = T([1.0, 1.0, 1.0], grad=True)
    t.grad = g.copy()
    tn.Adam(lr=1e-3).step([("t", t)])
    m_hat, v_hat = g, g * g  # bias correction cancels on step 1
    np.testing.assert_allclose(t.data, 1 - 1e-3 * m_hat / (np.sqrt(v_hat) + 1e-8), rtol=1e-12)


def test_adam_second_step_bias_correction():
    t = T([0.0], grad=True)
    opt = tn.Adam(lr=0.1)
    gs = [1.0, 3.0]
    for g in gs:
        t.grad = np.array([g])
        opt.step([("t", t)])
    m1, v1 = 0.1 * 1.0, 0.001 * 1.0
    m2, v2 = 0.9 * m1 + 0.1 * 3.0, 0.999 * v1 + 0.001 * 9.0
    step2 = 0.1 * (m2 / (1 - 0.81)) / (np.sqrt(v2 / (1 - 0.999 ** 2)) + 1e-8)
    step1 = 0.1 * 1.0 / (1.0 + 1e-8)
    assert t.data[0] == pytest.approx(-step1 - step2, rel=1e-12)


@pytest.mark.parametrize("opt", [tn.SGD(0.1), tn.Adam()])
def test_non_finite_gradient_diverges(opt):
    t = T([1.0], grad=True)
    t.grad = np.array([np.nan])
    with pytest.raises(TrainingDivergenceError):
        opt.step([("t", t)])
    assert t.data[0] == 1.0


# --- checkpoints ------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    m = build_model(3, seed=1, n_stages=2, blocks_per_stage=1)
    path = tmp_path / "m.cnnw"
    tn.save_checkpoint(path, m.params, m.architecture())
    back = tn.load_checkpoint(path)
    arrays = m.params.state_arrays()
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].dtype == np.float32
        np.testing.assert_array_equal(back[k], arrays[k])
    assert (tmp_path / "m.cnnw.json").exists()


def test_checkpoint_corruption(tmp_path):
    m = build_model(2, n_stages=1, blocks_per_stage=1)
    path = tmp_path / "m.cnnw"
    tn.save_checkpoint(path, m.params)
    raw = path.read_bytes()
    for bad in (b"NOPE" + raw[4:], raw[:-3], raw + b"\0", raw[:5]):
        path.write_bytes(bad)
        with pytest.raises(FormatError):
            tn.load_checkpoint(path)
