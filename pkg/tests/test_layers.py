import numpy as np
import pytest

from plrlab.errors import (
    ConfigError,
    DimensionError,
    DomainError,
    StateError,
)
from plrlab.layers import (
    INFER,
    TRAIN,
    ActivationSpec,
    BatchNormState,
    ConvParams,
    DropoutSpec,
    LinearParams,
    PoolSpec,
    activation_backward,
    activation_forward,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    dropout_backward,
    dropout_forward,
    linear_backward,
    linear_forward,
    pool_backward,
    pool_forward,
    softmax_xent,
)
from plrlab.numerics import SeededRng, finite_diff_grad


def rel_err(a, n):
    a, n = np.ravel(a), np.ravel(n)
    return np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)


# ---------------------------------------------------------------------------
# linear


def test_linear_forward_matches_loops():
    rng = SeededRng(0)
    x = rng.normal((3, 4))
    p = LinearParams(W=rng.normal((5, 4)), b=rng.normal((5,)))
    y, _ = linear_forward(x, p)
    for n in range(3):
        for o in range(5):
            acc = p.b[o]
            for i in range(4):
                acc += x[n, i] * p.W[o, i]
            assert y[n, o] == pytest.approx(acc, abs=1e-12)


def test_linear_backward_matches_finite_diff():
    rng = SeededRng(1)
    x = rng.normal((4, 3))
    p = LinearParams(W=rng.normal((2, 3)), b=rng.normal((2,)))
    proj = rng.normal((4, 2))
    _, cache = linear_forward(x, p)
    dx, dW, db = linear_backward(proj, cache)

    num_dx = finite_diff_grad(lambda t: float((linear_forward(t, p)[0] * proj).sum()), x)
    num_dW = finite_diff_grad(
        lambda t: float((linear_forward(x, LinearParams(t, p.b))[0] * proj).sum()), p.W
    )
    num_db = finite_diff_grad(
        lambda t: float((linear_forward(x, LinearParams(p.W, t))[0] * proj).sum()), p.b
    )
    assert rel_err(dx, num_dx) < 1e-6
    assert rel_err(dW, num_dW) < 1e-6
    assert rel_err(db, num_db) < 1e-6


def test_linear_shape_mismatch():
    p = LinearParams(W=np.ones((2, 3)), b=np.zeros(2))
    with pytest.raises(DimensionError):
        linear_forward(np.ones((4, 5)), p)


# ---------------------------------------------------------------------------
# convolution


def conv_reference(x, kernels, bias, stride, pad):
    """Direct six-loop cross-correlation, the oracle for the im2col path."""
    n, c_in, h, w = x.shape
    c_out, _, kh, kw = kernels.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for b in range(n):
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    acc = bias[o]
                    for c in range(c_in):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (
                                    xp[b, c, i * stride + u, j * stride + v]
                                    * kernels[o, c, u, v]
                                )
                    out[b, o, i, j] = acc
    return out


@pytest.mark.parametrize("stride,pad,kh", [(1, 0, 3), (1, 2, 5), (2, 1, 3), (2, 0, 1)])
def test_conv_forward_matches_reference(stride, pad, kh):
    rng = SeededRng(10 + stride + pad + kh)
    x = rng.normal((2, 3, 6, 6))
    p = ConvParams(
        kernels=rng.normal((4, 3, kh, kh)), bias=rng.normal((4,)), stride=stride, pad=pad
    )
    y, _ = conv2d_forward(x, p)
    ref = conv_reference(x, p.kernels, p.bias, stride, pad)
    assert y.shape == ref.shape
    assert np.allclose(y, ref, atol=1e-10)


def test_conv_backward_matches_finite_diff():
    rng = SeededRng(21)
    x = rng.normal((2, 2, 5, 5))
    p = ConvParams(kernels=rng.normal((3, 2, 3, 3)), bias=rng.normal((3,)), stride=2, pad=1)
    y, cache = conv2d_forward(x, p)
    proj = rng.normal(y.shape)
    dx, dk, db = conv2d_backward(proj, cache)

    def loss_x(t):
        return float((conv2d_forward(t, p)[0] * proj).sum())

    def loss_k(t):
        pp = ConvParams(kernels=t, bias=p.bias, stride=2, pad=1)
        return float((conv2d_forward(x, pp)[0] * proj).sum())

    def loss_b(t):
        pp = ConvParams(kernels=p.kernels, bias=t, stride=2, pad=1)
        return float((conv2d_forward(x, pp)[0] * proj).sum())

    assert rel_err(dx, finite_diff_grad(loss_x, x)) < 1e-6
    assert rel_err(dk, finite_diff_grad(loss_k, p.kernels)) < 1e-6
    assert rel_err(db, finite_diff_grad(loss_b, p.bias)) < 1e-6


def test_conv_rejects_too_small_input():
    p = ConvParams(kernels=np.ones((1, 1, 5, 5)), bias=np.zeros(1), stride=1, pad=0)
    with pytest.raises(DimensionError):
        conv2d_forward(np.ones((1, 1, 3, 3)), p)


def test_conv_rejects_bad_geometry():
    with pytest.raises(ConfigError):
        ConvParams(kernels=np.ones((1, 1, 3, 3)), bias=np.zeros(1), stride=0, pad=0)
    with pytest.raises(ConfigError):
        ConvParams(kernels=np.ones((1, 1, 3, 3)), bias=np.zeros(1), stride=1, pad=-1)


def test_conv_channel_mismatch():
    p = ConvParams(kernels=np.ones((2, 3, 3, 3)), bias=np.zeros(2), stride=1, pad=1)
    with pytest.raises(DimensionError):
        conv2d_forward(np.ones((1, 4, 6, 6)), p)


# ---------------------------------------------------------------------------
# activations


class TestActivationSpec:
    def test_maxout_needs_rank_at_least_two(self):
        with pytest.raises(ConfigError):
            ActivationSpec("maxout", k=1)

    def test_rectifiers_fix_k_to_one(self):
        with pytest.raises(ConfigError):
            ActivationSpec("relu", k=2)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            ActivationSpec("gelu")

    def test_regions_per_unit(self):
        assert ActivationSpec("relu").regions_per_unit == 2
        assert ActivationSpec("maxout", k=5).regions_per_unit == 5

    def test_lrelu_default_slope(self):
        spec = ActivationSpec("lrelu")
        y, _, _ = activation_forward(np.array([[-2.0]]), spec)
        assert y[0, 0] == pytest.approx(-0.02)


def test_relu_values_and_pattern():
    h = np.array([[-1.0, 0.0, 2.0]])
    y, pattern, _ = activation_forward(h, ActivationSpec("relu"))
    assert y.tolist() == [[0.0, 0.0, 2.0]]
    # exactly zero belongs to the inactive side
    assert pattern.tolist() == [[0, 0, 1]]
    assert pattern.dtype == np.int16


def test_relu_gradient_at_zero_uses_negative_side():
    h = np.array([[0.0]])
    for kind, slope in [("relu", 0.0), ("lrelu", 0.01)]:
        _, _, cache = activation_forward(h, ActivationSpec(kind))
        dh, _ = activation_backward(np.array([[1.0]]), cache)
        assert dh[0, 0] == pytest.approx(slope)


def test_maxout_picks_lane_max():
    # 2 units, 3 lanes each
    h = np.array([[1.0, 5.0, 2.0, -3.0, -1.0, -2.0]])
    y, pattern, _ = activation_forward(h, ActivationSpec("maxout", k=3))
    assert y.tolist() == [[5.0, -1.0]]
    assert pattern.tolist() == [[1, 1]]


def test_maxout_tie_goes_to_lowest_lane():
    h = np.array([[4.0, 4.0]])
    y, pattern, cache = activation_forward(h, ActivationSpec("maxout", k=2))
    assert y.tolist() == [[4.0]]
    assert pattern.tolist() == [[0]]
    dh, _ = activation_backward(np.array([[1.0]]), cache)
    assert dh.tolist() == [[1.0, 0.0]]  # all gradient to the winning lane


def test_maxout_backward_routes_to_winner():
    rng = SeededRng(3)
    h = rng.normal((4, 6))
    spec = ActivationSpec("maxout", k=2)
    y, pattern, cache = activation_forward(h, spec)
    dy = rng.normal(y.shape)
    dh, _ = activation_backward(dy, cache)
    lanes = dh.reshape(4, 3, 2)
    for b in range(4):
        for u in range(3):
            win = pattern[b, u]
            assert lanes[b, u, win] == dy[b, u]
            assert lanes[b, u, 1 - win] == 0.0


def test_relu_equals_rank2_maxout_over_zero_and_h():
    """max(0, h) computed as a maxout with lanes (h, 0) agrees with the
    relu kernel everywhere, including the h = 0 tie."""
    rng = SeededRng(4)
    h = rng.normal((5, 7))
    h[0, 0] = 0.0
    relu_y, _, _ = activation_forward(h, ActivationSpec("relu"))
    lanes = np.zeros((5, 14))
    lanes[:, 0::2] = h  # lane 0 = h, lane 1 = 0
    maxout_y, _, _ = activation_forward(lanes, ActivationSpec("maxout", k=2))
    assert np.array_equal(relu_y, maxout_y)


def test_prelu_backward_accumulates_slope_gradient():
    rng = SeededRng(5)
    h = rng.normal((6, 3))
    alpha = np.array([0.1, 0.25, 0.4])
    spec = ActivationSpec("prelu", alpha=alpha)
    y, _, cache = activation_forward(h, spec)
    dy = rng.normal(y.shape)
    _, dalpha = activation_backward(dy, cache)
    # hand accumulation over the negative side
    want = np.zeros(3)
    for b in range(6):
        for u in range(3):
            if h[b, u] <= 0:
                want[u] += dy[b, u] * h[b, u]
    assert np.allclose(dalpha, want, atol=1e-12)


def test_maxout_conv_layout():
    """Channel lanes are consecutive: c*k channels hold k lanes per unit."""
    h = np.zeros((1, 4, 1, 1))
    h[0, :, 0, 0] = [1.0, 3.0, -5.0, -2.0]
    y, pattern, _ = activation_forward(h, ActivationSpec("maxout", k=2))
    assert y[0, :, 0, 0].tolist() == [3.0, -2.0]
    assert pattern[0, :, 0, 0].tolist() == [1, 1]


def test_activation_lane_mismatch():
    with pytest.raises(DimensionError):
        activation_forward(np.ones((2, 5)), ActivationSpec("maxout", k=2))


def test_activation_fast_path_matches():
    rng = SeededRng(6)
    h = rng.normal((3, 8))
    for spec in [ActivationSpec("maxout", k=4), ActivationSpec("relu")]:
        y_full, _, _ = activation_forward(h, spec)
        y_fast, pattern, _ = activation_forward(h, spec, want_pattern=False)
        assert pattern is None
        assert np.array_equal(y_full, y_fast)


# ---------------------------------------------------------------------------
# batch normalisation


def test_bn_standardises_hand_column():
    f = np.array([[1.0], [2.0], [3.0]])
    state = BatchNormState.identity(1, epsilon=1e-12)
    h, _ = batchnorm_forward(f, state, TRAIN, update_running=False)
    # (3 - 2) / sqrt(2/3) = sqrt(3/2)
    assert h[2, 0] == pytest.approx(1.224744871391589, abs=1e-9)
    assert h[1, 0] == pytest.approx(0.0, abs=1e-9)
    assert h[0, 0] == pytest.approx(-1.224744871391589, abs=1e-9)


def test_bn_train_output_moments():
    rng = SeededRng(7)
    f = rng.normal((100, 64)) * 3.0 + 1.5
    gamma = rng.normal((64,)) + 2.0
    beta = rng.normal((64,))
    state = BatchNormState(gamma, beta, np.zeros(64), np.ones(64))
    h, _ = batchnorm_forward(f, state, TRAIN, update_running=False)
    assert np.allclose(h.mean(axis=0), beta, atol=1e-9)
    assert np.allclose(h.std(axis=0), np.abs(gamma), rtol=1e-3)


def test_bn_running_update_rule():
    f = np.array([[0.0], [1.0]])  # batch mean 0.5, population var 0.25
    state = BatchNormState.identity(1, momentum=0.1)
    batchnorm_forward(f, state, TRAIN)
    assert state.running_mean[0] == pytest.approx(0.05, abs=1e-12)
    assert state.running_var[0] == pytest.approx(0.925, abs=1e-12)


def test_bn_infer_uses_running_and_never_mutates():
    rng = SeededRng(8)
    state = BatchNormState(
        gamma=np.array([2.0]),
        beta=np.array([-1.0]),
        running_mean=np.array([3.0]),
        running_var=np.array([4.0]),
        epsilon=1e-5,
    )
    before = (state.running_mean.copy(), state.running_var.copy())
    f = rng.normal((5, 1)) + 3.0
    h, _ = batchnorm_forward(f, state, INFER)
    want = 2.0 * (f - 3.0) / np.sqrt(4.0 + 1e-5) - 1.0
    assert np.allclose(h, want, atol=1e-12)
    assert (state.running_mean == before[0]).all()
    assert (state.running_var == before[1]).all()


def test_bn_train_needs_two_examples():
    state = BatchNormState.identity(3)
    with pytest.raises(DomainError):
        batchnorm_forward(np.ones((1, 3)), state, TRAIN)


def test_bn_feature_mismatch():
    state = BatchNormState.identity(3)
    with pytest.raises(DimensionError):
        batchnorm_forward(np.ones((4, 5)), state, TRAIN)


def test_bn_conv_features_are_per_channel():
    rng = SeededRng(9)
    f = rng.normal((6, 2, 4, 4)) * 2.0 + 1.0
    state = BatchNormState.identity(2)
    h, _ = batchnorm_forward(f, state, TRAIN, update_running=False)
    # standardisation over batch and both spatial axes
    assert np.allclose(h.mean(axis=(0, 2, 3)), 0.0, atol=1e-9)
    assert np.allclose(h.var(axis=(0, 2, 3)), 1.0, atol=1e-3)


def test_bn_backward_matches_finite_diff():
    rng = SeededRng(12)
    f = rng.normal((5, 3))
    gamma = rng.normal((3,)) + 2.0
    beta = rng.normal((3,))

    def state():
        return BatchNormState(gamma.copy(), beta.copy(), np.zeros(3), np.ones(3))

    h, cache = batchnorm_forward(f, state(), TRAIN, update_running=False)
    proj = rng.normal(h.shape)
    df, dgamma, dbeta = batchnorm_backward(proj, cache)

    def loss_f(t):
        out, _ = batchnorm_forward(t, state(), TRAIN, update_running=False)
        return float((out * proj).sum())

    def loss_gamma(t):
        s = BatchNormState(t, beta.copy(), np.zeros(3), np.ones(3))
        out, _ = batchnorm_forward(f, s, TRAIN, update_running=False)
        return float((out * proj).sum())

    def loss_beta(t):
        s = BatchNormState(gamma.copy(), t, np.zeros(3), np.ones(3))
        out, _ = batchnorm_forward(f, s, TRAIN, update_running=False)
        return float((out * proj).sum())

    assert rel_err(df, finite_diff_grad(loss_f, f)) < 1e-6
    assert rel_err(dgamma, finite_diff_grad(loss_gamma, gamma)) < 1e-6
    assert rel_err(dbeta, finite_diff_grad(loss_beta, beta)) < 1e-6


def test_bn_state_validation():
    with pytest.raises(DomainError):
        BatchNormState.identity(2, epsilon=0.0)
    with pytest.raises(DomainError):
        BatchNormState.identity(2, momentum=0.0)
    with pytest.raises(DomainError):
        BatchNormState(np.ones(2), np.zeros(2), np.zeros(2), np.array([1.0, -0.5]))


# ---------------------------------------------------------------------------
# dropout


def test_dropout_infer_is_identity():
    x = SeededRng(1).normal((4, 4))
    y, _ = dropout_forward(x, DropoutSpec(0.5), INFER)
    assert (y == x).all()


def test_dropout_zero_rate_is_identity_without_rng():
    x = SeededRng(1).normal((4, 4))
    y, cache = dropout_forward(x, DropoutSpec(0.0), TRAIN)
    assert (y == x).all()
    assert (dropout_backward(x, cache) == x).all()


def test_dropout_train_needs_rng():
    with pytest.raises(StateError):
        dropout_forward(np.ones((2, 2)), DropoutSpec(0.5), TRAIN)


def test_dropout_scales_survivors():
    x = np.ones((2000,)).reshape(200, 10)
    y, cache = dropout_forward(x, DropoutSpec(0.25), TRAIN, SeededRng(3))
    kept = y != 0
    assert np.allclose(y[kept], 1.0 / 0.75)
    # inverted scaling keeps the expectation near the input
    assert y.mean() == pytest.approx(1.0, abs=0.05)
    dy = SeededRng(4).normal(y.shape)
    dx = dropout_backward(dy, cache)
    assert (dx[~kept] == 0).all()
    assert np.allclose(dx[kept], dy[kept] / 0.75)


def test_dropout_mask_is_seeded():
    x = np.ones((8, 8))
    y1, _ = dropout_forward(x, DropoutSpec(0.5), TRAIN, SeededRng(5))
    y2, _ = dropout_forward(x, DropoutSpec(0.5), TRAIN, SeededRng(5))
    assert (y1 == y2).all()


def test_dropout_rate_domain():
    with pytest.raises(ConfigError):
        DropoutSpec(1.0)
    with pytest.raises(ConfigError):
        DropoutSpec(-0.1)


# ---------------------------------------------------------------------------
# pooling


def pool_reference(x, kind, window, stride, pad):
    n, c, h, w = x.shape
    fill = -np.inf if kind == "max" else 0.0
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=fill)
    ho = (h + 2 * pad - window) // stride + 1
    wo = (w + 2 * pad - window) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[
                        b,
                        ch,
                        i * stride : i * stride + window,
                        j * stride : j * stride + window,
                    ]
                    out[b, ch, i, j] = patch.max() if kind == "max" else patch.mean()
    return out


@pytest.mark.parametrize("kind", ["max", "avg"])
@pytest.mark.parametrize("window,stride,pad", [(2, 2, 0), (3, 2, 1), (3, 1, 0)])
def test_pool_forward_matches_reference(kind, window, stride, pad):
    x = SeededRng(40).normal((2, 3, 6, 6))
    y, _ = pool_forward(x, kind, window, stride, pad)
    assert np.allclose(y, pool_reference(x, kind, window, stride, pad), atol=1e-12)


def test_max_pool_padding_never_wins():
    x = -np.ones((1, 1, 2, 2))  # all entries below the zero a pad would supply
    y, _ = pool_forward(x, "max", 3, 2, 1)
    assert (y == -1.0).all()


def test_avg_pool_padding_counts_as_zero():
    x = np.ones((1, 1, 2, 2))
    y, _ = pool_forward(x, "avg", 2, 2, 1)
    # each corner window sees one real pixel and three zero pads
    assert np.allclose(y, 0.25)


def test_max_pool_backward_routes_to_argmax():
    x = np.array([[[[1.0, 2.0], [4.0, 3.0]]]])
    y, cache = pool_forward(x, "max", 2, 2, 0)
    assert y[0, 0, 0, 0] == 4.0
    dx = pool_backward(np.array([[[[7.0]]]]), cache)
    assert dx.tolist() == [[[[0.0, 0.0], [7.0, 0.0]]]]


def test_max_pool_tie_goes_to_first_position():
    x = np.array([[[[5.0, 5.0], [5.0, 5.0]]]])
    _, cache = pool_forward(x, "max", 2, 2, 0)
    dx = pool_backward(np.array([[[[1.0]]]]), cache)
    assert dx.tolist() == [[[[1.0, 0.0], [0.0, 0.0]]]]


def test_avg_pool_backward_spreads_uniformly():
    x = SeededRng(41).normal((1, 1, 4, 4))
    y, cache = pool_forward(x, "avg", 2, 2, 0)
    dy = np.ones_like(y)
    dx = pool_backward(dy, cache)
    assert np.allclose(dx, 0.25)


def test_pool_backward_overlapping_matches_finite_diff():
    x = SeededRng(42).normal((2, 2, 5, 5))
    for kind in ("avg", "max"):
        y, cache = pool_forward(x, kind, 3, 1, 0)
        proj = SeededRng(43).normal(y.shape)
        dx = pool_backward(proj, cache)
        num = finite_diff_grad(
            lambda t: float((pool_forward(t, kind, 3, 1, 0)[0] * proj).sum()), x
        )
        assert rel_err(dx, num) < 1e-6


def test_pool_spec_validation():
    with pytest.raises(ConfigError):
        PoolSpec("median", 2, 2)
    with pytest.raises(ConfigError):
        PoolSpec("max", 0, 1)


# ---------------------------------------------------------------------------
# softmax cross-entropy


def test_uniform_logits_give_log_c():
    logits = np.zeros((4, 10))
    loss, _ = softmax_xent(logits, np.array([0, 3, 7, 9]))
    assert loss == pytest.approx(2.302585092994046, abs=1e-12)


def test_perfect_prediction_loss_near_zero():
    logits = np.full((2, 3), -50.0)
    logits[0, 1] = 50.0
    logits[1, 2] = 50.0
    loss, _ = softmax_xent(logits, np.array([1, 2]))
    assert loss < 1e-12


def test_xent_gradient_structure():
    rng = SeededRng(50)
    logits = rng.normal((6, 4))
    labels = np.array([0, 1, 2, 3, 0, 1])
    loss, grad = softmax_xent(logits, labels)
    # rows sum to zero and match (softmax - onehot)/n
    assert np.allclose(grad.sum(axis=1), 0.0, atol=1e-12)
    num = finite_diff_grad(lambda t: softmax_xent(t, labels)[0], logits)
    assert rel_err(grad, num) < 1e-6


def test_xent_is_shift_stable():
    logits = np.array([[1000.0, 1000.0 - 5.0]])
    loss, grad = softmax_xent(logits, np.array([0]))
    assert np.isfinite(loss) and np.isfinite(grad).all()


def test_xent_label_range_checked():
    with pytest.raises(DomainError):
        softmax_xent(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(DomainError):
        softmax_xent(np.zeros((2, 3)), np.array([-1, 0]))


def test_xent_shape_checked():
    with pytest.raises(DimensionError):
        softmax_xent(np.zeros((2, 3)), np.array([0]))
    with pytest.raises(DimensionError):
        softmax_xent(np.zeros(3), np.array([0]))
