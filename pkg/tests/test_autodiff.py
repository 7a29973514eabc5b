import numpy as np
import pytest

from layoutseg import autodiff as ad
from layoutseg.autodiff import (Parameter, Tape, Tensor,
                                finite_difference_check)

RNG = np.random.default_rng(1234)


def rand_t(*shape, scale=1.0):
    return Tensor(RNG.normal(0.0, scale, size=shape))


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_scalar_scaling():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Parameter(np.full((1, 1, 1, 1), 2.0))
    y = ad.conv2d(x, w)
    assert np.array_equal(y.data, np.full((1, 1, 3, 3), 2.0))


def test_conv2d_dilated_same_padding_shape():
    x = rand_t(1, 1, 5, 5)
    w = Parameter(RNG.normal(size=(1, 1, 3, 3)))
    y = ad.conv2d(x, w, stride=1, padding=2, dilation=2)
    assert y.data.shape == (1, 1, 5, 5)


def test_conv2d_identity_kernel_exact():
    x = rand_t(2, 3, 6, 6)
    eye = np.eye(3).reshape(3, 3, 1, 1)
    y = ad.conv2d(x, Parameter(eye))
    assert np.array_equal(y.data, x.data)


def test_conv2d_channel_mismatch():
    with pytest.raises(ValueError):
        ad.conv2d(rand_t(1, 2, 4, 4), Parameter(np.ones((1, 3, 3, 3))))


def test_conv2d_nonpositive_output():
    with pytest.raises(ValueError):
        ad.conv2d(rand_t(1, 1, 2, 2), Parameter(np.ones((1, 1, 5, 5))))


def test_conv2d_gradients_vs_finite_differences():
    x = rand_t(1, 2, 6, 6)
    w = Parameter(RNG.normal(size=(3, 2, 3, 3)))
    b = Parameter(RNG.normal(size=3))

    def loss_x(t):
        return ad.tsum(ad.sigmoid(ad.conv2d(t, w, b, 1, 1, 1)))

    def loss_w(t):
        return ad.tsum(ad.sigmoid(ad.conv2d(x, t, b, 1, 1, 1)))

    assert finite_difference_check(loss_x, x) <= 1e-4
    assert finite_difference_check(loss_w, w) <= 1e-4


def test_conv2d_dilation2_gradients():
    x = rand_t(1, 2, 6, 6)
    w = Parameter(RNG.normal(size=(2, 2, 3, 3)))

    def loss(t):
        return ad.tsum(ad.sigmoid(ad.conv2d(t, w, None, 1, 2, 2)))

    assert finite_difference_check(loss, x) <= 1e-4


# ---------------------------------------------------------------------------
# depthwise separable conv


def test_sepconv_identity_composition():
    c = 4
    x = rand_t(1, c, 8, 8)
    dw = np.zeros((c, 1, 3, 3))
    dw[:, 0, 1, 1] = 1.0
    pw = np.eye(c).reshape(c, c, 1, 1)
    y = ad.depthwise_separable_conv(x, Parameter(dw), Parameter(pw))
    assert np.allclose(y.data, x.data, atol=1e-15)


def test_sepconv_shape_contract():
    x = rand_t(1, 4, 8, 8)
    dw = Parameter(RNG.normal(size=(4, 1, 3, 3)))
    pw = Parameter(RNG.normal(size=(2, 4, 1, 1)))
    assert ad.depthwise_separable_conv(x, dw, pw).data.shape == (1, 2, 8, 8)


def test_sepconv_matches_composition_oracle():
    c, cout = 3, 5
    x = rand_t(2, c, 6, 6)
    dw = Parameter(RNG.normal(size=(c, 1, 3, 3)))
    pw = Parameter(RNG.normal(size=(cout, c, 1, 1)))
    y = ad.depthwise_separable_conv(x, dw, pw)

    # oracle: C separate single-channel conv2d calls, then a 1x1 conv2d
    mids = []
    for ch in range(c):
        xi = Tensor(x.data[:, ch:ch + 1])
        wi = Parameter(dw.data[ch:ch + 1])
        mids.append(ad.conv2d(xi, wi, padding=1).data)
    mid = Tensor(np.concatenate(mids, axis=1))
    expected = ad.conv2d(mid, pw).data
    assert np.abs(y.data - expected).max() <= 1e-12


def test_sepconv_channel_mismatch():
    with pytest.raises(ValueError):
        ad.depthwise_separable_conv(
            rand_t(1, 4, 8, 8), Parameter(np.ones((3, 1, 3, 3))),
            Parameter(np.ones((2, 3, 1, 1))))


# ---------------------------------------------------------------------------
# batch norm


def test_batch_norm_eval_identity():
    x = rand_t(2, 3, 4, 4)
    gamma, beta = Parameter(np.ones(3)), Parameter(np.zeros(3))
    y = ad.batch_norm(x, gamma, beta, np.zeros(3), np.ones(3),
                      training=False, eps=1e-5)
    # eval with unit running stats scales by 1/sqrt(1+eps)
    assert np.abs(y.data - x.data).max() <= 1e-5 * np.abs(x.data).max() + 1e-12
    y0 = ad.batch_norm(x, gamma, beta, np.zeros(3), np.ones(3),
                       training=False, eps=0.0)
    assert np.array_equal(y0.data, x.data)


def test_batch_norm_train_statistics():
    x = rand_t(4, 3, 5, 5, scale=2.0)
    gamma = Parameter(np.array([1.0, 2.0, -0.5]))
    beta = Parameter(np.array([0.0, 1.0, 3.0]))
    y = ad.batch_norm(x, gamma, beta, np.zeros(3), np.ones(3), training=True,
                      eps=0.0)
    mean = y.data.mean(axis=(0, 2, 3))
    std = y.data.std(axis=(0, 2, 3))
    assert np.abs(mean - beta.data).max() <= 1e-9
    assert np.abs(std - np.abs(gamma.data)).max() <= 1e-9


def test_batch_norm_running_stat_update():
    x = rand_t(2, 2, 3, 3)
    rm, rv = np.zeros(2), np.ones(2)
    ad.batch_norm(x, Parameter(np.ones(2)), Parameter(np.zeros(2)),
                  rm, rv, training=True, momentum=0.1)
    bm = x.data.mean(axis=(0, 2, 3))
    bv = x.data.var(axis=(0, 2, 3))
    assert np.allclose(rm, 0.1 * bm)
    assert np.allclose(rv, 0.9 + 0.1 * bv)


def test_batch_norm_single_element_rejected():
    with pytest.raises(ValueError):
        ad.batch_norm(rand_t(1, 2, 1, 1), Parameter(np.ones(2)),
                      Parameter(np.zeros(2)), np.zeros(2), np.ones(2),
                      training=True)


def test_batch_norm_gradcheck():
    x = rand_t(2, 3, 4, 4)
    gamma = Parameter(RNG.normal(size=3))
    beta = Parameter(RNG.normal(size=3))

    def loss(t):
        return ad.tsum(ad.sigmoid(ad.batch_norm(
            t, gamma, beta, np.zeros(3), np.ones(3), training=True)))

    assert finite_difference_check(loss, x) <= 1e-4

    def loss_g(t):
        return ad.tsum(ad.sigmoid(ad.batch_norm(
            x, t, beta, np.zeros(3), np.ones(3), training=True)))

    assert finite_difference_check(loss_g, gamma) <= 1e-4


# ---------------------------------------------------------------------------
# activations


def test_sigmoid_symmetry():
    assert ad.sigmoid(Tensor(np.zeros(3))).data == pytest.approx(0.5)


def test_softmax_equal_logits():
    y = ad.softmax(Tensor(np.zeros(2)), axis=0)
    assert np.array_equal(y.data, [0.5, 0.5])


def test_softmax_no_overflow():
    y = ad.softmax(Tensor(np.array([1000.0, 0.0])), axis=0)
    assert np.isfinite(y.data).all()
    assert y.data[0] == pytest.approx(1.0)
    assert y.data[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_sums_to_one_property():
    for _ in range(50):
        x = Tensor(RNG.uniform(-1e4, 1e4, size=(3, 7)))
        y = ad.softmax(x, axis=1)
        assert np.abs(y.data.sum(axis=1) - 1.0).max() <= 1e-12


def test_softmax_invalid_axis():
    with pytest.raises(ValueError):
        ad.softmax(Tensor(np.zeros((2, 2))), axis=5)


def test_relu_and_activation_gradients():
    x = rand_t(2, 3, 4, 4)
    assert np.array_equal(ad.relu(x).data, np.maximum(x.data, 0))
    assert finite_difference_check(
        lambda t: ad.tsum(ad.sigmoid(t)), rand_t(3, 4)) <= 1e-6
    assert finite_difference_check(
        lambda t: ad.tsum(ad.mul(ad.softmax(t, axis=1), t)),
        rand_t(2, 5)) <= 1e-4


# ---------------------------------------------------------------------------
# pooling / upsampling


def test_global_avg_pool_values():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    assert ad.global_avg_pool(x).data.reshape(()) == 2.5
    c = Tensor(np.full((2, 3, 4, 4), 7.5))
    assert np.array_equal(ad.global_avg_pool(c).data,
                          np.full((2, 3, 1, 1), 7.5))


def test_global_avg_pool_uniform_gradient():
    x = rand_t(1, 2, 3, 4)
    with Tape() as tape:
        loss = ad.tsum(ad.global_avg_pool(x))
        tape.backward(loss)
    assert np.array_equal(x.grad, np.full(x.data.shape, 1.0 / 12.0))


def test_bilinear_upsample_factor1_identity():
    x = rand_t(1, 2, 5, 5)
    assert np.array_equal(ad.bilinear_upsample(x, 1).data, x.data)


def test_bilinear_upsample_constant():
    x = Tensor(np.full((1, 1, 3, 3), 4.25))
    y = ad.bilinear_upsample(x, 2)
    assert y.data.shape == (1, 1, 6, 6)
    assert np.allclose(y.data, 4.25, atol=1e-14)


def test_bilinear_upsample_gradcheck():
    x = rand_t(1, 2, 3, 3)
    assert finite_difference_check(
        lambda t: ad.tsum(ad.sigmoid(ad.bilinear_upsample(t, 2))), x) <= 1e-4


# ---------------------------------------------------------------------------
# structure ops


def test_concat_shape_and_errors():
    y = ad.concat(rand_t(1, 2, 4, 4), rand_t(1, 3, 4, 4), axis=1)
    assert y.data.shape == (1, 5, 4, 4)
    with pytest.raises(ValueError):
        ad.concat(rand_t(1, 2, 4, 4), rand_t(1, 3, 5, 5), axis=1)
    with pytest.raises(ValueError):
        ad.add(rand_t(1, 2, 4, 4), rand_t(1, 3, 4, 4))


def test_mul_channelwise_identity_and_annihilation():
    x = rand_t(2, 3, 4, 4)
    ones = Tensor(np.ones((2, 3, 1, 1)))
    zeros = Tensor(np.zeros((2, 3, 1, 1)))
    assert np.array_equal(ad.mul_channelwise(x, ones).data, x.data)
    assert np.array_equal(ad.mul_channelwise(x, zeros).data,
                          np.zeros(x.data.shape))
    with pytest.raises(ValueError):
        ad.mul_channelwise(x, Tensor(np.ones((2, 4, 1, 1))))


def test_structure_gradients():
    a, b = rand_t(2, 3, 4, 4), rand_t(2, 3, 4, 4)
    s = rand_t(2, 3, 1, 1)
    assert finite_difference_check(
        lambda t: ad.tsum(ad.sigmoid(ad.concat(t, b, 1))), a) <= 1e-4
    assert finite_difference_check(
        lambda t: ad.tsum(ad.sigmoid(ad.add(t, b))), a) <= 1e-4
    assert finite_difference_check(
        lambda t: ad.tsum(ad.sigmoid(ad.mul_channelwise(t, s))), a) <= 1e-4
    assert finite_difference_check(
        lambda t: ad.tsum(ad.sigmoid(ad.mul_channelwise(a, t))), s) <= 1e-4


# ---------------------------------------------------------------------------
# cross entropy


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((1, 4, 3, 3)))
    labels = RNG.integers(0, 4, size=(1, 3, 3))
    loss = ad.cross_entropy_loss(logits, labels)
    assert loss.item() == pytest.approx(np.log(4.0), abs=1e-12)


def test_cross_entropy_saturated_correct():
    labels = RNG.integers(0, 4, size=(1, 2, 2))
    logits = np.zeros((1, 4, 2, 2))
    for (n, h, w), lab in np.ndenumerate(labels):
        logits[n, lab, h, w] = 1e3
    assert ad.cross_entropy_loss(Tensor(logits), labels).item() <= 1e-9


def test_cross_entropy_ignore_and_errors():
    logits = Tensor(np.zeros((1, 4, 2, 2)))
    labels = np.full((1, 2, 2), 255)
    labels[0, 0, 0] = 1
    loss = ad.cross_entropy_loss(logits, labels, ignore_label=255)
    assert loss.item() == pytest.approx(np.log(4.0))
    with pytest.raises(ValueError):
        ad.cross_entropy_loss(logits, np.full((1, 2, 2), 255),
                              ignore_label=255)
    with pytest.raises(ValueError):
        ad.cross_entropy_loss(logits, np.full((1, 2, 2), 9))


def test_cross_entropy_gradcheck():
    labels = RNG.integers(0, 4, size=(1, 3, 3))
    x = rand_t(1, 4, 3, 3)
    assert finite_difference_check(
        lambda t: ad.cross_entropy_loss(t, labels), x) <= 1e-4


# ---------------------------------------------------------------------------
# tape / backward


def test_backward_linear_functional():
    x = rand_t(3, 4)
    with Tape() as tape:
        tape.backward(ad.tsum(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_quadratic():
    x = rand_t(3, 4)
    with Tape() as tape:
        tape.backward(ad.tsum(ad.mul(x, x)))
    assert np.allclose(x.grad, 2.0 * x.data, atol=1e-15)


def test_backward_requires_scalar():
    x = rand_t(3)
    with Tape() as tape:
        y = ad.relu(x)
        with pytest.raises(ValueError):
            tape.backward(y)


def test_backward_accumulates_into_parameters():
    w = Parameter(RNG.normal(size=(2, 2)))
    with Tape() as tape:
        tape.backward(ad.tsum(w))
    g1 = w.grad.copy()
    with Tape() as tape:
        tape.backward(ad.tsum(w))
    assert np.array_equal(w.grad, 2.0 * g1)


def test_frozen_parameter_still_receives_gradient():
    w = Parameter(RNG.normal(size=(3,)), trainable=False)
    with Tape() as tape:
        tape.backward(ad.tsum(ad.mul(w, w)))
    assert np.allclose(w.grad, 2.0 * w.data)


# ---------------------------------------------------------------------------
# finite differences


def test_fd_check_exact_for_linear():
    # integer data plus a power-of-two eps keeps every sum exact
    x = Tensor(RNG.integers(-8, 8, size=(4, 4)).astype(np.float64))
    assert finite_difference_check(ad.tsum, x, eps=2.0 ** -17) == 0.0


def test_fd_check_smooth_bound():
    assert finite_difference_check(
        lambda t: ad.tsum(ad.sigmoid(t)), rand_t(3, 3)) <= 1e-4
