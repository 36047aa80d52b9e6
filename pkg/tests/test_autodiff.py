import numpy as np
import pytest

from equirob import Tensor, backward, forward_op
from equirob import autodiff as ad
from equirob.transforms import identity_grid

from helpers import check_grad

rng = np.random.default_rng(42)


def test_relu_definition():
    out = ad.relu(Tensor([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_avg_pool_global_constant():
    out = ad.avg_pool_global(Tensor(np.ones((1, 3, 4, 4))))
    assert out.shape == (1, 3, 1, 1)
    assert np.array_equal(out.data, np.ones((1, 3, 1, 1)))


def test_conv2d_delta_kernel_identity():
    x = rng.uniform(size=(1, 1, 6, 6))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)), stride=1, padding=1)
    np.testing.assert_allclose(out.data, x, atol=1e-12)


def test_conv2d_shape_error_names_op():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    w = Tensor(np.zeros((3, 5, 3, 3)))
    with pytest.raises(ad.ShapeError, match="conv2d"):
        ad.conv2d(x, w, Tensor(np.zeros(3)))


def test_backward_sum_is_ones():
    x = Tensor(rng.uniform(size=(2, 2)), requires_grad=True)
    backward(ad.tsum(x))
    assert np.array_equal(x.grad, np.ones((2, 2)))


def test_backward_mean_square_chain():
    x = Tensor([3.0], requires_grad=True)
    backward(ad.tmean(ad.mul(x, x)))
    np.testing.assert_allclose(x.grad, [6.0])


def test_backward_rejects_nonscalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ad.GraphError):
        backward(ad.mul(x, x))


def test_backward_rejects_detached():
    with pytest.raises(ad.GraphError):
        backward(Tensor(1.0))


def test_fanout_grad_accumulates():
    x = Tensor([2.0], requires_grad=True)
    y = ad.add(ad.mul(x, x), ad.mul(x, x))
    backward(ad.tsum(y))
    np.testing.assert_allclose(x.grad, [8.0])


def test_random_graph_matches_finite_differences():
    w = rng.uniform(-1, 1, size=(4, 2, 3, 3))

    def f(xt):
        h = ad.relu(ad.conv2d(xt, Tensor(w), Tensor(np.zeros(4)), padding=1))
        p = ad.avg_pool2(h)
        s = ad.softmax_channel(p)
        return ad.tmean(ad.mul(s, s))

    check_grad(f, rng.uniform(size=(1, 2, 8, 8)), rtol=1e-4)


@pytest.mark.parametrize("op", [
    lambda x: ad.tsum(ad.relu(x)),
    lambda x: ad.tmean(ad.mul(x, x)),
    lambda x: ad.tsum(ad.max_pool2(x)),
    lambda x: ad.tsum(ad.avg_pool2(x)),
    lambda x: ad.tsum(ad.avg_pool_global(x)),
    lambda x: ad.tsum(ad.softmax_channel(x)),
    lambda x: ad.tsum(ad.clip01(x)),
    lambda x: ad.tsum(ad.flip_w(x)),
    lambda x: ad.tmean(ad.concat([x, ad.mul(x, x)], axis=1)),
])
def test_op_gradients(op):
    check_grad(op, rng.uniform(0.05, 0.95, size=(2, 3, 4, 4)), rtol=1e-4)


def test_conv2d_gradients_all_inputs():
    x0 = rng.uniform(size=(2, 2, 6, 6))
    w0 = rng.uniform(-1, 1, size=(3, 2, 3, 3))
    b0 = rng.uniform(-1, 1, size=3)
    for stride in (1, 2):
        check_grad(lambda xt: ad.tsum(ad.conv2d(xt, Tensor(w0), Tensor(b0),
                                                stride=stride)), x0)
        check_grad(lambda wt: ad.tsum(ad.conv2d(Tensor(x0), wt, Tensor(b0),
                                                stride=stride)), w0)
        check_grad(lambda bt: ad.tsum(ad.conv2d(Tensor(x0), Tensor(w0), bt,
                                                stride=stride)), b0)


def test_linear_gradients():
    x0 = rng.uniform(size=(3, 4))
    w0 = rng.uniform(-1, 1, size=(4, 5))
    b0 = rng.uniform(-1, 1, size=5)
    check_grad(lambda t: ad.tsum(ad.linear(t, Tensor(w0), Tensor(b0))), x0)
    check_grad(lambda t: ad.tsum(ad.linear(Tensor(x0), t, Tensor(b0))), w0)
    check_grad(lambda t: ad.tsum(ad.linear(Tensor(x0), Tensor(w0), t)), b0)


def test_cross_entropy_gradient_and_uniform_value():
    logits = np.zeros((2, 5))
    loss = ad.cross_entropy_logits(Tensor(logits), np.array([1, 3]))
    np.testing.assert_allclose(loss.item(), np.log(5))
    check_grad(lambda t: ad.cross_entropy_logits(t, np.array([1, 3])),
               rng.uniform(-1, 1, size=(2, 5)), rtol=1e-4)


def test_cross_entropy_label_range():
    with pytest.raises(ValueError, match="label"):
        ad.cross_entropy_logits(Tensor(np.zeros((1, 3))), np.array([3]))


def test_cosine_similarity_gradient():
    u0 = rng.uniform(-1, 1, size=(1, 4, 3, 3))
    v0 = rng.uniform(-1, 1, size=(1, 4, 3, 3))
    check_grad(lambda t: ad.tsum(ad.cosine_similarity(t, Tensor(v0))), u0)
    check_grad(lambda t: ad.tsum(ad.cosine_similarity(Tensor(u0), t)), v0)


def test_cosine_zero_vector_guard():
    z = Tensor(np.zeros((1, 3, 2, 2)))
    v = Tensor(rng.uniform(size=(1, 3, 2, 2)))
    out = ad.cosine_similarity(z, v)
    assert np.array_equal(out.data, np.zeros((1, 1, 2, 2)))


def test_bilinear_identity_grid():
    x = rng.uniform(size=(1, 2, 5, 7))
    out, mask = ad.bilinear_sample(Tensor(x), identity_grid(1, 5, 7))
    np.testing.assert_allclose(out.data, x, atol=1e-12)
    assert mask.min() == 1.0


def test_bilinear_fully_out_of_bounds():
    x = rng.uniform(size=(1, 1, 4, 4))
    grid = np.full((1, 4, 4, 2), 3.0)
    out, mask = ad.bilinear_sample(Tensor(x), grid)
    assert np.array_equal(out.data, np.zeros((1, 1, 4, 4)))
    assert mask.max() == 0.0


def test_bilinear_half_pixel_shift_on_ramp():
    # ramp image: value equals the column index, so a half-pixel shift in x
    # hits the midpoint of adjacent columns exactly
    w = 6
    x = np.broadcast_to(np.arange(w, dtype=float), (1, 1, 4, w)).copy()
    grid = identity_grid(1, 4, w)
    grid[..., 0] += 1.0 / (w - 1)  # +0.5 pixel in x
    out, mask = ad.bilinear_sample(Tensor(x), grid)
    expect = np.broadcast_to(np.arange(w) + 0.5, (4, w))
    valid = mask[0, 0] > 0.5
    np.testing.assert_allclose(out.data[0, 0][valid], expect[valid], atol=1e-12)


def test_bilinear_gradient():
    grid = identity_grid(2, 5, 5)
    grid += rng.uniform(-0.2, 0.2, size=grid.shape)
    check_grad(lambda t: ad.tsum(ad.bilinear_sample(t, grid)[0]),
               rng.uniform(size=(2, 3, 5, 5)))


def test_bilinear_malformed_grid():
    with pytest.raises(ad.ShapeError):
        ad.bilinear_sample(Tensor(np.zeros((1, 1, 4, 4))), np.zeros((1, 4, 4, 3)))


def test_backward_deterministic():
    x0 = rng.uniform(size=(1, 3, 8, 8))
    w = rng.uniform(-1, 1, size=(4, 3, 3, 3))

    def run():
        xt = Tensor(x0, requires_grad=True)
        loss = ad.tmean(ad.relu(ad.conv2d(xt, Tensor(w), Tensor(np.zeros(4)))))
        backward(loss)
        return xt.grad

    assert np.array_equal(run(), run())


def test_forward_independent_of_grad_request():
    x0 = rng.uniform(size=(1, 2, 6, 6))
    w = rng.uniform(-1, 1, size=(2, 2, 3, 3))
    a = ad.conv2d(Tensor(x0), Tensor(w), Tensor(np.zeros(2)))
    b = ad.conv2d(Tensor(x0, requires_grad=True), Tensor(w), Tensor(np.zeros(2)))
    assert np.array_equal(a.data, b.data)


def test_forward_op_dispatch():
    out = forward_op("relu", Tensor([-2.0, 5.0]))
    assert np.array_equal(out.data, [0.0, 5.0])
    with pytest.raises(KeyError):
        forward_op("unknown_op")
