import io

import numpy as np
import pytest

from scanloc import autodiff as ad
from oracles import central_difference, max_relative_error, naive_conv2d, naive_maxpool, reference_adam


def _layer(spec, shape, seed=0):
    return ad.LAYER_KINDS[spec.kind](spec, shape, np.random.default_rng(seed))


def test_identity_conv():
    layer = _layer(ad.conv(1, kernel=(1, 1)), (1, 3, 8))
    layer.weight.value[...] = 1.0
    x = np.random.default_rng(0).random((2, 1, 3, 8))
    np.testing.assert_array_equal(layer.forward(x), x)


def test_maxpool_row():
    layer = _layer(ad.maxpool((1, 2)), (1, 1, 4))
    out = layer.forward(np.array([[[[1.0, 3.0, 2.0, 5.0]]]]))
    assert out.ravel().tolist() == [3.0, 5.0]


@pytest.mark.parametrize("kernel,stride", [((3, 3), 1), ((3, 5), 1), ((1, 3), 2), ((3, 3), 2)])
def test_conv_matches_naive_loops(kernel, stride):
    rng = np.random.default_rng(sum(kernel) + stride)
    layer = _layer(ad.conv(3, kernel=kernel, stride=stride), (2, 5, 9), seed=1)
    layer.bias.value = rng.normal(size=3)
    x = rng.normal(size=(2, 2, 5, 9))
    ref = naive_conv2d(x, layer.weight.value, layer.bias.value, stride)
    np.testing.assert_allclose(layer.forward(x), ref, rtol=0, atol=1e-12)


def test_maxpool_matches_naive_loops():
    x = np.random.default_rng(2).normal(size=(2, 3, 8, 12))
    layer = _layer(ad.maxpool((2, 3)), (3, 8, 12))
    np.testing.assert_array_equal(layer.forward(x), naive_maxpool(x, 2, 3))


def test_identity_backward_gives_ones():
    layer = _layer(ad.conv(1, kernel=(1, 1)), (1, 3, 8))
    layer.weight.value[...] = 1.0
    x = np.random.default_rng(0).random((1, 1, 3, 8))
    layer.forward(x)
    np.testing.assert_array_equal(layer.backward(np.ones_like(x)), np.ones_like(x))


def test_backward_before_forward_raises():
    for spec in (ad.conv(2), ad.maxpool(), ad.prelu(), ad.flatten()):
        with pytest.raises(RuntimeError):
            _layer(spec, (1, 4, 8)).backward(np.zeros((1, 1, 4, 8)))
    with pytest.raises(RuntimeError):
        _layer(ad.dense(3), (4,)).backward(np.zeros((1, 3)))


def test_shape_mismatch_names_shapes():
    layer = _layer(ad.dense(3), (4,))
    with pytest.raises(ValueError, match=r"expected input shape \(N, 4\).*\(2, 5\)"):
        layer.forward(np.zeros((2, 5)))


def test_invalid_specs():
    with pytest.raises(ValueError):
        ad.conv(0)
    with pytest.raises(ValueError):
        ad.maxpool((0, 2))
    with pytest.raises(ValueError):
        ad.dense(0)
    with pytest.raises(ValueError):
        ad.LayerSpec("softmax")


def _grad_check(net, x, seed):
    """Compare analytic input and parameter gradients of a random linear functional."""
    rng = np.random.default_rng(seed)
    proj = rng.normal(size=(x.shape[0],) + net.output_shape)

    def loss():
        return float((net.forward(x) * proj).sum())

    net.zero_grad()
    net.forward(x)
    gx = net.backward(proj.copy())
    errs = [max_relative_error(gx, central_difference(loss, x))]
    for p in net.params:
        analytic = p.grad.copy()
        errs.append(max_relative_error(analytic, central_difference(loss, p.value)))
    return max(errs)


def test_dense_gradient_tight():
    rng = np.random.default_rng(0)
    net = ad.Sequential([ad.dense(5)], (7,), seed=0)
    assert _grad_check(net, rng.normal(size=(3, 7)), 1) < 1e-6


def test_conv_prelu_pool_chain_gradient():
    rng = np.random.default_rng(1)
    net = ad.Sequential([ad.conv(3), ad.prelu(), ad.maxpool((2, 2)), ad.flatten(), ad.dense(4)],
                        (2, 4, 8), seed=3)
    # keep activations away from the PReLU kink and pooling ties
    x = rng.normal(size=(2, 2, 4, 8))
    assert _grad_check(net, x, 2) < 1e-4


def test_adam_zero_gradient_leaves_params():
    p = ad.Tensor(np.array([1.5, -2.0]))
    opt = ad.Adam([p])
    opt.step()
    assert opt.t == 1
    np.testing.assert_array_equal(p.value, [1.5, -2.0])


def test_adam_first_step_magnitude_is_lr():
    p = ad.Tensor(np.array([0.0]))
    p.grad[...] = 1.0
    ad.Adam([p]).step()
    assert p.value[0] == pytest.approx(-1e-3, rel=1e-6)


def test_adam_matches_reference_on_quadratic():
    p = ad.Tensor(np.array([1.0]))
    opt = ad.Adam([p])
    traj = []
    for _ in range(10):
        p.grad[...] = 2.0 * p.value
        opt.step()
        traj.append(float(p.value[0]))
    ref = reference_adam(1.0, lambda x: 2.0 * x, 10)
    np.testing.assert_allclose(traj, ref, rtol=0, atol=1e-12)


def test_adam_rejects_non_finite_gradient():
    p = ad.Tensor(np.array([1.0]))
    p.grad[...] = np.nan
    with pytest.raises(FloatingPointError):
        ad.Adam([p]).step()


def test_forward_is_deterministic():
    net = ad.Sequential([ad.conv(4), ad.prelu(), ad.flatten(), ad.dense(3)], (1, 4, 8), seed=5)
    x = np.random.default_rng(0).random((2, 1, 4, 8))
    assert net.forward(x).tobytes() == net.forward(x).tobytes()


def test_stride1_conv_commutes_with_column_shift():
    net = ad.Sequential([ad.conv(4), ad.prelu(), ad.conv(2, kernel=(3, 5))], (1, 6, 16), seed=2)
    x = np.random.default_rng(3).random((1, 1, 6, 16))
    for k in (1, 5, 16):
        a = net.forward(np.roll(x, k, axis=3))
        b = np.roll(net.forward(x), k, axis=3)
        assert np.array_equal(a, b)


def test_checkpoint_round_trip_is_bit_exact():
    nets = {"a": ad.Sequential([ad.conv(3), ad.prelu(), ad.maxpool(), ad.flatten(), ad.dense(5)],
                               (1, 4, 8), seed=1),
            "b": ad.Sequential([ad.dense(2)], (5,), seed=2)}
    buf = io.BytesIO()
    ad.write_checkpoint(buf, nets, {"note": 1})
    raw = buf.getvalue()
    loaded, meta = ad.read_checkpoint(io.BytesIO(raw))
    assert meta == {"note": 1}
    assert list(loaded) == ["a", "b"]
    for name in nets:
        for p, q in zip(nets[name].params, loaded[name].params):
            assert p.value.tobytes() == q.value.tobytes()
    again = io.BytesIO()
    ad.write_checkpoint(again, loaded, {"note": 1})
    assert again.getvalue() == raw


def test_checkpoint_errors():
    with pytest.raises(ValueError, match="magic"):
        ad.read_checkpoint(io.BytesIO(b"XXXX" + bytes(8)))
    buf = io.BytesIO()
    ad.write_checkpoint(buf, {"a": ad.Sequential([ad.dense(2)], (3,))})
    with pytest.raises(ValueError, match="truncated"):
        ad.read_checkpoint(io.BytesIO(buf.getvalue()[:-3]))
