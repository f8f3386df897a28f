import numpy as np
import pytest

from scdmd_lab.autodiff import MlpParams
from scdmd_lab.gradcheck import central_difference, max_relative_error
from scdmd_lab.networks import FieldNet, ScoreNet, TokenFieldNet, time_features
from scdmd_lab.teacher import RECTIFIED


def _loss_and_grads(net, x, t, c, w, fw=None):
    cache = net.forward(x, t, c)
    loss = float((w * cache.output).sum())
    if fw is not None:
        loss += float((fw * cache.features).sum())
    pg, xg = net.backward(cache, w, fw)
    return loss, pg, xg


def _fd_check(net, x, t, c, with_features):
    rng = np.random.default_rng(5)
    w = rng.standard_normal(net(x, t, c).shape)
    fw = rng.standard_normal(net.forward(x, t, c).features.shape) if with_features else None
    _, pg, xg = _loss_and_grads(net, x, t, c, w, fw)

    def by_params(flat):
        return _loss_and_grads(net.with_params(MlpParams(net.spec, flat)), x, t, c, w, fw)[0]

    def by_x(xx):
        return _loss_and_grads(net, xx, t, c, w, fw)[0]

    assert max_relative_error(pg, central_difference(by_params, net.params.flat)) < 1e-5
    assert max_relative_error(xg, central_difference(by_x, x)) < 1e-5


def test_time_features_shape_and_values():
    f = time_features(np.array([0.0, 0.5, 1.0]))
    assert f.shape == (3, 4)
    np.testing.assert_allclose(f[1], [0.5, 0.0, 1.0, -1.0], atol=1e-15)


@pytest.mark.parametrize("with_features", [False, True])
def test_fieldnet_gradients(with_features):
    rng = np.random.default_rng(0)
    net = FieldNet.create(2, (8, 8), rng, context_dim=3)
    x, c = rng.standard_normal((5, 2)), rng.standard_normal((5, 3))
    _fd_check(net, x, rng.uniform(0.1, 1, 5), c, with_features)


def test_scorenet_is_scaled_noise_prediction():
    rng = np.random.default_rng(1)
    score = ScoreNet.create(2, (8,), rng, path=RECTIFIED)
    plain = FieldNet(score.spec, score.params, 2)
    x, t = rng.standard_normal((4, 2)), np.array([0.2, 0.4, 0.6, 0.9])
    np.testing.assert_allclose(score(x, t), -plain(x, t) / t[:, None], rtol=1e-14)
    _fd_check(score, x, t, None, False)


def test_single_row_squeezes():
    rng = np.random.default_rng(2)
    net = FieldNet.create(2, (8,), rng)
    assert net(np.zeros(2), 0.5).shape == (2,)
    assert net(np.zeros((3, 2)), 0.5).shape == (3, 2)


def test_missing_context_is_an_error():
    net = FieldNet.create(2, (8,), np.random.default_rng(3), context_dim=2)
    with pytest.raises(ValueError):
        net(np.zeros((1, 2)), 0.5)


def test_fieldnet_spec_validation():
    net = FieldNet.create(2, (8,), np.random.default_rng(4))
    with pytest.raises(ValueError):
        FieldNet(net.spec, net.params, 3)


def _token_net(score=False):
    rng = np.random.default_rng(6)
    return TokenFieldNet.create(2, 3, 2, 5, (8, 8), rng, score=score, path=RECTIFIED)


def test_token_net_shapes():
    net = _token_net()
    assert net.dim == 12
    cache = net.forward(np.zeros((4, 12)), 0.5, np.zeros((4, 5)))
    assert cache.output.shape == (4, 12)
    assert cache.features.shape == (4, 2, 3, 8)
    assert net(np.zeros(12), 0.5, np.zeros(5)).shape == (12,)


@pytest.mark.parametrize("score", [False, True])
@pytest.mark.parametrize("with_features", [False, True])
def test_token_net_gradients(score, with_features):
    net = _token_net(score)
    rng = np.random.default_rng(7)
    x, c = rng.standard_normal((3, 12)), rng.standard_normal((3, 5))
    _fd_check(net, x, rng.uniform(0.1, 1, 3), c, with_features)


def test_token_rows_differ_only_by_position():
    net = _token_net()
    x = np.random.default_rng(8).standard_normal((1, 12))
    inp, _, _ = net._inputs(x, 0.3, np.zeros((1, 5)))
    # every row carries the same chunk state and time; the one-hot block differs
    np.testing.assert_array_equal(inp[:, :12], np.repeat(x, 6, axis=0))
    np.testing.assert_array_equal(inp[:, 12:18], np.eye(6))
