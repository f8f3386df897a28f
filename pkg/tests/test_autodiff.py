import numpy as np
import pytest

from scdmd_lab.autodiff import (
    AdamWState,
    MlpParams,
    MlpSpec,
    OptimizerError,
    ShapeError,
    adamw_step,
    flatten_params,
    init_params,
    mlp_backward,
    mlp_forward,
    unflatten_params,
)
from scdmd_lab.gradcheck import central_difference, max_relative_error


def random_net(rng, dims=(2, 16, 16, 2), activation="silu"):
    spec = MlpSpec(dims[0], dims[1:-1], dims[-1], activation)
    params = MlpParams(spec, rng.uniform(-1, 1, spec.n_params))
    return spec, params


def naive_forward(spec, params, x):
    h = list(x)
    n_layers = len(params.weights)
    for k in range(n_layers):
        w, b = params.weights[k], params.biases[k]
        out = []
        for i in range(w.shape[0]):
            a = b[i]
            for j in range(w.shape[1]):
                a += w[i, j] * h[j]
            if k < n_layers - 1:
                a = np.tanh(a) if spec.activation == "tanh" else a / (1.0 + np.exp(-a))
            out.append(a)
        h = out
    return np.array(h)


def test_zero_network_outputs_zero():
    spec = MlpSpec(3, (5, 4), 2)
    params = MlpParams(spec, np.zeros(spec.n_params))
    out, feats = mlp_forward(spec, params, np.array([1.0, -2.0, 3.0]))
    assert np.array_equal(out, np.zeros(2))
    assert feats.shape == (4,)


def test_identity_tanh_at_origin():
    spec = MlpSpec(2, (2,), 2, "tanh")
    params = MlpParams(spec, np.zeros(spec.n_params))
    params.weights[0][...] = np.eye(2)
    params.weights[1][...] = np.eye(2)
    out, _ = mlp_forward(spec, params, np.zeros(2))
    assert np.array_equal(out, np.zeros(2))


@pytest.mark.parametrize("activation", ["tanh", "silu"])
def test_forward_matches_naive(activation):
    rng = np.random.default_rng(0)
    spec, params = random_net(rng, activation=activation)
    x = rng.uniform(-2, 2, 2)
    out, _ = mlp_forward(spec, params, x)
    np.testing.assert_allclose(out, naive_forward(spec, params, x), rtol=0, atol=1e-12)


def test_features_are_requested_hidden_layer():
    rng = np.random.default_rng(1)
    spec = MlpSpec(2, (3, 5), 2, "tanh", feature_layer_index=0)
    params = MlpParams(spec, rng.uniform(-1, 1, spec.n_params))
    x = rng.normal(size=2)
    _, feats = mlp_forward(spec, params, x)
    np.testing.assert_allclose(feats, np.tanh(params.weights[0] @ x + params.biases[0]))


def test_shape_errors():
    spec = MlpSpec(2, (4,), 1)
    params = init_params(spec, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        mlp_forward(spec, params, np.zeros(3))
    with pytest.raises(ShapeError):
        mlp_backward(spec, params, np.zeros(2), np.zeros(2))
    with pytest.raises(ShapeError):
        MlpSpec(2, (4,), 1, feature_layer_index=1)


def test_zero_cotangent_gives_zero_gradients():
    rng = np.random.default_rng(2)
    spec, params = random_net(rng)
    pg, ig = mlp_backward(spec, params, rng.normal(size=2), np.zeros(2))
    assert not pg.any() and not ig.any()


def test_linear_network_weight_gradient():
    spec = MlpSpec(3, (), 2)
    rng = np.random.default_rng(3)
    params = MlpParams(spec, rng.normal(size=spec.n_params))
    x, cot = rng.normal(size=3), rng.normal(size=2)
    pg, ig = mlp_backward(spec, params, x, cot)
    grad = unflatten_params(spec, pg)
    np.testing.assert_allclose(grad.weights[0], np.outer(cot, x))
    np.testing.assert_allclose(grad.biases[0], cot)
    np.testing.assert_allclose(ig, params.weights[0].T @ cot)


@pytest.mark.parametrize("activation", ["tanh", "silu"])
def test_backward_matches_finite_differences(activation):
    rng = np.random.default_rng(4)
    spec, params = random_net(rng, activation=activation)
    x, cot = rng.uniform(-2, 2, 2), rng.normal(size=2)
    pg, ig = mlp_backward(spec, params, x, cot)

    def f_params(flat):
        return float(cot @ mlp_forward(spec, MlpParams(spec, flat), x)[0])

    def f_input(xx):
        return float(cot @ mlp_forward(spec, params, xx)[0])

    assert max_relative_error(pg, central_difference(f_params, params.flat)) < 1e-4
    assert max_relative_error(ig, central_difference(f_input, x)) < 1e-4


def test_feature_cotangent_gradient():
    rng = np.random.default_rng(5)
    spec = MlpSpec(3, (6, 5, 4), 2, "silu", feature_layer_index=1)
    params = MlpParams(spec, rng.uniform(-1, 1, spec.n_params))
    x, cot, fcot = rng.normal(size=3), rng.normal(size=2), rng.normal(size=5)

    def f(flat):
        out, feats = mlp_forward(spec, MlpParams(spec, flat), x)
        return float(cot @ out + fcot @ feats)

    pg, _ = mlp_backward(spec, params, x, cot, fcot)
    assert max_relative_error(pg, central_difference(f, params.flat)) < 1e-4


def test_batched_gradient_is_sum_of_rows():
    rng = np.random.default_rng(6)
    spec, params = random_net(rng)
    xs, cots = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    pg, ig = mlp_backward(spec, params, xs, cots)
    rows = [mlp_backward(spec, params, xs[i], cots[i]) for i in range(4)]
    np.testing.assert_allclose(pg, sum(r[0] for r in rows), atol=1e-12)
    np.testing.assert_allclose(ig, np.stack([r[1] for r in rows]), atol=1e-12)


def test_forward_is_deterministic():
    rng = np.random.default_rng(7)
    spec, params = random_net(rng)
    x = rng.normal(size=(8, 2))
    a, _ = mlp_forward(spec, params, x)
    b, _ = mlp_forward(spec, params, x)
    assert a.tobytes() == b.tobytes()


def test_param_count_and_round_trip():
    spec = MlpSpec(2, (16,), 2)
    assert spec.n_params == 2 * 16 + 16 + 16 * 2 + 2 == 82
    params = init_params(spec, np.random.default_rng(0))
    back = unflatten_params(spec, flatten_params(params))
    assert back.flat.tobytes() == params.flat.tobytes()
    with pytest.raises(ShapeError):
        unflatten_params(spec, np.zeros(81))


def test_single_index_perturbation_changes_one_entry():
    spec = MlpSpec(2, (3,), 2)
    params = init_params(spec, np.random.default_rng(0))
    flat = flatten_params(params)
    for k in range(spec.n_params):
        v = flat.copy()
        v[k] += 1.0
        p = unflatten_params(spec, v)
        changed = sum(int((pw != w).sum()) for pw, w in zip(p.weights, params.weights))
        changed += sum(int((pb != b).sum()) for pb, b in zip(p.biases, params.biases))
        assert changed == 1


def test_adamw_zero_grad_no_decay_is_identity():
    spec = MlpSpec(2, (3,), 1)
    params = init_params(spec, np.random.default_rng(0))
    state = AdamWState.zeros(spec.n_params, learning_rate=0.1)
    new_state, new_params = adamw_step(state, params, np.zeros(spec.n_params))
    assert new_params.flat.tobytes() == params.flat.tobytes()
    assert not new_state.m.any() and not new_state.v.any()
    assert new_state.step == 1


def test_adamw_decoupled_decay():
    spec = MlpSpec(2, (3,), 1)
    params = init_params(spec, np.random.default_rng(0))
    state = AdamWState.zeros(spec.n_params, learning_rate=0.1, weight_decay=0.5)
    _, new_params = adamw_step(state, params, np.zeros(spec.n_params))
    np.testing.assert_allclose(new_params.flat, params.flat * (1 - 0.1 * 0.5))


def test_adamw_first_step_moves_by_lr():
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    spec = MlpSpec(1, (), 1)
    params = MlpParams(spec, np.array([1.0, 0.0]))
    state = AdamWState.zeros(2, learning_rate=0.1)
    _, new = adamw_step(state, params, np.array([1.0, 0.0]))
    assert new.flat[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
    assert new.flat[0] == pytest.approx(0.9, abs=1e-8)


def test_adamw_rejects_nonfinite_gradient():
    spec = MlpSpec(1, (), 1)
    params = MlpParams(spec, np.array([1.0, 0.0]))
    state = AdamWState.zeros(2)
    with pytest.raises(OptimizerError):
        adamw_step(state, params, np.array([np.nan, 0.0]))
    assert state.step == 0 and not state.m.any()
