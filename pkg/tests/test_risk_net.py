import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_diff, rel_err
from stepfg import risk_net as rn


def _random_params(seed, input_dim=5, hidden=(6, 4)):
    rng = np.random.default_rng(seed)
    p = rn.init(rn.MlpConfig(input_dim, hidden, 0.0, seed))
    for b in p.biases:
        b[:] = rng.normal(0, 0.5, b.shape)
    p.mean = rng.normal(size=input_dim)
    p.std = rng.uniform(0.5, 2.0, input_dim)
    return p


def test_init_deterministic_and_shapes():
    a = rn.init(rn.MlpConfig(3, (2,), seed=1))
    b = rn.init(rn.MlpConfig(3, (2,), seed=1))
    for wa, wb in zip(a.weights, b.weights):
        np.testing.assert_array_equal(wa, wb)
    p = rn.init(rn.MlpConfig(3, (64, 32)))
    assert [w.shape for w in p.weights] == [(3, 64), (64, 32), (32, 1)]
    assert all(np.all(b == 0) for b in p.biases)
    assert len(p.biases) == 2  # no output bias


def test_init_glorot_bound():
    p = rn.init(rn.MlpConfig(10, (30,), seed=4))
    assert np.abs(p.weights[0]).max() <= np.sqrt(6 / 40)
    assert np.abs(p.weights[1]).max() <= np.sqrt(6 / 31)


def test_config_validation():
    with pytest.raises(ValueError):
        rn.MlpConfig(0)
    with pytest.raises(ValueError):
        rn.MlpConfig(3, dropout_rate=1.0)


def test_zero_weights_give_zero_score():
    p = rn.init(rn.MlpConfig(4, (5,)))
    for w in p.weights:
        w[:] = 0
    assert rn.forward(p, np.array([1.0, -2.0, 3.0, 0.5]))[0] == 0.0


def test_eval_mode_is_deterministic():
    p = _random_params(0)
    x = np.arange(5.0)
    assert rn.forward(p, x)[0] == rn.forward(p, x)[0]


def test_linear_net_is_dot_product_of_standardized_input():
    p = rn.init(rn.MlpConfig(3, (), seed=2))
    p.mean = np.array([1.0, 2.0, 3.0])
    p.std = np.array([2.0, 1.0, 0.5])
    x = np.array([0.3, -1.0, 4.0])
    expected = float(((x - p.mean) / p.std) @ p.weights[0][:, 0])
    assert rn.forward(p, x)[0] == pytest.approx(expected, rel=1e-15)
    w, b = p.linear_coefficients()
    assert float(w @ x + b) == pytest.approx(expected, rel=1e-12)


def test_dimension_mismatch():
    p = rn.init(rn.MlpConfig(3, (2,)))
    with pytest.raises(ValueError):
        rn.forward(p, np.zeros(4))


def test_training_with_dropout_needs_rng():
    p = rn.init(rn.MlpConfig(3, (8,), dropout_rate=0.5))
    with pytest.raises(ValueError):
        rn.forward(p, np.zeros(3), training=True)


def test_inverted_dropout_scaling():
    p = rn.init(rn.MlpConfig(2, (4000,), dropout_rate=0.25, seed=0))
    p.biases[0][:] = 1.0  # every hidden unit active
    x = np.zeros(2)
    _, cache = rn.forward(p, x, training=True, rng=np.random.default_rng(0))
    mask = cache.masks[0]
    assert set(np.unique(mask)) <= {0.0, 1.0 / 0.75}
    assert abs((mask == 0).mean() - 0.25) < 0.03


def test_standardization_constant_column():
    p = rn.init(rn.MlpConfig(2, (3,)))
    p.set_standardization(np.array([[1.0, 5.0], [3.0, 5.0]]))
    np.testing.assert_array_equal(p.mean, [2.0, 5.0])
    np.testing.assert_array_equal(p.std, [1.0, 1.0])


def _flat_params(p):
    return np.concatenate([a.ravel() for a in p.weights + p.biases])


def _set_flat(p, theta):
    i = 0
    for a in p.weights + p.biases:
        a[...] = theta[i:i + a.size].reshape(a.shape)
        i += a.size


@pytest.mark.parametrize("seed", range(10))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = _random_params(seed)
    x = rng.normal(size=(7, 5))
    up = rng.normal(size=7)
    _, cache = rn.forward(p, x)
    grads, dx = rn.backward(p, cache, up)
    analytic = np.concatenate([g.ravel() for g in grads["weights"] + grads["biases"]])

    q = p.copy()

    def f(theta):
        _set_flat(q, theta)
        return float(up @ rn.forward(q, x)[0])

    numeric = central_diff(f, _flat_params(p), eps=1e-5)
    assert rel_err(analytic, numeric) < 1e-6
    num_dx = central_diff(lambda z: float(up @ rn.forward(p, z)[0]), x, eps=1e-5)
    assert rel_err(dx, num_dx) < 1e-6


def test_backward_with_dropout_mask_matches_fd_under_fixed_mask():
    p = rn.init(rn.MlpConfig(4, (6,), dropout_rate=0.5, seed=1))
    x = np.random.default_rng(1).normal(size=(3, 4))
    _, cache = rn.forward(p, x, training=True, rng=np.random.default_rng(9))
    grads, _ = rn.backward(p, cache, np.ones(3))
    q = p.copy()

    def f(w0):
        q.weights[0][...] = w0
        return float(rn.forward(q, x, training=True, rng=np.random.default_rng(9))[0].sum())

    assert rel_err(grads["weights"][0], central_diff(f, p.weights[0], 1e-6)) < 1e-6


def test_zero_upstream_zero_grads():
    p = _random_params(3)
    _, cache = rn.forward(p, np.ones((4, 5)))
    grads, dx = rn.backward(p, cache, np.zeros(4))
    assert all(np.all(g == 0) for g in grads["weights"] + grads["biases"])
    assert np.all(dx == 0)


def test_dead_relu_unit_gets_no_gradient():
    p = rn.init(rn.MlpConfig(2, (3,), dropout_rate=0.0, seed=0))
    p.biases[0][:] = [-100.0, 1.0, 1.0]
    _, cache = rn.forward(p, np.array([0.1, 0.2]))
    grads, _ = rn.backward(p, cache, 1.0)
    assert np.all(grads["weights"][0][:, 0] == 0)
    assert grads["biases"][0][0] == 0
    assert grads["weights"][1][0, 0] == 0


def test_stale_cache_rejected():
    p = _random_params(0)
    _, cache = rn.forward(p, np.ones(5))
    grads, _ = rn.backward(p, cache, 1.0)
    rn.adam_step(p, grads, rn.AdamState.for_params(p, 1e-3))
    with pytest.raises(ValueError, match="stale"):
        rn.backward(p, cache, 1.0)


def test_output_homogeneous_in_final_weights():
    p = _random_params(5)
    x = np.random.default_rng(0).normal(size=(6, 5))
    s1 = rn.forward(p, x)[0]
    p.weights[-1] *= 2
    np.testing.assert_allclose(rn.forward(p, x)[0], 2 * s1, rtol=1e-14)


def test_adam_zero_grad_no_decay_is_fixed_point():
    p = _random_params(1)
    before = _flat_params(p)
    zero = {"weights": [np.zeros_like(w) for w in p.weights],
            "biases": [np.zeros_like(b) for b in p.biases]}
    rn.adam_step(p, zero, rn.AdamState.for_params(p, 0.1, weight_decay=0.0))
    np.testing.assert_array_equal(_flat_params(p), before)


def test_adam_first_step_is_signed_lr():
    p = rn.init(rn.MlpConfig(1, (), seed=0))
    p.weights[0][:] = 0.5
    g = {"weights": [np.array([[-3.7]])], "biases": []}
    state = rn.AdamState.for_params(p, 0.01, weight_decay=0.0)
    rn.adam_step(p, g, state)
    # bias-corrected m/sqrt(v) = g/|g| on the first step
    assert p.weights[0][0, 0] == pytest.approx(0.5 + 0.01, abs=1e-9)
    assert state.step == 1


def test_adam_decoupled_decay_shrinks_weights_only():
    p = _random_params(2)
    w0 = [w.copy() for w in p.weights]
    b0 = [b.copy() for b in p.biases]
    zero = {"weights": [np.zeros_like(w) for w in p.weights],
            "biases": [np.zeros_like(b) for b in p.biases]}
    rn.adam_step(p, zero, rn.AdamState.for_params(p, 0.1, weight_decay=0.01))
    for w, w_old in zip(p.weights, w0):
        np.testing.assert_allclose(w, w_old * (1 - 0.1 * 0.01), rtol=1e-15)
    for b, b_old in zip(p.biases, b0):
        np.testing.assert_array_equal(b, b_old)


def test_adam_shape_mismatch():
    p = _random_params(0)
    bad = {"weights": [np.zeros((1, 1))] * 3, "biases": [np.zeros_like(b) for b in p.biases]}
    with pytest.raises(ValueError):
        rn.adam_step(p, bad, rn.AdamState.for_params(p, 0.1))


def test_params_roundtrip_exact():
    p = _random_params(7)
    q = rn.MlpParams.from_dict(p.to_dict())
    x = np.random.default_rng(0).normal(size=(4, 5))
    np.testing.assert_array_equal(rn.forward(p, x)[0], rn.forward(q, x)[0])


def test_training_trajectory_deterministic():
    def run():
        p = rn.init(rn.MlpConfig(3, (4,), dropout_rate=0.2, seed=11))
        state = rn.AdamState.for_params(p, 0.01)
        rng = np.random.default_rng(0)
        x = np.linspace(-1, 1, 30).reshape(10, 3)
        for _ in range(20):
            s, cache = rn.forward(p, x, training=True, rng=rng)
            grads, _ = rn.backward(p, cache, s - 1.0)
            rn.adam_step(p, grads, state)
        return _flat_params(p)

    np.testing.assert_array_equal(run(), run())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(1, 6), min_size=0, max_size=3))
def test_batch_equals_rowwise(seed, hidden):
    p = rn.init(rn.MlpConfig(3, tuple(hidden), 0.0, seed))
    x = np.random.default_rng(seed).normal(size=(5, 3))
    batch = rn.forward(p, x)[0]
    rows = [rn.forward(p, r)[0] for r in x]
    np.testing.assert_allclose(batch, rows, rtol=1e-12, atol=1e-12)
