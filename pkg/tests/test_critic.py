import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mocha import fixtures, oracle
from mocha.critic import (
    CriticConfig,
    CriticState,
    batch_td_errors,
    run_critic,
    td_error_average,
    td_error_discounted,
    update_avg_reward_estimate,
)
from mocha.errors import ConfigError, DivergenceError, InputError, NonErgodicError
from mocha.momdp import MarkovStream, TabularMOMDP
from mocha.policy import FeatureMap, SoftmaxPolicy


def test_config_validation():
    with pytest.raises(ConfigError):
        CriticConfig(N=0)
    with pytest.raises(ConfigError):
        CriticConfig(D=0)
    with pytest.raises(ConfigError):
        CriticConfig(beta=-0.1)
    with pytest.raises(ConfigError):
        CriticConfig(mode="episodic")
    with pytest.raises(ConfigError):
        CriticConfig(beta_mu=0.0)


def test_step_size_warning():
    assert CriticConfig(beta=0.1).step_size_warning(lambda_A=0.5, C_A=1.0) is not None
    assert CriticConfig(beta=0.01).step_size_warning(lambda_A=0.5, C_A=1.0) is None


def test_td_error_zero_weights():
    z = np.zeros(3)
    e = np.eye(3)
    assert td_error_discounted(z, e[0], e[1], 0.7, 0.9) == 0.7
    assert td_error_average(z, e[0], e[1], 0.7, 0.2) == 0.7 - 0.2
    assert td_error_average(z, e[0], e[1], 0.7, 0.7) == 0.0


def test_td_error_self_loop_identity():
    w = np.array([0.0, 2.5, 0.0])
    phi = np.eye(3)[1]
    assert td_error_discounted(w, phi, phi, 0.3, 0.9) == pytest.approx(0.3 - 0.1 * 2.5, abs=1e-15)


def test_td_error_dimension_mismatch():
    with pytest.raises(InputError):
        td_error_discounted(np.zeros(3), np.zeros(2), np.zeros(3), 0.0, 0.9)
    with pytest.raises(InputError):
        td_error_average(np.zeros(3), np.zeros(3), np.zeros(4), 0.0, 0.0)


def test_td_error_with_exact_values_is_bellman_residual():
    # deterministic cycle 0 -> 1 -> 2 -> 0 with a self-loop action to stay aperiodic
    P = np.zeros((3, 2, 3))
    for s in range(3):
        P[s, 0, (s + 1) % 3] = 1.0
        P[s, 1, s] = 1.0
    R = np.array([[[0.2], [0.0]], [[0.5], [1.0]], [[0.9], [0.3]]])
    m = TabularMOMDP(P, R, [0.8], 1.0, np.full(3, 1 / 3))
    pi = np.array([[0.7, 0.3], [0.4, 0.6], [0.5, 0.5]])
    vals = oracle.exact_values_discounted(m, pi, 0)
    e = np.eye(3)
    for s in range(3):
        for a in range(2):
            s2 = int(np.argmax(P[s, a]))
            delta = td_error_discounted(vals.V, e[s], e[s2], R[s, a, 0], 0.8)
            # Q - V is the Bellman residual for a deterministic next state
            assert abs(delta - (vals.Q[s, a] - vals.V[s])) <= 1e-12


def test_avg_reward_estimate():
    assert update_avg_reward_estimate(0.3, [0.1, 0.5, 0.9], 1.0) == pytest.approx(0.5)
    mu = 0.0
    errs = []
    for _ in range(50):
        mu = update_avg_reward_estimate(mu, [0.4] * 3, 0.2)
        errs.append(abs(mu - 0.4))
    assert errs[-1] < 1e-4
    ratios = np.array(errs[1:10]) / np.array(errs[:9])
    assert np.allclose(ratios, 0.8)
    assert update_avg_reward_estimate(0.9, [5.0], 1.0, r_max=1.0) == 1.0
    with pytest.raises(InputError):
        update_avg_reward_estimate(0.0, [], 0.5)
    with pytest.raises(InputError):
        update_avg_reward_estimate(0.0, [1.0], 0.0)


def test_zero_step_size_keeps_weights(conflict5, rng):
    init = CriticState(rng.normal(size=(2, 5)))
    out = run_critic(conflict5, SoftmaxPolicy.tabular(5, 3), CriticConfig(beta=0.0, N=1, D=1), init, rng)
    assert np.array_equal(out.weights, init.weights)


def test_seed_determinism(conflict5):
    cfg = CriticConfig(beta=0.1, N=50, D=16)
    pol = SoftmaxPolicy.tabular(5, 3)
    a = run_critic(conflict5, pol, cfg, CriticState.zeros(2, 5), np.random.default_rng(9))
    b = run_critic(conflict5, pol, cfg, CriticState.zeros(2, 5), np.random.default_rng(9))
    assert np.array_equal(a.weights, b.weights) and a.last_state == b.last_state


def test_shared_samples_independent_of_objective_count(conflict5):
    cfg = CriticConfig(beta=0.1, N=30, D=8)
    pol = SoftmaxPolicy.tabular(5, 3)
    single = TabularMOMDP(conflict5.transition, conflict5.rewards[:, :, :1], conflict5.discounts[:1], 1.0,
                          conflict5.start_dist)
    counts, finals = [], []
    for m in (conflict5, single):
        stream = MarkovStream(m, np.random.default_rng(4), state=0)
        st_out = run_critic(m, pol, cfg, CriticState.zeros(m.num_objectives, 5), stream=stream)
        counts.append(stream.count)
        finals.append(st_out)
    assert counts == [30 * 8, 30 * 8]
    assert finals[0].last_state == finals[1].last_state
    # objectives are independent given the shared batch
    assert np.allclose(finals[0].weights[0], finals[1].weights[0], rtol=0, atol=1e-14)


def test_stream_continues_from_last_state(conflict5):
    cfg = CriticConfig(beta=0.1, N=3, D=4)
    pol = SoftmaxPolicy.tabular(5, 3)
    stream = MarkovStream(conflict5, np.random.default_rng(0), state=2)
    out = run_critic(conflict5, pol, cfg, CriticState.zeros(2, 5), stream=stream)
    assert out.last_state == stream.state
    assert stream.draw(pol, 1).states[0] == out.last_state


def test_divergence_names_objective(conflict5, rng):
    with pytest.raises(DivergenceError) as info:
        run_critic(conflict5, SoftmaxPolicy.tabular(5, 3), CriticConfig(beta=100.0, N=200, D=8),
                   CriticState.zeros(2, 5), rng)
    assert info.value.objective in (0, 1)
    assert "objective" in str(info.value)


def test_average_mode_rejects_tabular_features(conflict5, rng):
    with pytest.raises(ConfigError, match="ones"):
        run_critic(conflict5, SoftmaxPolicy.tabular(5, 3), CriticConfig(mode="average"),
                   CriticState.zeros(2, 5, "average"), rng)


def test_non_ergodic_is_config_error(rng):
    P = np.array([[[0.0, 1.0]], [[1.0, 0.0]]])
    m = TabularMOMDP(P, np.zeros((2, 1, 1)), [0.9], 1.0, [0.5, 0.5])
    with pytest.raises(NonErgodicError):
        run_critic(m, np.ones((2, 1)), CriticConfig(), CriticState.zeros(1, 2), rng)
    assert issubclass(NonErgodicError, ConfigError)


def test_weight_shape_checked(conflict5, rng):
    with pytest.raises(InputError):
        run_critic(conflict5, SoftmaxPolicy.tabular(5, 3), CriticConfig(), CriticState.zeros(2, 4), rng)


def _stationary_batches(m, pol, n_batches, D, rng):
    d = oracle.stationary_distribution(m, pol)
    for _ in range(n_batches):
        s0 = int(rng.choice(m.num_states, p=d))
        yield MarkovStream(m, rng, state=s0).draw(pol, D)


@pytest.mark.parametrize("mode", ["discounted", "average"])
def test_fixed_point_residual(conflict5, rng, mode):
    pol = SoftmaxPolicy.tabular(5, 3, rng.normal(size=15) * 0.5)
    fm = FeatureMap.tabular(5) if mode == "discounted" else FeatureMap.orthogonal_to_ones(5)
    W = np.array([oracle.td_fixed_point(conflict5, pol, fm, i, mode) for i in range(2)])
    mu = oracle.objective_vector(conflict5, pol, "average") if mode == "average" else None
    dirs = []
    for batch in _stationary_batches(conflict5, pol, 100, 32, rng):
        delta = batch_td_errors(W, mu, batch, fm.phi, conflict5.discounts, mode)
        dirs.append((delta.T @ fm.phi[batch.states]) / 32)
    dirs = np.array(dirs)  # (100, M, d)
    mean = dirs.mean(axis=0)
    se = dirs.std(axis=0, ddof=1) / np.sqrt(100)
    for i in range(2):
        assert np.linalg.norm(mean[i]) <= 3 * np.linalg.norm(se[i])


def test_average_reward_estimate_tracks_oracle(conflict5, rng):
    pol = SoftmaxPolicy.tabular(5, 3, rng.normal(size=15))
    cfg = CriticConfig(beta=0.05, N=2000, D=32, mode="average", beta_mu=0.05)
    out = run_critic(conflict5, pol, cfg, CriticState.zeros(2, 4, "average"), rng,
                     features=FeatureMap.orthogonal_to_ones(5))
    J = oracle.objective_vector(conflict5, pol, "average")
    assert np.all(np.abs(out.avg_reward_est - J) <= 0.02 * conflict5.r_max)
    assert np.all((out.avg_reward_est >= 0) & (out.avg_reward_est <= conflict5.r_max))


def test_average_mode_weights_near_fixed_point(conflict5, rng):
    pol = SoftmaxPolicy.tabular(5, 3)
    fm = FeatureMap.orthogonal_to_ones(5)
    cfg = CriticConfig(beta=0.1, N=2000, D=64, mode="average")
    out = run_critic(conflict5, pol, cfg, CriticState.zeros(2, 4, "average"), rng, features=fm)
    for i in range(2):
        w_star = oracle.td_fixed_point(conflict5, pol, fm, i, "average")
        assert np.sum((out.weights[i] - w_star) ** 2) <= 0.05 * max(np.sum(w_star**2), 1e-3)


@pytest.mark.parametrize("name", sorted(fixtures.SHIPPED))
def test_fixed_point_norm_bounds(name):
    m = fixtures.load(name)
    pol = SoftmaxPolicy.tabular(m.num_states, m.num_actions)
    for mode, fm in (("discounted", FeatureMap.tabular(m.num_states)),
                     ("average", FeatureMap.orthogonal_to_ones(m.num_states))):
        c = oracle.matrix_A_and_constants(m, pol, fm, mode)
        assert c.lambda_A > 0
        factor = 4.0 if mode == "average" else 2.0
        assert np.all(c.w_star_norms <= factor * m.r_max / c.lambda_A)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_batch_update_matches_per_sample_loop(seed):
    rng = np.random.default_rng(seed)
    m = fixtures.random_momdp(4, 2, 3, rng)
    pol = SoftmaxPolicy.tabular(4, 2, rng.normal(size=8))
    batch = MarkovStream(m, rng).draw(pol, 10)
    W = rng.normal(size=(3, 4))
    e = np.eye(4)
    delta = batch_td_errors(W, None, batch, e, m.discounts, "discounted")
    for k in range(10):
        for i in range(3):
            ref = td_error_discounted(W[i], e[batch.states[k]], e[batch.next_states[k]],
                                      batch.rewards[k, i], m.discounts[i])
            assert delta[k, i] == pytest.approx(ref, abs=1e-13)
