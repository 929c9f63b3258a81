import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mocha import fixtures, oracle
from mocha.errors import InputError, NonErgodicError
from mocha.momdp import (
    MarkovStream,
    TabularMOMDP,
    _walk,
    _walk_py,
    check_ergodic,
    joint_cumulative,
    require_ergodic,
    sample_trajectory,
    step,
    validate,
)
from mocha.policy import SoftmaxPolicy, deterministic_table


def _single_objective(P, r=None):
    P = np.asarray(P, dtype=float)
    S, A, _ = P.shape
    R = np.zeros((S, A, 1)) if r is None else np.asarray(r, dtype=float)
    return TabularMOMDP(P, R, discounts=[0.9], r_max=1.0, start_dist=np.full(S, 1.0 / S))


@pytest.mark.parametrize("name", sorted(fixtures.SHIPPED))
def test_shipped_fixtures_are_valid(name):
    assert validate(fixtures.load(name)) == []


@pytest.mark.parametrize("name", sorted(fixtures.SHIPPED))
def test_shipped_json_matches_constructor(name):
    loaded = TabularMOMDP.load(fixtures.fixture_path(name))
    built = fixtures.load(name)
    for field in ("transition", "rewards", "discounts", "start_dist"):
        assert np.array_equal(getattr(loaded, field), getattr(built, field))
    assert loaded.r_max == built.r_max


def test_json_schema_round_trip(tmp_path, conflict5):
    path = tmp_path / "m.json"
    conflict5.save(path)
    doc = json.loads(path.read_text())
    assert doc["num_states"] == 5 and doc["num_actions"] == 3 and doc["num_objectives"] == 2
    again = TabularMOMDP.load(path)
    assert np.array_equal(again.transition, conflict5.transition)
    assert np.array_equal(again.rewards, conflict5.rewards)


def test_from_dict_rejects_inconsistent_counts(conflict5):
    doc = conflict5.to_dict()
    doc["num_states"] = 4
    with pytest.raises(InputError, match="num_states"):
        TabularMOMDP.from_dict(doc)


def test_from_dict_missing_field(conflict5):
    doc = conflict5.to_dict()
    del doc["rewards"]
    with pytest.raises(InputError, match="rewards"):
        TabularMOMDP.from_dict(doc)


def test_validate_names_bad_row(conflict5):
    P = conflict5.transition.copy()
    P[0, 0] *= 0.9
    bad = TabularMOMDP(P, conflict5.rewards, conflict5.discounts, 1.0, conflict5.start_dist)
    report = validate(bad)
    assert len(report) == 1
    assert "row [0][0]" in report[0]


def test_validate_reward_bound(conflict5):
    R = conflict5.rewards.copy()
    R[1, 2, 0] = 1.5
    report = validate(TabularMOMDP(conflict5.transition, R, conflict5.discounts, 1.0, conflict5.start_dist))
    assert any("rewards[1][2][0]=1.5" in msg and "reward bound" in msg for msg in report)


def test_validate_discount_and_start(conflict5):
    bad = TabularMOMDP(conflict5.transition, conflict5.rewards, [1.0, 0.5], 1.0, np.full(5, 0.3))
    report = validate(bad)
    assert any("discounts[0]" in m for m in report)
    assert any("start_dist" in m for m in report)


def test_arrays_are_read_only(conflict5):
    with pytest.raises(ValueError):
        conflict5.transition[0, 0, 0] = 1.0


def test_step_point_mass(rng):
    P = np.zeros((3, 2, 3))
    P[:, 0, 2] = 1.0
    P[:, 1, 0] = 1.0
    m = _single_objective(P)
    for _ in range(50):
        assert step(m, 1, 0, rng)[0] == 2
        assert step(m, 2, 1, rng)[0] == 0


def test_step_uniform_frequencies(rng):
    m = _single_objective(np.full((4, 1, 4), 0.25))
    draws = np.array([step(m, 0, 0, rng)[0] for _ in range(100_000)])
    freq = np.bincount(draws, minlength=4) / draws.size
    assert np.all(np.abs(freq - 0.25) <= 0.02)


def test_step_empirical_tv_matches_kernel(conflict5, rng):
    draws = np.array([step(conflict5, 2, 1, rng)[0] for _ in range(100_000)])
    freq = np.bincount(draws, minlength=5) / draws.size
    assert 0.5 * np.abs(freq - conflict5.transition[2, 1]).sum() <= 0.02


def test_step_returns_rewards_and_checks_ids(conflict5, rng):
    _, r = step(conflict5, 4, 2, rng)
    assert np.array_equal(r, conflict5.rewards[4, 2])
    with pytest.raises(InputError):
        step(conflict5, 5, 0, rng)
    with pytest.raises(InputError):
        step(conflict5, 0, 3, rng)


def test_step_seed_determinism(conflict5):
    a = [step(conflict5, 0, 1, np.random.default_rng(7))[0] for _ in range(3)]
    r1, r2 = np.random.default_rng(7), np.random.default_rng(7)
    assert [step(conflict5, 0, 1, r1)[0] for _ in range(20)] == [step(conflict5, 0, 1, r2)[0] for _ in range(20)]
    assert len(set(a)) == 1


def test_trajectory_length_one(conflict5, rng):
    traj = sample_trajectory(conflict5, SoftmaxPolicy.tabular(5, 3), 3, 1, rng)
    assert len(traj) == 1 and traj[0].state == 3
    with pytest.raises(InputError):
        sample_trajectory(conflict5, SoftmaxPolicy.tabular(5, 3), 3, 0, rng)


def test_trajectory_chaining_and_bounds(conflict5, rng):
    traj = sample_trajectory(conflict5, SoftmaxPolicy.tabular(5, 3), 0, 2000, rng)
    assert traj[0].state == 0
    for prev, nxt in zip(traj, traj[1:]):
        assert prev.next_state == nxt.state
    rewards = np.array([t.reward_vec for t in traj])
    assert rewards.min() >= 0 and rewards.max() <= conflict5.r_max


def test_trajectory_seed_determinism_bytes(conflict5):
    pol = SoftmaxPolicy.tabular(5, 3, np.linspace(-1, 1, 15))

    def ser(seed):
        traj = sample_trajectory(conflict5, pol, 2, 300, np.random.default_rng(seed))
        return json.dumps([[t.state, t.action, t.reward_vec.tolist(), t.next_state] for t in traj])

    assert ser(3) == ser(3)
    assert ser(3) != ser(4)


def test_trajectory_frequencies_match_stationary(conflict5, rng):
    pol = SoftmaxPolicy.tabular(5, 3, rng.normal(size=15))
    traj = MarkovStream(conflict5, rng, state=0).draw(pol, 100_000)
    freq = np.bincount(traj.states, minlength=5) / 100_000
    d = oracle.stationary_distribution(conflict5, pol)
    assert 0.5 * np.abs(freq - d).sum() <= 0.02


def test_stream_continues_and_counts(conflict5, rng):
    stream = MarkovStream(conflict5, rng)
    pol = SoftmaxPolicy.tabular(5, 3)
    a = stream.draw(pol, 10)
    b = stream.draw(pol, 7)
    assert b.states[0] == a.next_states[-1]
    assert stream.count == 17
    assert stream.state == b.next_states[-1]
    assert len(stream.draw(pol, 0)) == 0 and stream.count == 17


def test_compiled_walk_matches_python(conflict5, rng):
    pi = SoftmaxPolicy.tabular(5, 3, rng.normal(size=15)).probs()
    cum = joint_cumulative(conflict5, pi)
    u = rng.random(5000)
    out = [(np.empty(5000, np.int64), np.empty(5000, np.int64)) for _ in range(2)]
    end_a = _walk(cum, 1, u, *out[0])
    end_b = _walk_py(cum, 1, u, *out[1])
    assert end_a == end_b
    assert np.array_equal(out[0][0], out[1][0]) and np.array_equal(out[0][1], out[1][1])


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_stream_chaining_property(S, A, seed):
    rng = np.random.default_rng(seed)
    m = fixtures.random_momdp(S, A, 2, rng)
    batch = MarkovStream(m, rng).draw(SoftmaxPolicy.tabular(S, A, rng.normal(size=S * A)), 200)
    assert np.array_equal(batch.next_states[:-1], batch.states[1:])
    assert np.all(m.transition[batch.states, batch.actions, batch.next_states] > 0)
    assert np.array_equal(batch.rewards, m.rewards[batch.states, batch.actions])


def test_ergodic_fully_connected(conflict5):
    assert check_ergodic(conflict5, SoftmaxPolicy.tabular(5, 3)).ergodic


def test_disconnected_blocks_report_pair():
    P = np.zeros((4, 1, 4))
    P[0, 0, :2] = P[1, 0, :2] = 0.5
    P[2, 0, 2:] = P[3, 0, 2:] = 0.5
    rep = check_ergodic(_single_objective(P), np.ones((4, 1)))
    assert not rep.ergodic and not rep.irreducible
    assert rep.unreachable == (0, 2)
    with pytest.raises(NonErgodicError, match="reducible"):
        require_ergodic(_single_objective(P), np.ones((4, 1)))


def test_two_cycle_is_periodic():
    P = np.array([[[0.0, 1.0]], [[1.0, 0.0]]])
    rep = check_ergodic(_single_objective(P), np.ones((2, 1)))
    assert rep.irreducible and not rep.aperiodic and rep.period == 2
    with pytest.raises(NonErgodicError, match="period 2"):
        require_ergodic(_single_objective(P), np.ones((2, 1)))


def test_deterministic_policy_can_break_ergodicity(conflict5):
    # "stay" everywhere keeps most of the mass put but uniform noise keeps it ergodic
    assert check_ergodic(conflict5, deterministic_table([2] * 5, 3)).ergodic
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = P[1, 0, 1] = 1.0
    P[0, 1, 1] = P[1, 1, 0] = 1.0
    m = _single_objective(P)
    assert not check_ergodic(m, deterministic_table([0, 0], 2)).irreducible
    assert check_ergodic(m, np.full((2, 2), 0.5)).ergodic
