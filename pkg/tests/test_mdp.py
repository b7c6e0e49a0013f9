import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import enumerate_optimum, forward_policy_value, random_mdp
from fed_ucbvi.envs import make_lower_bound_mdp
from fed_ucbvi.errors import InputError
from fed_ucbvi.mdp import (
    TabularMDP,
    dumps_mdp,
    evaluate_policy,
    loads_mdp,
    mdp_from_dict,
    optimal_values,
    sample_episode,
    validate_mdp,
)

GOLDEN = Path(__file__).parent / "golden"


def uniform_mdp(S=3, A=2, H=2):
    return TabularMDP(np.full((H, S, A, S), 1.0 / S), np.zeros((H, S, A)))


class TestValidate:
    def test_uniform_zero_reward_is_valid(self):
        assert validate_mdp(uniform_mdp()).ok

    def test_short_row_reported(self):
        kernel = np.full((2, 3, 2, 3), 1.0 / 3)
        kernel[1, 2, 0] = (0.3, 0.3, 0.3)
        report = validate_mdp(TabularMDP(kernel, np.zeros((2, 3, 2))))
        assert not report.ok
        assert report.where == (1, 2, 0)

    def test_reward_out_of_range(self):
        reward = np.zeros((2, 3, 2))
        reward[0, 1, 1] = 1.2
        report = validate_mdp(TabularMDP(np.full((2, 3, 2, 3), 1.0 / 3), reward))
        assert not report.ok and report.where == (0, 1, 1)
        assert "reward" in report.message

    def test_negative_entry(self):
        kernel = np.full((1, 2, 1, 2), 0.5)
        kernel[0, 0, 0] = (1.5, -0.5)
        assert validate_mdp(TabularMDP(kernel, np.zeros((1, 2, 1)))).where == (0, 0, 0)

    def test_bad_start_state(self):
        mdp = TabularMDP(np.full((1, 2, 1, 2), 0.5), np.zeros((1, 2, 1)), start_state=5)
        assert not validate_mdp(mdp).ok

    def test_shape_mismatch_raises(self):
        with pytest.raises(InputError):
            TabularMDP(np.full((1, 2, 1, 2), 0.5), np.zeros((1, 3, 1)))

    def test_no_silent_renormalisation(self):
        kernel = np.full((1, 2, 1, 2), 0.45)
        with pytest.raises(InputError, match="not a probability vector"):
            optimal_values(TabularMDP(kernel, np.zeros((1, 2, 1))))


class TestOptimalValues:
    @pytest.mark.parametrize("H, eps", [(2, 0.5), (5, 0.3), (10, 0.15)])
    def test_two_state_sink_closed_form(self, H, eps):
        flat, leaky = make_lower_bound_mdp(H, eps)
        assert optimal_values(flat)[0].V[0, 0] == pytest.approx(H, abs=1e-12)
        assert optimal_values(leaky)[0].V[0, 0] == pytest.approx((1 - (1 - eps) ** H) / eps, abs=1e-12)

    def test_two_state_h2_half(self):
        _, leaky = make_lower_bound_mdp(2, 0.5)
        assert optimal_values(leaky)[0].V[0, 0] == pytest.approx(1.5, abs=1e-12)

    def test_matches_enumeration_of_16_policies(self):
        rng = np.random.default_rng(7)
        mdp = random_mdp(rng, 2, 2, 2)
        values, _ = optimal_values(mdp)
        np.testing.assert_allclose(values.V[0], enumerate_optimum(mdp), atol=1e-12, rtol=0)

    def test_tie_break_lowest_action(self):
        reward = np.ones((2, 2, 3))
        values, policy = optimal_values(TabularMDP(np.full((2, 2, 3, 2), 0.5), reward))
        assert (policy == 0).all()
        assert values.V[0].tolist() == [2.0, 2.0]

    def test_terminal_row_zero(self):
        values, _ = optimal_values(random_mdp(np.random.default_rng(0), 3, 2, 4))
        assert (values.V[-1] == 0).all()


class TestEvaluatePolicy:
    def test_optimal_policy_fixed_point(self):
        mdp = random_mdp(np.random.default_rng(3), 4, 3, 5)
        values, policy = optimal_values(mdp)
        np.testing.assert_allclose(evaluate_policy(mdp, policy).V, values.V, atol=1e-12, rtol=0)

    def test_zero_rewards(self):
        mdp = TabularMDP(random_mdp(np.random.default_rng(1), 3, 2, 3).kernel, np.zeros((3, 3, 2)))
        assert not evaluate_policy(mdp, np.ones((3, 3), dtype=int)).V.any()

    def test_sink_unique_policy(self):
        _, leaky = make_lower_bound_mdp(5, 0.3)
        V = evaluate_policy(leaky, np.zeros((5, 2), dtype=int)).V
        assert V[0, 0] == pytest.approx((1 - 0.7**5) / 0.3, abs=1e-12)

    def test_matches_forward_occupancy(self):
        rng = np.random.default_rng(11)
        mdp = random_mdp(rng, 4, 3, 4)
        policy = rng.integers(0, 3, size=(4, 4))
        np.testing.assert_allclose(
            evaluate_policy(mdp, policy).V[0], forward_policy_value(mdp, policy), atol=1e-12, rtol=0
        )

    @pytest.mark.parametrize(
        "policy",
        [np.zeros((2, 3), dtype=int) + 2, np.zeros((3, 3), dtype=int), np.zeros((2, 3)) + 0.5],
    )
    def test_malformed_policy(self, policy):
        with pytest.raises(InputError):
            evaluate_policy(uniform_mdp(), policy)


mdp_shapes = st.tuples(st.integers(1, 4), st.integers(1, 3), st.integers(1, 5), st.integers(0, 2**32 - 1))


@settings(max_examples=40, deadline=None)
@given(mdp_shapes)
def test_value_range_and_fixed_point(shape):
    S, A, H, seed = shape
    mdp = random_mdp(np.random.default_rng(seed), S, A, H)
    values, policy = optimal_values(mdp)
    remaining = np.arange(H, -1, -1)[:, None]
    assert (values.V >= 0).all()
    assert (values.V <= remaining + 1e-12).all()
    assert np.abs(evaluate_policy(mdp, policy).V - values.V).max() <= 1e-12


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([(2, 2, 2), (2, 3, 2), (3, 2, 2), (2, 2, 3)]))
def test_backward_induction_equals_enumeration(seed, shape):
    S, A, H = shape
    mdp = random_mdp(np.random.default_rng(seed), S, A, H)
    assert np.abs(optimal_values(mdp)[0].V[0] - enumerate_optimum(mdp)).max() <= 1e-12


class TestSampleEpisode:
    def test_point_mass_kernel_gives_unique_path(self):
        H, S = 4, 3
        kernel = np.zeros((H, S, 1, S))
        for s in range(S):
            kernel[:, s, 0, (s + 1) % S] = 1.0
        reward = np.tile(np.array([0.1, 0.2, 0.3])[:, None], (H, 1, 1))
        mdp = TabularMDP(kernel, reward, start_state=1)
        steps = sample_episode(mdp, np.zeros((H, S), dtype=int), np.random.default_rng(0))
        assert [st.s for st in steps] == [1, 2, 0, 1]
        assert [st.s_next for st in steps] == [2, 0, 1, 2]
        assert [st.h for st in steps] == [0, 1, 2, 3]
        assert [st.r for st in steps] == [0.2, 0.3, 0.1, 0.2]

    def test_same_seed_same_trajectory(self):
        mdp = random_mdp(np.random.default_rng(2), 5, 3, 6)
        policy = np.random.default_rng(3).integers(0, 3, size=(6, 5))
        a = sample_episode(mdp, policy, np.random.default_rng(99))
        b = sample_episode(mdp, policy, np.random.default_rng(99))
        assert a == b

    def test_consumes_exactly_h_draws(self):
        mdp = random_mdp(np.random.default_rng(2), 3, 2, 7)
        rng = np.random.default_rng(5)
        sample_episode(mdp, np.zeros((7, 3), dtype=int), rng)
        ref = np.random.default_rng(5)
        ref.random(7)
        assert rng.random() == ref.random()

    def test_rewards_follow_table(self):
        mdp = random_mdp(np.random.default_rng(4), 4, 2, 5)
        policy = np.ones((5, 4), dtype=int)
        for step in sample_episode(mdp, policy, np.random.default_rng(1)):
            assert step.r == mdp.reward[step.h, step.s, step.a]
            assert step.a == policy[step.h][step.s]

    def test_next_state_frequencies_within_3_sigma(self):
        n = 100_000
        row = np.array([0.1, 0.25, 0.05, 0.4, 0.2])
        kernel = np.tile(row, (1, 5, 1, 1))
        mdp = TabularMDP(kernel, np.zeros((1, 5, 1)), start_state=2)
        rng = np.random.default_rng(2024)
        counts = np.zeros(5)
        policy = np.zeros((1, 5), dtype=int)
        for _ in range(n):
            counts[sample_episode(mdp, policy, rng)[0].s_next] += 1
        sigma = np.sqrt(row * (1 - row) / n)
        assert (np.abs(counts / n - row) <= 3 * sigma).all()


class TestSerialization:
    def test_round_trip(self):
        mdp = random_mdp(np.random.default_rng(8), 3, 2, 2, start_state=1)
        back = loads_mdp(dumps_mdp(mdp))
        assert back.start_state == 1
        np.testing.assert_array_equal(back.kernel, mdp.kernel)
        np.testing.assert_array_equal(back.reward, mdp.reward)

    def test_golden_file(self):
        data = json.loads((GOLDEN / "two_state_sink_H2_eps0.5.json").read_text())
        mdp = mdp_from_dict(data)
        _, leaky = make_lower_bound_mdp(2, 0.5)
        np.testing.assert_array_equal(mdp.kernel, leaky.kernel)
        assert optimal_values(mdp)[0].V[0, 0] == 1.5

    def test_declared_size_mismatch(self):
        data = json.loads(dumps_mdp(uniform_mdp()))
        data["S"] = 7
        with pytest.raises(InputError):
            mdp_from_dict(data)

    def test_invalid_rows_rejected_on_load(self):
        data = json.loads(dumps_mdp(uniform_mdp()))
        data["kernel"][0][0][0] = [0.5, 0.5, 0.5]
        with pytest.raises(InputError):
            mdp_from_dict(data)
