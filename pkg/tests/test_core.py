import dataclasses
import math

import pytest
from hypothesis import given, settings, strategies as st

from oracles import ex_ante_reward
from smab.core import (
    INITIAL_STATE,
    STOP,
    EnvironmentSpec,
    NoiseModel,
    SpecError,
    compute_gain_table,
    reachable_pairs,
    validate_spec,
)
from smab.scenarios import random_env, worked_example_env


def tiny_spec(**overrides):
    """Two stages, one action, a coin-flip feedback."""
    base = dict(
        l_max=2,
        states=(INITIAL_STATE, "hi", "lo"),
        actions=("a",),
        feedbacks=("+", "-"),
        feedback_dist={(1, INITIAL_STATE, "a"): (0.25, 0.75)},
        state_map={(1, INITIAL_STATE, "a", "+"): "hi", (1, INITIAL_STATE, "a", "-"): "lo"},
        cost_mean={(1, INITIAL_STATE, "a"): 0.5},
        reward_mean={(1, INITIAL_STATE): 1.0, (2, "hi"): 8.0, (2, "lo"): 0.0},
        c_max=1.0,
        r_max=8.0,
    )
    base.update(overrides)
    return EnvironmentSpec(**base)


class TestValidation:
    def test_tiny_spec_is_valid(self):
        assert validate_spec(tiny_spec()).K == 2 * 3 * 2

    def test_unnormalized_vector_reports_location_and_residual(self):
        spec = tiny_spec(feedback_dist={(1, INITIAL_STATE, "a"): (0.25, 0.7)})
        with pytest.raises(SpecError) as err:
            validate_spec(spec)
        assert err.value.location == (1, INITIAL_STATE, "a")
        assert "-0.05" in str(err.value)

    def test_normalization_tolerance(self):
        validate_spec(tiny_spec(feedback_dist={(1, INITIAL_STATE, "a"): (0.25 + 5e-10, 0.75)}))
        with pytest.raises(SpecError):
            validate_spec(tiny_spec(feedback_dist={(1, INITIAL_STATE, "a"): (0.25 + 5e-9, 0.75)}))

    def test_partial_state_map(self):
        spec = tiny_spec(state_map={(1, INITIAL_STATE, "a", "+"): "hi"})
        with pytest.raises(SpecError, match="not total") as err:
            validate_spec(spec)
        assert err.value.location == (1, INITIAL_STATE, "a", "-")

    def test_undeclared_target_state(self):
        sm = {(1, INITIAL_STATE, "a", "+"): "hi", (1, INITIAL_STATE, "a", "-"): "nowhere"}
        with pytest.raises(SpecError, match="undeclared"):
            validate_spec(tiny_spec(state_map=sm))

    def test_reward_out_of_range(self):
        rm = {(1, INITIAL_STATE): 1.0, (2, "hi"): 9.0, (2, "lo"): 0.0}
        with pytest.raises(SpecError, match="r_max") as err:
            validate_spec(tiny_spec(reward_mean=rm))
        assert err.value.location == (2, "hi")

    def test_negative_cost(self):
        with pytest.raises(SpecError, match="c_max"):
            validate_spec(tiny_spec(cost_mean={(1, INITIAL_STATE, "a"): -0.1}))

    def test_stop_cannot_be_declared(self):
        with pytest.raises(SpecError, match="implicit"):
            validate_spec(tiny_spec(actions=("a", STOP)))

    def test_empty_actions_only_for_single_stage(self):
        with pytest.raises(SpecError, match="empty"):
            validate_spec(tiny_spec(actions=()))
        single = EnvironmentSpec(
            l_max=1, states=(INITIAL_STATE,), actions=(), feedbacks=("f",), feedback_dist={},
            state_map={}, cost_mean={}, reward_mean={(1, INITIAL_STATE): 3.0}, c_max=0.0, r_max=3.0)
        assert compute_gain_table(validate_spec(single)).benchmark_value == 3.0

    def test_unknown_noise_family(self):
        with pytest.raises(SpecError, match="noise"):
            validate_spec(tiny_spec(noise=NoiseModel("cauchy", 1.0)))

    def test_feedback_past_last_stage(self):
        fd = {(1, INITIAL_STATE, "a"): (0.25, 0.75), (2, "hi", "a"): (0.5, 0.5)}
        with pytest.raises(SpecError, match="stage"):
            validate_spec(tiny_spec(feedback_dist=fd))


class TestSpecMechanics:
    def test_continuation_actions_empty_at_last_stage(self):
        spec = tiny_spec()
        assert spec.continuation_actions(1, INITIAL_STATE) == ("a",)
        assert spec.continuation_actions(2, "hi") == ()

    @pytest.mark.parametrize("u,expected", [(0.0, 0), (0.2499, 0), (0.25, 1), (0.9999, 1)])
    def test_inverse_cdf(self, u, expected):
        assert tiny_spec().sample_feedback_index(1, INITIAL_STATE, "a", u) == expected

    def test_transition(self):
        assert tiny_spec().transition(1, INITIAL_STATE, "a", "-") == "lo"

    def test_reachable_pairs(self):
        assert reachable_pairs(tiny_spec()) == {(1, INITIAL_STATE), (2, "hi"), (2, "lo")}

    def test_json_roundtrip_worked_example(self):
        spec = worked_example_env(NoiseModel("bounded-uniform", 0.3))
        again = EnvironmentSpec.loads(spec.dumps())
        assert again == spec

    def test_json_roundtrip_keeps_initial_distribution(self):
        spec = dataclasses.replace(tiny_spec(), states=(INITIAL_STATE, "hi", "lo"),
                                   initial_dist={INITIAL_STATE: 1.0})
        assert EnvironmentSpec.loads(spec.dumps()).initial_dist == {INITIAL_STATE: 1.0}

    def test_save_load(self, tmp_path):
        spec = worked_example_env()
        spec.save(tmp_path / "we.json")
        assert EnvironmentSpec.load(tmp_path / "we.json") == spec

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_random_specs_roundtrip(self, seed):
        spec = random_env(seed)
        assert EnvironmentSpec.loads(spec.dumps()) == spec


class TestGainTable:
    def test_tiny_values(self):
        table = compute_gain_table(tiny_spec())
        # y = 0.25 * 8, g = y - 0.5; stop gains the stage-1 reward 1
        assert table.y[(1, INITIAL_STATE, "a")] == pytest.approx(2.0, abs=1e-12)
        assert table.g[(1, INITIAL_STATE, "a")] == pytest.approx(1.5, abs=1e-12)
        assert table.g[(1, INITIAL_STATE, STOP)] == 1.0
        assert table.optimal_set[(1, INITIAL_STATE)] == ("a",)
        assert table.delta[(1, INITIAL_STATE, STOP)] == pytest.approx(0.5, abs=1e-12)
        assert table.benchmark_value == pytest.approx(1.5, abs=1e-12)

    def test_worked_example_gains(self):
        table = compute_gain_table(worked_example_env())
        assert table.g[(1, INITIAL_STATE, "a")] == pytest.approx(5.0, abs=1e-12)
        assert table.g[(1, INITIAL_STATE, "b")] == pytest.approx(2.0, abs=1e-12)
        assert table.g[(1, INITIAL_STATE, STOP)] == 0.0
        assert table.mu_lower[(1, INITIAL_STATE, "b")] == pytest.approx(-2.0, abs=1e-12)
        assert table.omega[(1, INITIAL_STATE, "b")] == pytest.approx(11.2, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_y_matches_explicit_summation(self, seed):
        spec = random_env(seed)
        table = compute_gain_table(spec)
        for (t, x, a), y in table.y.items():
            assert abs(y - ex_ante_reward(spec, t, x, a)) <= 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_gap_and_optimal_set_invariants(self, seed):
        table = compute_gain_table(random_env(seed))
        for t, x in table.pairs:
            avail = table.available(t, x)
            assert table.optimal_set[(t, x)]
            for a in avail:
                assert table.delta[(t, x, a)] >= 0
                assert (table.delta[(t, x, a)] <= 1e-12) == (a in table.optimal_set[(t, x)])
            assert table.g_star[(t, x)] == max(table.g[(t, x, a)] for a in avail)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_omega_nonnegative(self, seed):
        table = compute_gain_table(random_env(seed))
        assert min(table.omega.values()) >= -1e-12

    def test_to_json_has_every_pair(self):
        table = compute_gain_table(worked_example_env())
        doc = table.to_json_dict()
        assert math.isclose(doc["benchmark_value"], 9.2, abs_tol=1e-9)
        assert sum(len(v) for v in doc["stages"].values()) == len(table.pairs)
