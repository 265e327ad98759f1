import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import optimal_value
from smab.core import INITIAL_STATE, STOP, SpecError, compute_gain_table, validate_spec
from smab.engine import (
    ConfigError,
    DrawBlock,
    ExperimentConfig,
    RngStream,
    SpecEnvironment,
    make_policy,
    run_experiment,
    run_round,
)
from smab.policies import MALIGNANT, BenchmarkPolicy
from smab.scenarios import (
    MODALITIES,
    RISK_STATES,
    WE_JOINT_AB,
    CohortConfig,
    CohortEnvironment,
    coverage_function,
    default_coverage_instance,
    generate_cohort,
    modular_function,
    resolve_environment,
    risk_state_from_count,
    risk_state_from_score,
    scenario_spec,
    screening_env,
    submodular_env,
    worked_example_env,
)


class TestWorkedExample:
    def test_shape(self):
        spec = worked_example_env()
        assert spec.l_max == 3 and spec.actions == ("a", "b") and spec.feedbacks == ("-1", "1")
        assert len(spec.states) == 1 + 4 + 16
        assert spec.reward_mean[(1, INITIAL_STATE)] == 0.0

    def test_bayes_conditional(self):
        spec = worked_example_env()
        assert spec.feedback_dist[(2, "(a,1)", "b")][1] == pytest.approx(0.8, abs=1e-12)
        assert spec.feedback_dist[(2, "(a,-1)", "b")][1] == pytest.approx(0.4, abs=1e-12)

    def test_conditionals_remarginalize_to_joint(self):
        spec = worked_example_env()
        p1 = dict(zip(spec.feedbacks, spec.feedback_dist[(1, INITIAL_STATE, "a")]))
        for (f1, f2), joint in WE_JOINT_AB.items():
            x2 = spec.state_map[(1, INITIAL_STATE, "a", f1)]
            cond = dict(zip(spec.feedbacks, spec.feedback_dist[(2, x2, "b")]))
            assert abs(p1[f1] * cond[f2] - joint) <= 1e-12

    def test_values(self):
        table = compute_gain_table(worked_example_env())
        assert abs(table.benchmark_value - 9.2) <= 1e-9

    def test_initial_reward_override(self):
        spec = worked_example_env(initial_reward=3.0)
        assert compute_gain_table(spec).g[(1, INITIAL_STATE, STOP)] == 3.0


class TestSubmodular:
    def test_modular_selects_everything(self):
        items = ("i1", "i2", "i3")
        spec = submodular_env(items, dict.fromkeys(items, 0.5), modular_function)
        assert spec.l_max == 4 and all(c == 0.0 for c in spec.cost_mean.values())
        table = compute_gain_table(spec)
        env_draws = DrawBlock(RngStream(0, (0,)), 100, spec.l_max, "gaussian")
        env = SpecEnvironment(spec)
        for rho in range(1, 101):
            tr = run_round(BenchmarkPolicy(table), env, env_draws.round(rho), rho, check=True)
            assert tr.stop_stage == 4 and set(tr.actions[:-1]) == set(items)
        assert table.benchmark_value == pytest.approx(1.5, abs=1e-12)

    def test_empty_ground_set(self):
        spec = submodular_env((), {}, lambda chosen, s: 2.0)
        assert spec.l_max == 1
        assert compute_gain_table(spec).benchmark_value == 2.0

    def test_bad_prior(self):
        with pytest.raises(SpecError):
            submodular_env(("i",), {"i": 1.5}, modular_function)

    def test_states_exclude_repeats(self):
        items, priors, h = default_coverage_instance()
        spec = submodular_env(items, priors, h)
        for (t, x, a) in spec.feedback_dist:
            assert a not in x

    @pytest.mark.parametrize("budget", [1, 2, None])
    def test_greedy_guarantee(self, budget):
        items, priors, h = default_coverage_instance()
        spec = submodular_env(items, priors, h, budget=budget)
        table = compute_gain_table(spec)
        best = optimal_value(spec, 1, INITIAL_STATE)
        assert table.benchmark_value >= (1 - 1 / math.e) * best - 1e-9

    def test_two_item_coverage(self):
        h = coverage_function({"u": {1, 2}, "v": {2, 3}})
        spec = submodular_env(("u", "v"), {"u": 0.7, "v": 0.4}, h, budget=1)
        table = compute_gain_table(spec)
        # one pick: u covers 2 w.p. 0.7, v covers 2 w.p. 0.4
        assert table.benchmark_value == pytest.approx(1.4)
        assert table.benchmark_choice[(1, INITIAL_STATE)] == "u"


class TestScreening:
    @pytest.mark.parametrize("score,state", [(1, "very unlikely"), (2, "unlikely"), (3, "likely"),
                                             (4, "very likely"), (5, "very likely"), (6, "very likely")])
    def test_score_rule(self, score, state):
        assert risk_state_from_score(score) == state

    def test_count_rule(self):
        assert [risk_state_from_count(c) for c in range(5)] == [*RISK_STATES, RISK_STATES[-1]]

    def test_defaults(self):
        cfg = CohortConfig()
        assert cfg.prevalence == 0.0268
        assert cfg.cost["MG"] < cfg.cost["US"] and cfg.cost["MG"] < cfg.cost["MR"]
        assert cfg.reward_detection > cfg.reward_correct_negative > cfg.reward_false_alarm > cfg.reward_missed

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1])
    def test_bad_prevalence(self, p):
        with pytest.raises(SpecError):
            CohortConfig(prevalence=p)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(1e-4, 1 - 1e-4))
    def test_surrogate_valid_for_any_prevalence(self, p):
        spec, _ = screening_env(CohortConfig(prevalence=p, cohort_size=10), 0)
        validate_spec(spec)
        assert math.fsum(spec.initial_dist.values()) == pytest.approx(1.0)

    def test_surrogate_structure(self):
        spec, cohort = screening_env(rng=1)
        assert spec.l_max == 4 and spec.actions == MODALITIES and len(spec.feedbacks) == 6
        for (t, x, a, f), nxt in spec.state_map.items():
            if f == "4":
                assert nxt == "very likely"
        assert len(cohort) == 24484

    def test_cohort_prevalence(self):
        cohort = generate_cohort(CohortConfig(), np.random.default_rng(0))
        frac = sum(p.label == MALIGNANT for p in cohort) / len(cohort)
        assert frac == pytest.approx(0.0268, abs=0.004)

    def test_no_repeats_within_round(self):
        cfg = ExperimentConfig(env={"scenario": "screening"}, policy={"name": "fal"}, horizon=300,
                               replications=1, seed=2)
        env = resolve_environment(cfg.env, cfg.seed)
        assert isinstance(env, CohortEnvironment)
        learner_env = env.fresh("fal")
        pol = make_policy(cfg.policy, learner_env, 300)
        block = DrawBlock(RngStream(2, (0, 0)), 300, 4, "gaussian")
        for rho in range(1, 301):
            tr = run_round(pol, learner_env, block.round(rho), rho, check=True)
            moves = tr.actions[:-1]
            assert len(moves) == len(set(moves)) <= 3

    def test_run_has_no_regret(self):
        res = run_experiment(ExperimentConfig(env={"scenario": "screening"}, policy={"name": "guideline"},
                                              horizon=50, replications=2, seed=3))
        assert not res.has_regret
        assert np.isnan(res.pseudo_regret).all()


class TestResolution:
    def test_unknown_scenario(self):
        with pytest.raises(ConfigError):
            scenario_spec("lottery")

    def test_missing_path(self, tmp_path):
        with pytest.raises(ConfigError):
            resolve_environment({"path": str(tmp_path / "none.json")})

    def test_inline_and_path(self, tmp_path):
        spec = worked_example_env()
        spec.save(tmp_path / "we.json")
        a = resolve_environment({"path": str(tmp_path / "we.json")})
        b = resolve_environment({"inline": spec.to_json_dict()})
        assert a.table.benchmark_value == b.table.benchmark_value == pytest.approx(9.2)

    def test_random_scenario_seeded(self):
        assert scenario_spec("random", {"seed": 4}) == scenario_spec("random", {"seed": 4})
