"""Action-selection strategies.

Every policy follows the same small protocol used by the engine:

* ``begin_round(round_index, context)`` is called once before stage 1,
* ``select(t, x)`` returns a continuation action or ``STOP``,
* ``observe(trace)`` receives the completed round with realized outcomes.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from itertools import permutations
from typing import TYPE_CHECKING, Callable, Mapping, Sequence

from .core import STOP, GainTable

if TYPE_CHECKING:
    from .analysis import ConfidenceMonitor
    from .engine import RoundTrace

MASK_MODES = ("none", "once-per-round")


class PolicyConfigError(ValueError):
    pass


class BasePolicy:
    def begin_round(self, round_index: int, context: Mapping | None = None) -> None:
        pass

    def select(self, t: int, x: str) -> str:
        raise NotImplementedError

    def observe(self, trace: "RoundTrace") -> None:
        pass


# -- benchmark ---------------------------------------------------------------


def benchmark_action(t: int, x: str, table: GainTable) -> str:
    """Greedy oracle choice: stop if stop maximizes the gain, else the best continuation.

    Ties among continuation actions go to the larger benchmark continuation
    value, then to declared action order.
    """
    if t >= table.l_max:
        return STOP
    return table.benchmark_choice[(t, x)]


class BenchmarkPolicy(BasePolicy):
    def __init__(self, table: GainTable):
        self.table = table

    def select(self, t: int, x: str) -> str:
        return benchmark_action(t, x, self.table)


# -- FAL ---------------------------------------------------------------------


@dataclass
class FalParams:
    delta: float = 0.05
    sigma: float = 1.0
    epsilon_stop_bias: float = 0.0
    action_mask_mode: str = "none"

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise PolicyConfigError(f"delta must be in (0, 1), got {self.delta!r}")
        if self.sigma < 0:
            raise PolicyConfigError(f"sigma must be nonnegative, got {self.sigma!r}")
        if self.epsilon_stop_bias < 0:
            raise PolicyConfigError("stop bias must be nonnegative")
        if self.action_mask_mode not in MASK_MODES:
            raise PolicyConfigError(f"unknown mask mode {self.action_mask_mode!r}")


@dataclass
class FalStats:
    """Counters and sample means kept by FAL.

    The stop action's gain estimate is the terminal-reward estimate of its
    stage-state pair and is never stored separately.
    """

    l_max: int
    states: tuple[str, ...]
    actions: tuple[str, ...]
    n_state: dict[tuple[int, str], int] = field(default_factory=dict)
    n_action: dict[tuple[int, str, str], int] = field(default_factory=dict)
    r_hat: dict[tuple[int, str], float] = field(default_factory=dict)
    g_hat: dict[tuple[int, str, str], float] = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.l_max * len(self.states) * (len(self.actions) + 1)

    def estimate(self, t: int, x: str, a: str) -> float:
        if a == STOP:
            return self.r_hat.get((t, x), 0.0)
        return self.g_hat.get((t, x, a), 0.0)

    def confidence_count(self, t: int, x: str, a: str) -> int:
        """Counter entering the confidence number: N_{t,x} for stop, N_{t,x,a} otherwise."""
        if a == STOP:
            return self.n_state.get((t, x), 0)
        return self.n_action.get((t, x, a), 0)

    def snapshot(self) -> "FalStats":
        return copy.deepcopy(self)

    def to_json_dict(self) -> dict:
        def nest(d):
            out: dict = {}
            for key, v in sorted(d.items(), key=lambda kv: tuple(map(str, kv[0]))):
                node = out
                for k in key[:-1]:
                    node = node.setdefault(str(k), {})
                node[str(key[-1])] = v
            return out

        return {
            "l_max": self.l_max,
            "n_state": nest(self.n_state),
            "n_action": nest(self.n_action),
            "r_hat": nest(self.r_hat),
            "g_hat": nest(self.g_hat),
        }


def confidence_number(count: int, sigma: float, delta: float, K: int) -> float:
    """Width of the confidence interval after ``count`` samples; infinite when unexplored."""
    if count <= 0:
        return math.inf
    return math.sqrt((1.0 + count) / count**2 * 4.0 * sigma**2
                     * math.log(K * math.sqrt(1.0 + count) / delta))


def fal_confidence(t: int, x: str, a: str, stats: FalStats, params: FalParams) -> float:
    return confidence_number(stats.confidence_count(t, x, a), params.sigma, params.delta, stats.K)


def fal_action(t: int, x: str, stats: FalStats, params: FalParams,
               available: Sequence[str], used: Sequence[str] = (),
               conf: Callable[[int], float] | None = None) -> str:
    """Pick the action with the largest upper confidence bound at (t, x).

    Stop wins every tie it takes part in, including the all-infinite tie of
    a fresh state. Continuation ties go to declared order. With the
    once-per-round mask, actions in ``used`` are not eligible.
    """
    if t >= stats.l_max:
        return STOP
    if conf is None:
        def conf(n):
            return confidence_number(n, params.sigma, params.delta, stats.K)
    cands = available
    if params.action_mask_mode == "once-per-round" and used:
        cands = [a for a in available if a not in used]
    if not cands:
        return STOP
    best, best_u = None, -math.inf
    for a in cands:
        u = stats.g_hat.get((t, x, a), 0.0) + conf(stats.n_action.get((t, x, a), 0))
        if u > best_u or best is None:
            best, best_u = a, u
    u_stop = stats.r_hat.get((t, x), 0.0) + conf(stats.n_state.get((t, x), 0)) + params.epsilon_stop_bias
    if u_stop >= best_u:
        return STOP
    return best


def fal_update(stats: FalStats, trace: "RoundTrace") -> list[tuple[int, str, str]]:
    """Absorb one round into the running means and counters.

    Returns the triplets whose estimates changed (stop stands for the
    terminal-reward estimate of its pair).
    """
    T = trace.stop_stage
    touched = []
    for t in range(1, T + 1):
        x = trace.states[t - 1]
        key = (t, x)
        n = stats.n_state.get(key, 0) + 1
        old = stats.r_hat.get(key, 0.0)
        stats.r_hat[key] = old + (trace.realized_rewards[t - 1] - old) / n
        stats.n_state[key] = n
        touched.append((t, x, STOP))
    for t in range(1, T):
        x = trace.states[t - 1]
        a = trace.actions[t - 1]
        key3 = (t, x, a)
        n = stats.n_action.get(key3, 0) + 1
        old = stats.g_hat.get(key3, 0.0)
        sample = trace.realized_rewards[t] - trace.realized_costs[t - 1]
        stats.g_hat[key3] = old + (sample - old) / n
        stats.n_action[key3] = n
        touched.append(key3)
    end = (T, trace.states[T - 1], STOP)
    stats.n_action[end] = stats.n_action.get(end, 0) + 1
    return touched


class FalPolicy(BasePolicy):
    """Feedback Adaptive Learning.

    ``actions_at(t, x)`` lists the continuation actions available at a pair;
    by default every declared action is available below l_max.
    """

    def __init__(self, l_max: int, states: Sequence[str], actions: Sequence[str], params: FalParams,
                 actions_at: Callable[[int, str], Sequence[str]] | None = None,
                 monitor: "ConfidenceMonitor | None" = None):
        self.params = params
        self.stats = FalStats(l_max=l_max, states=tuple(states), actions=tuple(actions))
        self.actions_at = actions_at or (lambda t, x: self.stats.actions)
        self.monitor = monitor
        self._conf_cache: list[float] = [math.inf]
        self._round = 0
        self._used: list[str] = []

    def conf(self, n: int) -> float:
        cache = self._conf_cache
        while len(cache) <= n:
            cache.append(confidence_number(len(cache), self.params.sigma, self.params.delta, self.stats.K))
        return cache[n]

    def begin_round(self, round_index: int, context: Mapping | None = None) -> None:
        self._round = round_index
        self._used = []

    def select(self, t: int, x: str) -> str:
        a = fal_action(t, x, self.stats, self.params, self.actions_at(t, x), self._used, self.conf)
        if a != STOP:
            self._used.append(a)
        if self.monitor is not None:
            self.monitor.on_select(self._round, t, x, a, self.conf(self.stats.confidence_count(t, x, a)))
        return a

    def observe(self, trace: "RoundTrace") -> None:
        touched = fal_update(self.stats, trace)
        if self.monitor is not None:
            s = self.stats
            for t, x, a in touched:
                self.monitor.on_update(trace.round_index, t, x, a, s.estimate(t, x, a),
                                       s.confidence_count(t, x, a))


# -- open-loop and clinical baselines ---------------------------------------


def fixed_sequence_action(seq: Sequence[str], t: int) -> str:
    """Play ``seq`` stage by stage, then stop."""
    if t <= len(seq):
        return seq[t - 1]
    return STOP


class FixedSequencePolicy(BasePolicy):
    def __init__(self, seq: Sequence[str], l_max: int):
        if len(seq) >= l_max:
            raise PolicyConfigError(f"sequence of length {len(seq)} does not fit in l_max = {l_max}")
        self.seq = tuple(seq)

    def select(self, t: int, x: str) -> str:
        return fixed_sequence_action(self.seq, t)


def guideline_plan(breast_density: bool, high_risk: bool) -> tuple[str, ...]:
    plan = ["MG"]
    if breast_density:
        plan.append("US")
    if high_risk:
        plan.append("MR")
    return tuple(plan)


def guideline_action(initial_state: str, breast_density: bool, high_risk: bool, t: int) -> str:
    """Clinical guideline: mammogram first, ultrasound for dense tissue, MRI for high risk."""
    return fixed_sequence_action(guideline_plan(breast_density, high_risk), t)


class GuidelinePolicy(BasePolicy):
    def __init__(self):
        self._plan: tuple[str, ...] = ("MG",)

    def begin_round(self, round_index: int, context: Mapping | None = None) -> None:
        context = context or {}
        self._plan = guideline_plan(bool(context.get("dense")), bool(context.get("high_risk")))

    def select(self, t: int, x: str) -> str:
        return fixed_sequence_action(self._plan, t)


# -- contextual UCB1 over composite arms --------------------------------------


def composite_arms(actions: Sequence[str], max_len: int | None = None) -> list[tuple[str, ...]]:
    """All orderings of all nonempty subsets, shortest first, lexicographic in action order."""
    max_len = len(actions) if max_len is None else min(max_len, len(actions))
    arms = []
    for k in range(1, max_len + 1):
        arms.extend(permutations(actions, k))
    return arms


def ucb1_index(mean: float, plays: int, total: int) -> float:
    if plays == 0:
        return math.inf
    return mean + math.sqrt(2.0 * math.log(total) / plays)


@dataclass
class ArmStats:
    arms: list[tuple[str, ...]]
    plays: list[int] = field(default_factory=list)
    means: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.plays:
            self.plays = [0] * len(self.arms)
            self.means = [0.0] * len(self.arms)

    def update(self, i: int, reward: float) -> None:
        self.plays[i] += 1
        self.means[i] += (reward - self.means[i]) / self.plays[i]


def ucb1_index_choice(stats: ArmStats) -> int:
    for i, n in enumerate(stats.plays):
        if n == 0:
            return i
    total = sum(stats.plays)
    best, best_u = 0, -math.inf
    for i, (m, n) in enumerate(zip(stats.means, stats.plays)):
        u = ucb1_index(m, n, total)
        if u > best_u:
            best, best_u = i, u
    return best


def ucb1_action(context: str, arm_stats: Mapping[str, ArmStats]) -> tuple[str, ...]:
    """Composite arm chosen by the UCB1 instance of ``context``."""
    stats = arm_stats[context]
    return stats.arms[ucb1_index_choice(stats)]


class Ucb1ContextPolicy(BasePolicy):
    """One UCB1 learner per initial state; each arm is a whole test sequence.

    The arm's reward is the realized utility of the round (terminal reward
    minus costs).
    """

    def __init__(self, actions: Sequence[str], l_max: int):
        self.arms = composite_arms(actions, l_max - 1)
        self.arm_stats: dict[str, ArmStats] = {}
        self._context = ""
        self._arm = 0

    def begin_round(self, round_index: int, context: Mapping | None = None) -> None:
        context = context or {}
        self._context = str(context.get("initial_state", ""))
        stats = self.arm_stats.setdefault(self._context, ArmStats(list(self.arms)))
        self._arm = ucb1_index_choice(stats)

    def select(self, t: int, x: str) -> str:
        return fixed_sequence_action(self.arms[self._arm], t)

    def observe(self, trace: "RoundTrace") -> None:
        self.arm_stats[self._context].update(self._arm, trace.utility)


# -- terminal predictors -----------------------------------------------------

MALIGNANT = "malignant"
BENIGN = "benign"


class ThresholdPredictor:
    """Malignant iff some observed score is at least ``threshold``."""

    def __init__(self, threshold: int = 4):
        self.threshold = threshold

    def predict(self, scores: Sequence[int], state: str | None = None) -> str:
        return MALIGNANT if scores and max(scores) >= self.threshold else BENIGN

    def learn(self, state: str, label: str) -> None:
        pass


class FrequencyPredictor:
    """Majority label of the empirical label table keyed by the terminal state."""

    def __init__(self):
        self.counts: dict[str, list[int]] = {}

    def predict(self, scores: Sequence[int], state: str | None = None) -> str:
        benign, malignant = self.counts.get(state, (0, 0))
        return MALIGNANT if malignant > benign else BENIGN

    def learn(self, state: str, label: str) -> None:
        row = self.counts.setdefault(state, [0, 0])
        row[1 if label == MALIGNANT else 0] += 1


def terminal_predict(observed_scores: Sequence[int], predictor, state: str | None = None) -> str:
    return predictor.predict(list(observed_scores), state)
