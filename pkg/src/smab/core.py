"""Environment specification, validation and derived gain quantities.

An :class:`EnvironmentSpec` is the full generative model of a staged bandit
problem. Every map is an explicit table keyed by tuples, so a spec
serializes to JSON without loss. :func:`compute_gain_table` turns the true
parameters into the gains, gaps and value functions that the benchmark and
the regret bounds are defined in terms of.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Mapping

STOP = "stop"
INITIAL_STATE = "∅"

NORMALIZATION_TOL = 1e-9
GAP_TOL = 1e-12

NOISE_FAMILIES = ("gaussian", "bounded-uniform")


class SpecError(ValueError):
    """An environment specification violates one of its invariants."""

    def __init__(self, message: str, location: tuple | None = None):
        self.location = location
        if location is not None:
            message = f"{message} at {location}"
        super().__init__(message)


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean observation noise added to costs and terminal rewards.

    ``gaussian`` draws N(0, sigma^2); ``bounded-uniform`` draws U[-sigma, sigma].
    Both laws are sigma-sub-Gaussian. ``sigma = 0`` means noiseless.
    """

    family: str = "gaussian"
    sigma: float = 0.0

    def to_dict(self) -> dict:
        return {"family": self.family, "sigma": self.sigma}

    @classmethod
    def from_dict(cls, data: Mapping) -> "NoiseModel":
        return cls(family=str(data.get("family", "gaussian")), sigma=float(data.get("sigma", 0.0)))


@dataclass(frozen=True)
class EnvironmentSpec:
    l_max: int
    states: tuple[str, ...]
    actions: tuple[str, ...]
    feedbacks: tuple[str, ...]
    # (t, x, a) -> probabilities aligned with ``feedbacks``
    feedback_dist: dict[tuple[int, str, str], tuple[float, ...]]
    # (t, x, a, f) -> next state
    state_map: dict[tuple[int, str, str, str], str]
    cost_mean: dict[tuple[int, str, str], float]
    reward_mean: dict[tuple[int, str], float]
    c_max: float
    r_max: float
    noise: NoiseModel = field(default_factory=NoiseModel)
    # distribution of the stage-1 state; the standard model starts in INITIAL_STATE
    initial_dist: dict[str, float] = field(default_factory=lambda: {INITIAL_STATE: 1.0})

    @cached_property
    def _continuations(self) -> dict[tuple[int, str], tuple[str, ...]]:
        order = {a: i for i, a in enumerate(self.actions)}
        out: dict[tuple[int, str], list[str]] = {}
        for t, x, a in self.feedback_dist:
            out.setdefault((t, x), []).append(a)
        return {k: tuple(sorted(v, key=order.__getitem__)) for k, v in out.items()}

    @cached_property
    def _cumulative(self) -> dict[tuple[int, str, str], tuple[float, ...]]:
        out = {}
        for key, probs in self.feedback_dist.items():
            acc, cum = 0.0, []
            for p in probs:
                acc += p
                cum.append(acc)
            out[key] = tuple(cum)
        return out

    @property
    def n_stop_actions(self) -> int:
        return len(self.actions) + 1

    @property
    def K(self) -> int:
        """Number of stage-state-action triplets used in the confidence terms."""
        return self.l_max * len(self.states) * self.n_stop_actions

    def continuation_actions(self, t: int, x: str) -> tuple[str, ...]:
        """Continuation actions with a feedback law at (t, x); empty at t = l_max."""
        if t >= self.l_max:
            return ()
        return self._continuations.get((t, x), ())

    def sample_feedback_index(self, t: int, x: str, a: str, u: float) -> int:
        """Inverse-CDF draw of a feedback index from a uniform variate ``u``."""
        try:
            cum = self._cumulative[(t, x, a)]
        except KeyError:
            raise SpecError("no feedback distribution", (t, x, a)) from None
        for i, c in enumerate(cum):
            if u < c:
                return i
        # u landed in the rounding slack above the last cumulative value
        for i in range(len(cum) - 1, -1, -1):
            if self.feedback_dist[(t, x, a)][i] > 0:
                return i
        return len(cum) - 1

    def transition(self, t: int, x: str, a: str, f: str) -> str:
        try:
            return self.state_map[(t, x, a, f)]
        except KeyError:
            raise SpecError("state mapping has no entry", (t, x, a, f)) from None

    def stage_states(self, t: int) -> list[str]:
        """States with a terminal reward at stage t, in declared order."""
        return [x for x in self.states if (t, x) in self.reward_mean]

    # -- serialization -------------------------------------------------

    def to_json_dict(self) -> dict:
        fd: dict = {}
        for (t, x, a), probs in self.feedback_dist.items():
            fd.setdefault(str(t), {}).setdefault(x, {})[a] = list(probs)
        sm: dict = {}
        for (t, x, a, f), nxt in self.state_map.items():
            sm.setdefault(str(t), {}).setdefault(x, {}).setdefault(a, {})[f] = nxt
        cm: dict = {}
        for (t, x, a), c in self.cost_mean.items():
            cm.setdefault(str(t), {}).setdefault(x, {})[a] = c
        rm: dict = {}
        for (t, x), r in self.reward_mean.items():
            rm.setdefault(str(t), {})[x] = r
        doc = {
            "l_max": self.l_max,
            "states": list(self.states),
            "actions": list(self.actions),
            "feedbacks": list(self.feedbacks),
            "feedback_dist": fd,
            "state_map": sm,
            "cost_mean": cm,
            "reward_mean": rm,
            "c_max": self.c_max,
            "r_max": self.r_max,
            "noise": self.noise.to_dict(),
        }
        if self.initial_dist != {INITIAL_STATE: 1.0}:
            doc["initial_dist"] = dict(self.initial_dist)
        return doc

    @classmethod
    def from_json_dict(cls, doc: Mapping[str, Any]) -> "EnvironmentSpec":
        required = ("l_max", "states", "actions", "feedbacks", "feedback_dist",
                    "state_map", "cost_mean", "reward_mean", "c_max", "r_max")
        missing = [k for k in required if k not in doc]
        if missing:
            raise SpecError(f"missing keys {missing}")
        try:
            fd = {
                (int(t), x, a): tuple(float(p) for p in probs)
                for t, by_x in doc["feedback_dist"].items()
                for x, by_a in by_x.items()
                for a, probs in by_a.items()
            }
            sm = {
                (int(t), x, a, f): nxt
                for t, by_x in doc["state_map"].items()
                for x, by_a in by_x.items()
                for a, by_f in by_a.items()
                for f, nxt in by_f.items()
            }
            cm = {
                (int(t), x, a): float(c)
                for t, by_x in doc["cost_mean"].items()
                for x, by_a in by_x.items()
                for a, c in by_a.items()
            }
            rm = {(int(t), x): float(r) for t, by_x in doc["reward_mean"].items() for x, r in by_x.items()}
            initial = {str(k): float(v) for k, v in doc.get("initial_dist", {INITIAL_STATE: 1.0}).items()}
            return cls(
                l_max=int(doc["l_max"]),
                states=tuple(doc["states"]),
                actions=tuple(doc["actions"]),
                feedbacks=tuple(str(f) for f in doc["feedbacks"]),
                feedback_dist=fd,
                state_map=sm,
                cost_mean=cm,
                reward_mean=rm,
                c_max=float(doc["c_max"]),
                r_max=float(doc["r_max"]),
                noise=NoiseModel.from_dict(doc.get("noise", {})),
                initial_dist=initial,
            )
        except (AttributeError, TypeError, ValueError) as exc:
            if isinstance(exc, SpecError):
                raise
            raise SpecError(f"malformed environment document: {exc}") from exc

    def dumps(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=False)

    @classmethod
    def loads(cls, text: str) -> "EnvironmentSpec":
        return cls.from_json_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EnvironmentSpec":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def _check_distribution(probs, n: int, where: tuple, what: str) -> None:
    if len(probs) != n:
        raise SpecError(f"{what} has {len(probs)} entries, expected {n}", where)
    for p in probs:
        if not math.isfinite(p) or p < 0:
            raise SpecError(f"{what} has negative or non-finite entry {p}", where)
    total = math.fsum(probs)
    if abs(total - 1.0) > NORMALIZATION_TOL:
        raise SpecError(f"{what} sums to {total!r} (residual {total - 1.0:+.3g})", where)


def validate_spec(spec: EnvironmentSpec) -> EnvironmentSpec:
    """Return ``spec`` unchanged if every invariant holds, else raise SpecError.

    The error names the first violated invariant and its (t, x, a) location.
    """
    if int(spec.l_max) != spec.l_max or spec.l_max < 1:
        raise SpecError(f"l_max must be a positive integer, got {spec.l_max!r}")
    if not spec.actions and spec.l_max > 1:
        raise SpecError("action set is empty")
    if not spec.feedbacks:
        raise SpecError("feedback set is empty")
    for name, items in (("states", spec.states), ("actions", spec.actions), ("feedbacks", spec.feedbacks)):
        if len(set(items)) != len(items):
            raise SpecError(f"duplicate identifiers in {name}")
    if STOP in spec.actions:
        raise SpecError(f"'{STOP}' is implicit and must not be listed as an action")
    if spec.c_max < 0 or spec.r_max < 0:
        raise SpecError("c_max and r_max must be nonnegative")
    if spec.noise.family not in NOISE_FAMILIES:
        raise SpecError(f"unknown noise family {spec.noise.family!r}")
    if not spec.noise.sigma >= 0:
        raise SpecError(f"noise sigma must be nonnegative, got {spec.noise.sigma!r}")

    states = set(spec.states)
    actions = set(spec.actions)
    feedbacks = set(spec.feedbacks)

    if not spec.initial_dist:
        raise SpecError("initial state distribution is empty")
    for x in spec.initial_dist:
        if x not in states:
            raise SpecError(f"initial state {x!r} is not a declared state")
    if spec.initial_dist == {INITIAL_STATE: 1.0} and INITIAL_STATE not in states:
        raise SpecError(f"states must contain the initial state {INITIAL_STATE!r}")
    _check_distribution(list(spec.initial_dist.values()), len(spec.initial_dist), ("initial",), "initial distribution")

    for (t, x), r in spec.reward_mean.items():
        if not 1 <= t <= spec.l_max:
            raise SpecError("reward stage out of [1, l_max]", (t, x))
        if x not in states:
            raise SpecError("reward keyed by undeclared state", (t, x))
        if not 0.0 <= r <= spec.r_max:
            raise SpecError(f"reward {r!r} out of [0, r_max]", (t, x))
    for x in spec.initial_dist:
        if (1, x) not in spec.reward_mean:
            raise SpecError("missing terminal reward for initial state", (1, x))

    for key, probs in spec.feedback_dist.items():
        t, x, a = key
        if not 1 <= t <= spec.l_max - 1:
            raise SpecError("feedback stage out of [1, l_max - 1]", key)
        if x not in states:
            raise SpecError("feedback law keyed by undeclared state", key)
        if a not in actions:
            raise SpecError("feedback law keyed by undeclared action", key)
        _check_distribution(probs, len(spec.feedbacks), key, "probability vector")
        if (t, x) not in spec.reward_mean:
            raise SpecError("missing terminal reward for state with continuation actions", (t, x))
        if key not in spec.cost_mean:
            raise SpecError("missing cost", key)
        for f in spec.feedbacks:
            nxt = spec.state_map.get((t, x, a, f))
            if nxt is None:
                raise SpecError("state mapping is not total", (t, x, a, f))
            if nxt not in states:
                raise SpecError(f"state mapping targets undeclared state {nxt!r}", (t, x, a, f))
            if (t + 1, nxt) not in spec.reward_mean:
                raise SpecError("missing terminal reward for successor state", (t + 1, nxt))

    for key, c in spec.cost_mean.items():
        if key not in spec.feedback_dist:
            raise SpecError("cost given for triplet without feedback law", key)
        if not 0.0 <= c <= spec.c_max:
            raise SpecError(f"cost {c!r} out of [0, c_max]", key)

    for key in spec.state_map:
        t, x, a, f = key
        if (t, x, a) not in spec.feedback_dist:
            raise SpecError("state mapping entry outside the declared domain", key)
        if f not in feedbacks:
            raise SpecError("state mapping keyed by undeclared feedback", key)
    return spec


def reachable_pairs(spec: EnvironmentSpec) -> set[tuple[int, str]]:
    """Stage-state pairs reachable from the initial states by some action/feedback path."""
    frontier = {(1, x) for x, p in spec.initial_dist.items() if p > 0}
    seen = set(frontier)
    while frontier:
        nxt = set()
        for t, x in frontier:
            for a in spec.continuation_actions(t, x):
                for i, f in enumerate(spec.feedbacks):
                    if spec.feedback_dist[(t, x, a)][i] > 0:
                        pair = (t + 1, spec.state_map[(t, x, a, f)])
                        if pair not in seen:
                            seen.add(pair)
                            nxt.add(pair)
        frontier = nxt
    return seen


@dataclass(frozen=True)
class GainTable:
    """True-parameter quantities for every tabulated stage-state pair.

    Keys are ``(t, x, a)`` with ``a`` a continuation action or ``STOP``,
    and ``(t, x)`` for per-pair quantities. ``y`` holds no entries at
    t = l_max, where only stopping is possible.
    """

    l_max: int
    states: tuple[str, ...]
    actions: tuple[str, ...]
    K: int
    pairs: tuple[tuple[int, str], ...]
    reward: dict[tuple[int, str], float]
    cost: dict[tuple[int, str, str], float]
    y: dict[tuple[int, str, str], float]
    g: dict[tuple[int, str, str], float]
    delta: dict[tuple[int, str, str], float]
    optimal_set: dict[tuple[int, str], tuple[str, ...]]
    g_star: dict[tuple[int, str], float]
    mu_star: dict[tuple[int, str], float]
    mu_lower: dict[tuple[int, str, str], float]
    omega: dict[tuple[int, str, str], float]
    benchmark_choice: dict[tuple[int, str], str]
    initial_dist: dict[str, float]

    def available(self, t: int, x: str) -> tuple[str, ...]:
        """Actions (continuations then stop) with a gain entry at (t, x)."""
        return tuple(a for a in (*self.actions, STOP) if (t, x, a) in self.g)

    @property
    def benchmark_value(self) -> float:
        """Expected per-round gain of the benchmark."""
        return math.fsum(p * self.mu_star[(1, x)] for x, p in self.initial_dist.items())

    def to_json_dict(self) -> dict:
        out: dict = {}
        for t, x in self.pairs:
            entry = {
                "reward": self.reward[(t, x)],
                "g_star": self.g_star[(t, x)],
                "mu_star": self.mu_star[(t, x)],
                "optimal_set": list(self.optimal_set[(t, x)]),
                "benchmark_action": self.benchmark_choice[(t, x)],
                "actions": {},
            }
            for a in self.available(t, x):
                row = {
                    "g": self.g[(t, x, a)],
                    "delta": self.delta[(t, x, a)],
                    "mu_lower": self.mu_lower[(t, x, a)],
                    "omega": self.omega[(t, x, a)],
                }
                if a != STOP:
                    row["y"] = self.y[(t, x, a)]
                    row["cost"] = self.cost[(t, x, a)]
                entry["actions"][a] = row
            out.setdefault(str(t), {})[x] = entry
        return {"l_max": self.l_max, "K": self.K, "benchmark_value": self.benchmark_value, "stages": out}


def compute_gain_table(spec: EnvironmentSpec) -> GainTable:
    """Ex-ante rewards, gains, gaps, optimal sets and value functions of ``spec``."""
    from .analysis import compute_values

    validate_spec(spec)
    pairs = tuple(sorted(spec.reward_mean, key=lambda k: (k[0], spec.states.index(k[1]))))
    y: dict = {}
    g: dict = {}
    delta: dict = {}
    optimal: dict = {}
    g_star: dict = {}
    for t, x in pairs:
        r = spec.reward_mean[(t, x)]
        g[(t, x, STOP)] = r
        for a in spec.continuation_actions(t, x):
            probs = spec.feedback_dist[(t, x, a)]
            terms = [p * spec.reward_mean[(t + 1, spec.state_map[(t, x, a, f)])]
                     for p, f in zip(probs, spec.feedbacks)]
            y[(t, x, a)] = math.fsum(terms)
            g[(t, x, a)] = y[(t, x, a)] - spec.cost_mean[(t, x, a)]
        avail = [a for a in (*spec.continuation_actions(t, x), STOP)]
        best = max(g[(t, x, a)] for a in avail)
        g_star[(t, x)] = best
        for a in avail:
            delta[(t, x, a)] = best - g[(t, x, a)]
        optimal[(t, x)] = tuple(a for a in avail if delta[(t, x, a)] <= GAP_TOL)

    partial = GainTable(
        l_max=spec.l_max, states=spec.states, actions=spec.actions, K=spec.K, pairs=pairs,
        reward=dict(spec.reward_mean), cost=dict(spec.cost_mean), y=y, g=g, delta=delta,
        optimal_set=optimal, g_star=g_star, mu_star={}, mu_lower={}, omega={},
        benchmark_choice={}, initial_dist=dict(spec.initial_dist),
    )
    mu_star, mu_lower, omega, choice = compute_values(spec, partial)
    partial.mu_star.update(mu_star)
    partial.mu_lower.update(mu_lower)
    partial.omega.update(omega)
    partial.benchmark_choice.update(choice)
    return partial
