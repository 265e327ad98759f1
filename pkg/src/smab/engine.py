"""Round execution, seeded randomness and the experiment driver.

Randomness is organized in blocks: for each (replication, role, purpose)
a numpy ``SeedSequence`` derived from the master seed yields one array
indexed by (round, stage). The variate used at a given (round, stage)
therefore never depends on how many draws earlier rounds consumed, which
is what makes common-random-numbers coupling of two policies possible.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

import numpy as np

from .core import STOP, EnvironmentSpec, GainTable, NoiseModel, SpecError, compute_gain_table
from .policies import (
    BasePolicy,
    BenchmarkPolicy,
    FalParams,
    FalPolicy,
    FalStats,
    FixedSequencePolicy,
    GuidelinePolicy,
    PolicyConfigError,
    Ucb1ContextPolicy,
)

log = logging.getLogger(__name__)

# purpose codes for stream paths
FEEDBACK, COST_NOISE, REWARD_NOISE, INITIAL, COHORT = range(5)
LEARNER, BENCHMARK = 0, 1

COUPLING_MODES = ("independent", "common-random-numbers")


class ConfigError(ValueError):
    pass


class ContractViolation(RuntimeError):
    """A policy or trace broke an invariant during a run; ``trace`` holds the round when known."""

    def __init__(self, message: str, trace: dict | None = None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class RngStream:
    """Independent random stream identified by a master seed and a key path."""

    seed: int
    path: tuple[int, ...] = ()

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed) & (2**64 - 1), spawn_key=self.path)
        return np.random.Generator(np.random.PCG64(ss))


def standard_noise(rng: np.random.Generator, family: str, size) -> np.ndarray:
    """Unit-scale noise: N(0, 1) or U[-1, 1]."""
    if family == "gaussian":
        return rng.standard_normal(size)
    if family == "bounded-uniform":
        return rng.uniform(-1.0, 1.0, size)
    raise SpecError(f"unknown noise family {family!r}")


class DrawBlock:
    """Every uniform and noise variate one policy run can consume."""

    def __init__(self, stream: RngStream, n: int, l_max: int, noise_family: str):
        self.initial_u = stream.child(INITIAL).generator().random(n).tolist()
        self.feedback_u = stream.child(FEEDBACK).generator().random((n, l_max)).tolist()
        self.cost_noise = standard_noise(stream.child(COST_NOISE).generator(), noise_family, (n, l_max)).tolist()
        self.reward_noise = standard_noise(stream.child(REWARD_NOISE).generator(), noise_family, (n, l_max)).tolist()

    def round(self, rho: int) -> "RoundDraws":
        i = rho - 1
        return RoundDraws(self.initial_u[i], self.feedback_u[i], self.cost_noise[i], self.reward_noise[i])


@dataclass(frozen=True)
class RoundDraws:
    initial_u: float
    feedback_u: Sequence[float]
    cost_noise: Sequence[float]
    reward_noise: Sequence[float]


@dataclass
class RoundTrace:
    round_index: int
    actions: tuple[str, ...]
    feedbacks: tuple[str, ...]
    states: tuple[str, ...]
    realized_costs: tuple[float, ...]
    realized_rewards: tuple[float, ...]
    info: dict = field(default_factory=dict)

    @property
    def stop_stage(self) -> int:
        return len(self.actions)

    @property
    def utility(self) -> float:
        """Collected terminal reward minus the realized costs."""
        return self.realized_rewards[-1] - math.fsum(self.realized_costs)

    def check(self, spec: EnvironmentSpec | None = None) -> None:
        T = self.stop_stage
        if T < 1 or self.actions[-1] != STOP or STOP in self.actions[:-1]:
            raise ContractViolation(f"round {self.round_index}: action sequence must end in its only stop", asdict(self))
        if not (len(self.feedbacks) == T - 1 and len(self.states) == T
                and len(self.realized_costs) == T - 1 and len(self.realized_rewards) == T):
            raise ContractViolation(f"round {self.round_index}: inconsistent sequence lengths", asdict(self))
        if spec is not None:
            if T > spec.l_max:
                raise ContractViolation(f"round {self.round_index}: {T} stages exceed l_max", asdict(self))
            for t in range(1, T):
                nxt = spec.transition(t, self.states[t - 1], self.actions[t - 1], self.feedbacks[t - 1])
                if nxt != self.states[t]:
                    raise ContractViolation(f"round {self.round_index}: state {t + 1} does not follow the state map", asdict(self))


class Environment(Protocol):
    l_max: int
    states: tuple[str, ...]
    actions: tuple[str, ...]
    table: GainTable | None

    def start_round(self, rho: int, draws: RoundDraws) -> tuple[str, dict]: ...
    def continuation_actions(self, t: int, x: str) -> Sequence[str]: ...
    def step(self, t: int, x: str, a: str, u: float) -> tuple[str, str]: ...
    def outcomes(self, states, actions, draws: RoundDraws) -> tuple[tuple, tuple, dict]: ...
    def fresh(self, policy_name: str) -> "Environment": ...


def sample_feedback(spec: EnvironmentSpec, t: int, x: str, a: str, rng: np.random.Generator | float) -> str:
    """Draw a feedback from p_{t,x,a}; ``rng`` may be a generator or a uniform variate."""
    u = rng if isinstance(rng, float) else float(rng.random())
    return spec.feedbacks[spec.sample_feedback_index(t, x, a, u)]


def transition(spec: EnvironmentSpec, t: int, x: str, a: str, f: str) -> str:
    return spec.transition(t, x, a, f)


def realize_outcomes(spec: EnvironmentSpec, states: Sequence[str], actions: Sequence[str],
                     rng: np.random.Generator | RoundDraws) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Noisy costs for the continuation stages and noisy terminal rewards for every visited stage."""
    T = len(actions)
    sigma = spec.noise.sigma
    if isinstance(rng, RoundDraws):
        cn, rn = rng.cost_noise, rng.reward_noise
    else:
        cn = standard_noise(rng, spec.noise.family, T)
        rn = standard_noise(rng, spec.noise.family, T)
    costs = tuple(spec.cost_mean[(t, states[t - 1], actions[t - 1])] + sigma * cn[t - 1] for t in range(1, T))
    rewards = tuple(spec.reward_mean[(t, states[t - 1])] + sigma * rn[t - 1] for t in range(1, T + 1))
    return costs, rewards


class SpecEnvironment:
    """Simulates rounds directly from an EnvironmentSpec."""

    def __init__(self, spec: EnvironmentSpec, table: GainTable | None = None):
        self.spec = spec
        self.table = table if table is not None else compute_gain_table(spec)
        self.l_max = spec.l_max
        self.states = spec.states
        self.actions = spec.actions
        self._initial = sorted(spec.initial_dist.items(), key=lambda kv: spec.states.index(kv[0]))

    def fresh(self, policy_name: str = "") -> "SpecEnvironment":
        return self

    def start_round(self, rho: int, draws: RoundDraws) -> tuple[str, dict]:
        if len(self._initial) == 1:
            x = self._initial[0][0]
        else:
            acc = 0.0
            x = self._initial[-1][0]
            for s, p in self._initial:
                acc += p
                if draws.initial_u < acc:
                    x = s
                    break
        return x, {"initial_state": x}

    def continuation_actions(self, t: int, x: str) -> Sequence[str]:
        return self.spec.continuation_actions(t, x)

    def step(self, t: int, x: str, a: str, u: float) -> tuple[str, str]:
        spec = self.spec
        f = spec.feedbacks[spec.sample_feedback_index(t, x, a, u)]
        return f, spec.state_map[(t, x, a, f)]

    def outcomes(self, states, actions, draws: RoundDraws):
        costs, rewards = realize_outcomes(self.spec, states, actions, draws)
        return costs, rewards, {}


def run_round(policy: BasePolicy, env: Environment, draws: RoundDraws, round_index: int,
              check: bool = False) -> RoundTrace:
    """Play one round: select until stop (forced at l_max), then reveal outcomes to the policy."""
    x, context = env.start_round(round_index, draws)
    policy.begin_round(round_index, context)
    l_max = env.l_max
    actions: list[str] = []
    feedbacks: list[str] = []
    states = [x]
    t = 1
    while True:
        if t >= l_max:
            a = STOP
        else:
            a = policy.select(t, x)
            if a != STOP and a not in env.continuation_actions(t, x):
                raise ContractViolation(
                    f"round {round_index}: policy chose {a!r}, not available at stage {t} in state {x!r}",
                    {"round_index": round_index, "actions": actions + [a], "feedbacks": feedbacks,
                     "states": states})
        actions.append(a)
        if a == STOP:
            break
        f, x = env.step(t, x, a, draws.feedback_u[t - 1])
        feedbacks.append(f)
        states.append(x)
        t += 1
    costs, rewards, info = env.outcomes(states, actions, draws)
    trace = RoundTrace(round_index, tuple(actions), tuple(feedbacks), tuple(states), costs, rewards, info)
    if check:
        trace.check(getattr(env, "spec", None))
    policy.observe(trace)
    return trace


# -- experiments -------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Everything a run depends on. ``env`` is one of
    ``{"scenario": name, "params": {...}}``, ``{"path": file}`` or ``{"inline": spec-json}``.
    ``policy`` is ``{"name": ..., **options}``.
    """

    env: dict
    policy: dict
    horizon: int
    replications: int = 1
    seed: int = 0
    coupling: str = "independent"
    checkpoints: tuple[int, ...] = ()
    audit: bool = False
    check_traces: bool = False
    jobs: int = 1
    csv_path: str | None = None
    json_path: str | None = None

    def validate(self) -> "ExperimentConfig":
        if int(self.horizon) != self.horizon or self.horizon < 0:
            raise ConfigError(f"horizon must be a nonnegative integer, got {self.horizon!r}")
        if int(self.replications) != self.replications or self.replications < 1:
            raise ConfigError(f"replications must be >= 1, got {self.replications!r}")
        if self.coupling not in COUPLING_MODES:
            raise ConfigError(f"coupling must be one of {COUPLING_MODES}, got {self.coupling!r}")
        for c in self.checkpoints:
            if not 1 <= c <= self.horizon:
                raise ConfigError(f"checkpoint {c} outside [1, {self.horizon}]")
        if "name" not in self.policy:
            raise ConfigError("policy needs a name")
        if not isinstance(self.env, dict) or not ({"scenario", "path", "inline"} & set(self.env)):
            raise ConfigError("env must name a scenario, a path or an inline spec")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["checkpoints"] = list(self.checkpoints)
        return d

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        try:
            kw = dict(doc)
            if "checkpoints" in kw:
                kw["checkpoints"] = tuple(int(c) for c in kw["checkpoints"])
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def effective_checkpoints(self) -> tuple[int, ...]:
        if self.checkpoints:
            return tuple(sorted(set(self.checkpoints)))
        return (self.horizon,) if self.horizon > 0 else ()


def fal_params_from(policy_cfg: Mapping, horizon: int) -> FalParams:
    mode = policy_cfg.get("delta_mode", "fixed")
    if mode == "one-over-n":
        if horizon < 2:
            raise ConfigError("delta = 1/n needs a horizon of at least 2")
        delta = 1.0 / horizon
    elif mode == "fixed":
        delta = float(policy_cfg.get("delta", 0.05))
    else:
        raise ConfigError(f"unknown delta mode {mode!r}")
    try:
        return FalParams(delta=delta, sigma=float(policy_cfg.get("sigma", 1.0)),
                         epsilon_stop_bias=float(policy_cfg.get("epsilon", 0.0)),
                         action_mask_mode=str(policy_cfg.get("mask", "none")))
    except PolicyConfigError as exc:
        raise ConfigError(str(exc)) from exc


def make_policy(policy_cfg: Mapping, env: Environment, horizon: int, monitor=None) -> BasePolicy:
    name = policy_cfg["name"]
    if name == "benchmark":
        if env.table is None:
            raise ConfigError("the benchmark needs an environment with known gains")
        return BenchmarkPolicy(env.table)
    if name == "fal":
        return FalPolicy(env.l_max, env.states, env.actions, fal_params_from(policy_cfg, horizon),
                         actions_at=env.continuation_actions, monitor=monitor)
    if name == "fixed":
        seq = policy_cfg.get("seq", ())
        if isinstance(seq, str):
            seq = [s for s in seq.split(",") if s]
        try:
            return FixedSequencePolicy(tuple(seq), env.l_max)
        except PolicyConfigError as exc:
            raise ConfigError(str(exc)) from exc
    if name == "guideline":
        return GuidelinePolicy()
    if name == "cbb":
        return Ucb1ContextPolicy(env.actions, env.l_max)
    raise ConfigError(f"unknown policy {name!r}")


@dataclass
class ReplicationResult:
    stop_stage: np.ndarray
    learner_gain: np.ndarray
    benchmark_gain: np.ndarray | None
    utility: np.ndarray
    snapshots: dict[int, FalStats]
    final_stats: FalStats | None
    monitor: Any


def _run_replication(config: ExperimentConfig, rep: int, env: Environment) -> ReplicationResult:
    from .analysis import ConfidenceMonitor, trace_gain

    n = config.horizon
    table = env.table
    noise_family = getattr(getattr(env, "spec", None), "noise", NoiseModel()).family
    root = RngStream(config.seed, (rep,))
    name = config.policy["name"]

    monitor = None
    if config.audit and name == "fal" and table is not None:
        p = fal_params_from(config.policy, n)
        monitor = ConfidenceMonitor(table, p.sigma, p.delta)
    learner_env = env.fresh(name)
    learner = make_policy(config.policy, learner_env, n, monitor)
    draws_l = DrawBlock(root.child(LEARNER), n, env.l_max, noise_family)

    bench = bench_env = draws_b = None
    if table is not None:
        bench = BenchmarkPolicy(table)
        bench_env = env.fresh("benchmark")
        draws_b = draws_l if config.coupling == "common-random-numbers" else \
            DrawBlock(root.child(BENCHMARK), n, env.l_max, noise_family)

    stop_stage = np.zeros(n, dtype=np.int64)
    gain = np.zeros(n)
    utility = np.zeros(n)
    bgain = np.zeros(n) if bench is not None else None
    checkpoints = set(config.effective_checkpoints)
    snapshots: dict[int, FalStats] = {}
    for rho in range(1, n + 1):
        tr = run_round(learner, learner_env, draws_l.round(rho), rho, config.check_traces)
        stop_stage[rho - 1] = tr.stop_stage
        utility[rho - 1] = tr.utility
        gain[rho - 1] = trace_gain(tr, table) if table is not None else tr.utility
        if bench is not None:
            tb = run_round(bench, bench_env, draws_b.round(rho), rho, config.check_traces)
            bgain[rho - 1] = trace_gain(tb, table)
        if rho in checkpoints and isinstance(learner, FalPolicy):
            snapshots[rho] = learner.stats.snapshot()
    final = learner.stats if isinstance(learner, FalPolicy) else None
    return ReplicationResult(stop_stage, gain, bgain, utility, snapshots, final, monitor)


def _replication_worker(args):
    config, rep = args
    from .scenarios import resolve_environment

    return _run_replication(config, rep, resolve_environment(config.env, config.seed))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    stop_stage: np.ndarray        # (replications, n)
    learner_gain: np.ndarray      # true-mean gain, or realized utility without a gain table
    benchmark_gain: np.ndarray | None
    utility: np.ndarray           # realized utility of the learner
    snapshots: list[dict[int, FalStats]]
    final_stats: list[FalStats | None]
    monitors: list[Any]
    table: GainTable | None = None

    @property
    def has_regret(self) -> bool:
        return self.benchmark_gain is not None

    @property
    def pseudo_regret(self) -> np.ndarray:
        if self.benchmark_gain is None:
            return np.full_like(self.learner_gain, np.nan)
        return self.benchmark_gain - self.learner_gain

    def cumulative_regret(self) -> np.ndarray:
        return np.cumsum(self.pseudo_regret, axis=1)

    def mean_curve(self) -> np.ndarray:
        cum = self.cumulative_regret()
        return cum.mean(axis=0) if cum.size else np.zeros(0)

    def checkpoint_summary(self) -> list[dict]:
        cum = self.cumulative_regret()
        reps = cum.shape[0]
        out = []
        for c in self.config.effective_checkpoints:
            col = cum[:, c - 1]
            util = self.utility[:, :c]
            row = {
                "round": c,
                "mean_cumulative_regret": float(col.mean()) if self.has_regret else None,
                "std_cumulative_regret": float(col.std(ddof=1)) if self.has_regret and reps > 1 else None,
                "mean_utility": float(util.mean()),
            }
            out.append(row)
        return out

    def write_csv(self, path: str | Path) -> None:
        """One row per (replication, round); '.' decimals, LF endings, fixed header."""
        pr = self.pseudo_regret
        cum = self.cumulative_regret()
        lines = ["replication,round,stop_stage,pseudo_regret,cumulative_regret"]
        fmt = (lambda v: repr(float(v))) if self.has_regret else (lambda v: "")
        for i in range(pr.shape[0]):
            stages = self.stop_stage[i].tolist()
            prs = pr[i].tolist()
            cums = cum[i].tolist()
            for j in range(pr.shape[1]):
                lines.append(f"{i + 1},{j + 1},{stages[j]},{fmt(prs[j])},{fmt(cums[j])}")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")

    def summary(self, bounds=None, audit=None) -> dict:
        doc = {
            "config": self.config.to_dict(),
            "checkpoints": self.checkpoint_summary(),
        }
        if self.table is not None:
            doc["benchmark_value"] = self.table.benchmark_value
        if bounds is not None:
            doc["bounds"] = bounds.to_json_dict()
        if audit is not None:
            doc["confidence_audit"] = audit.to_json_dict()
        snaps = {}
        for i, s in enumerate(self.snapshots):
            if s:
                snaps[str(i + 1)] = {str(k): v.to_json_dict() for k, v in sorted(s.items())}
        if snaps:
            doc["fal_snapshots"] = snaps
        return doc

    def write_json(self, path: str | Path, bounds=None, audit=None) -> None:
        Path(path).write_text(json.dumps(self.summary(bounds, audit), indent=2) + "\n", encoding="utf-8")


def run_experiment(config: ExperimentConfig, env: Environment | None = None) -> ExperimentResult:
    """Run the learner (and the benchmark, when gains are known) for every replication."""
    from .scenarios import resolve_environment

    config.validate()
    if env is None:
        env = resolve_environment(config.env, config.seed)
    reps = range(config.replications)
    if config.jobs > 1 and config.replications > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(_replication_worker, [(config, r) for r in reps]))
    else:
        results = [_run_replication(config, r, env) for r in reps]
    n = config.horizon

    def stack(attr):
        return np.array([getattr(r, attr) for r in results]).reshape(config.replications, n)

    has_bench = env.table is not None
    return ExperimentResult(
        config=config,
        stop_stage=stack("stop_stage"),
        learner_gain=stack("learner_gain"),
        benchmark_gain=stack("benchmark_gain") if has_bench else None,
        utility=stack("utility"),
        snapshots=[r.snapshots for r in results],
        final_stats=[r.final_stats for r in results],
        monitors=[r.monitor for r in results],
        table=env.table,
    )
