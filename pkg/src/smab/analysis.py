"""Ground-truth values, regret, closed-form bounds and confidence audits."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .core import GAP_TOL, STOP, EnvironmentSpec, GainTable
from .policies import FalStats, confidence_number

if TYPE_CHECKING:
    from .engine import RoundTrace

log = logging.getLogger(__name__)

ENUMERATION_GUARD = 10**6


def compute_values(spec: EnvironmentSpec, table: GainTable):
    """Backward induction for the benchmark value and worst-case continuations.

    Returns ``(mu_star, mu_lower, omega, benchmark_choice)``. Where the
    benchmark's argmax holds several continuation actions, the one with the
    largest continuation value is taken (declared order breaks exact ties),
    so ``mu_star`` is the best value any tie-resolution of the benchmark
    attains. ``mu_lower[t, x, a]`` is the value of playing ``a`` and then
    the value-minimizing action (stop included) at every later stage.
    """
    mu_star: dict = {}
    worst: dict = {}
    mu_lower: dict = {}
    choice: dict = {}
    for t in range(spec.l_max, 0, -1):
        for x in spec.stage_states(t):
            r = spec.reward_mean[(t, x)]
            best_q: dict[str, float] = {}
            low = r
            mu_lower[(t, x, STOP)] = r
            for a in spec.continuation_actions(t, x):
                probs = spec.feedback_dist[(t, x, a)]
                nxt = [spec.state_map[(t, x, a, f)] for f in spec.feedbacks]
                c = spec.cost_mean[(t, x, a)]
                best_q[a] = math.fsum(p * mu_star[(t + 1, s)] for p, s in zip(probs, nxt)) - c
                q_low = math.fsum(p * worst[(t + 1, s)] for p, s in zip(probs, nxt)) - c
                mu_lower[(t, x, a)] = q_low
                low = min(low, q_low)
            worst[(t, x)] = low
            opt = table.optimal_set[(t, x)]
            if t == spec.l_max or STOP in opt:
                choice[(t, x)] = STOP
                mu_star[(t, x)] = r
            else:
                cands = [a for a in opt if a != STOP]
                pick = cands[0]
                for a in cands[1:]:
                    if best_q[a] > best_q[pick] + GAP_TOL:
                        pick = a
                choice[(t, x)] = pick
                mu_star[(t, x)] = best_q[pick]
    omega = {key: mu_star[key[:2]] - v for key, v in mu_lower.items()}
    return mu_star, mu_lower, omega, choice


def trace_gain(trace: "RoundTrace", table: GainTable) -> float:
    """Terminal reward minus costs along a trace, evaluated at the true means."""
    T = trace.stop_stage
    gain = table.reward[(T, trace.states[T - 1])]
    for t in range(1, T):
        gain -= table.cost[(t, trace.states[t - 1], trace.actions[t - 1])]
    return gain


def pseudo_regret(learner_trace: "RoundTrace", benchmark_trace: "RoundTrace", table: GainTable) -> float:
    """One round's contribution to the random regret: benchmark gain minus learner gain."""
    return trace_gain(benchmark_trace, table) - trace_gain(learner_trace, table)


@dataclass
class RegretCurve:
    rounds: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray


def expected_regret(config) -> RegretCurve:
    """Monte-Carlo mean and standard error of cumulative pseudo-regret."""
    from .engine import run_experiment

    if config.replications < 2:
        raise ValueError("expected_regret needs at least 2 replications")
    result = run_experiment(config)
    cum = result.cumulative_regret()
    rounds = np.arange(1, cum.shape[1] + 1)
    mean = cum.mean(axis=0) if cum.size else np.zeros(0)
    stderr = cum.std(axis=0, ddof=1) / math.sqrt(cum.shape[0]) if cum.size else np.zeros(0)
    return RegretCurve(rounds=rounds, mean=mean, stderr=stderr)


# -- closed-form bounds ------------------------------------------------------


def lemma2_count_bound(delta_gap: float, sigma: float, K: int, delta: float) -> float:
    """Cap on how often an action with gap ``delta_gap`` is chosen on the good event."""
    if delta_gap <= 0:
        return math.inf
    if sigma == 0:
        return 3.0
    s = 16.0 * sigma**2 / delta_gap**2
    return 3.0 + s * math.log(s * K / delta)


def _log_term(delta_gap: float, sigma: float, K: int, n: int) -> float:
    if sigma == 0:
        return 0.0
    return 16.0 * sigma**2 / delta_gap * math.log(16.0 * sigma**2 * K * n / delta_gap**2)


@dataclass
class BoundReport:
    sigma: float
    K: int
    delta: float | None
    n: int | None
    count_caps: dict[tuple[int, str, str], float]
    thm1_total: float | None
    thm2_total: float | None
    cor2_total: float | None
    assumption_2_satisfied: bool
    assumption_3_satisfied: bool
    omega_max: float
    warnings: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        caps: dict = {}
        for (t, x, a), v in self.count_caps.items():
            caps.setdefault(str(t), {}).setdefault(x, {})[a] = v
        return {
            "sigma": self.sigma,
            "K": self.K,
            "delta": self.delta,
            "n": self.n,
            "thm1_total": self.thm1_total,
            "thm2_total": self.thm2_total,
            "cor2_total": self.cor2_total,
            "assumption_2_satisfied": self.assumption_2_satisfied,
            "assumption_3_satisfied": self.assumption_3_satisfied,
            "omega_max": self.omega_max,
            "count_caps": caps,
            "warnings": list(self.warnings),
        }


def suboptimal_triplets(table: GainTable) -> list[tuple[int, str, str]]:
    return [(t, x, a) for t, x in table.pairs for a in table.available(t, x)
            if a not in table.optimal_set[(t, x)]]


def assumption_2_holds(table: GainTable) -> bool:
    """No stage-state pair has stop tied with a continuation action for the best gain."""
    return all(not (STOP in opt and len(opt) > 1) for opt in table.optimal_set.values())


def assumption_3_holds(table: GainTable) -> bool:
    """Deviation gaps shrink with the stage: Omega <= (l_max - t) * Delta off the optimal set."""
    return all(table.omega[k] <= (table.l_max - k[0]) * table.delta[k] + GAP_TOL
               for k in suboptimal_triplets(table))


def theorem_bounds(table: GainTable, sigma: float, *, delta: float | None = None,
                   n: int | None = None) -> BoundReport:
    """Evaluate the high-probability and expected regret bounds on ``table``.

    ``delta`` gives the n-free total; ``n`` gives the two totals for a run
    with confidence level 1/n. The Assumption-3 total is left as None when
    the assumption fails.
    """
    if delta is None and n is None:
        raise ValueError("need delta or n")
    K = table.K
    subopt = suboptimal_triplets(table)
    omega_max = max(table.omega.values(), default=0.0)
    a2 = assumption_2_holds(table)
    a3 = assumption_3_holds(table)
    warnings = []
    if not a2:
        warnings.append("stop is tied with a continuation action somewhere; "
                        "bounds computed but not guaranteed")
        log.warning(warnings[-1])
    cap_delta = delta if delta is not None else 1.0 / n
    caps = {k: lemma2_count_bound(table.delta[k], sigma, K, cap_delta) for k in subopt}

    thm1 = None
    if delta is not None:
        thm1 = math.fsum(table.omega[k] * caps[k] for k in subopt)
    thm2 = cor2 = None
    if n is not None:
        thm2 = omega_max + math.fsum(
            table.omega[k] * lemma2_count_bound(table.delta[k], sigma, K, 1.0 / n) for k in subopt)
        if a3:
            per_stage: dict[int, list[float]] = {}
            for k in subopt:
                d = table.delta[k]
                per_stage.setdefault(k[0], []).append(3.0 * d + _log_term(d, sigma, K, n))
            inner = max((math.fsum(v) for v in per_stage.values()), default=0.0)
            cor2 = omega_max + (table.l_max**2 - table.l_max) / 2.0 * inner
    return BoundReport(sigma=sigma, K=K, delta=delta, n=n, count_caps=caps, thm1_total=thm1,
                       thm2_total=thm2, cor2_total=cor2, assumption_2_satisfied=a2,
                       assumption_3_satisfied=a3, omega_max=omega_max, warnings=warnings)


# -- confidence audits -------------------------------------------------------


class ConfidenceMonitor:
    """Watches one FAL run and records breaches of its confidence guarantees.

    The good event only changes when an estimate is updated, so checking each
    updated triplet right after the update is equivalent to checking every
    triplet at every round.
    """

    def __init__(self, table: GainTable, sigma: float, delta: float):
        self.table = table
        self.sigma = sigma
        self.delta = delta
        self.econf_violations = 0
        self.first_econf_violation: tuple | None = None
        self.selections = 0
        self.cor1_violations = 0
        self.first_cor1_violation: tuple | None = None

    def on_update(self, rho: int, t: int, x: str, a: str, estimate: float, count: int) -> None:
        true = self.table.g[(t, x, a)]
        conf = confidence_number(count, self.sigma, self.delta, self.table.K)
        if abs(estimate - true) > conf:
            self.econf_violations += 1
            if self.first_econf_violation is None:
                self.first_econf_violation = (rho + 1, t, x, a, estimate, true, conf)

    def on_select(self, rho: int, t: int, x: str, a: str, conf: float) -> None:
        if rho < 2:
            return
        self.selections += 1
        gap = self.table.g_star[(t, x)] - self.table.g[(t, x, a)]
        if gap > 2.0 * conf:
            self.cor1_violations += 1
            if self.first_cor1_violation is None:
                self.first_cor1_violation = (rho, t, x, a, gap, conf)

    @property
    def econf_held(self) -> bool:
        return self.econf_violations == 0


@dataclass
class AuditReport:
    replications: int
    delta: float
    slack: float
    econf_violation_fraction: float
    cor1_violation_fraction: float
    cor1_violating_selections: int
    selections: int
    lemma2_checked: int
    lemma2_violations: list[tuple]

    @property
    def threshold(self) -> float:
        return self.delta + self.slack

    @property
    def lemma1_ok(self) -> bool:
        return self.econf_violation_fraction <= self.threshold

    @property
    def cor1_ok(self) -> bool:
        return self.cor1_violation_fraction <= self.threshold

    @property
    def lemma2_ok(self) -> bool:
        return not self.lemma2_violations

    def to_json_dict(self) -> dict:
        return {
            "replications": self.replications,
            "delta": self.delta,
            "binomial_slack": self.slack,
            "threshold": self.threshold,
            "econf_violation_fraction": self.econf_violation_fraction,
            "cor1_violation_fraction": self.cor1_violation_fraction,
            "cor1_violating_selections": self.cor1_violating_selections,
            "selections": self.selections,
            "lemma2_checked_replications": self.lemma2_checked,
            "lemma2_violations": [list(v) for v in self.lemma2_violations],
            "lemma1_ok": self.lemma1_ok,
            "cor1_ok": self.cor1_ok,
            "lemma2_ok": self.lemma2_ok,
        }


def binomial_slack(delta: float, reps: int) -> float:
    return 3.0 * math.sqrt(delta * (1.0 - delta) / reps)


def lemma2_violations(stats: FalStats, table: GainTable, sigma: float, delta: float) -> list[tuple]:
    out = []
    for t, x, a in suboptimal_triplets(table):
        count = stats.n_action.get((t, x, a), 0)
        cap = lemma2_count_bound(table.delta[(t, x, a)], sigma, table.K, delta)
        if count > cap:
            out.append((t, x, a, count, cap))
    return out


def confidence_audit(monitors: Sequence[ConfidenceMonitor], stats: Sequence[FalStats],
                     table: GainTable, sigma: float, delta: float) -> AuditReport:
    """Aggregate per-replication monitors into violation frequencies.

    Replications in which the good event held also have their final action
    counts checked against the per-triplet count caps.
    """
    reps = len(monitors)
    if reps == 0:
        raise ValueError("no replications to audit")
    econf_bad = sum(1 for m in monitors if not m.econf_held)
    cor1_bad = sum(1 for m in monitors if m.cor1_violations)
    l2: list[tuple] = []
    checked = 0
    for rep, (m, s) in enumerate(zip(monitors, stats)):
        if m.econf_held:
            checked += 1
            l2.extend((rep, *v) for v in lemma2_violations(s, table, sigma, delta))
    return AuditReport(
        replications=reps,
        delta=delta,
        slack=binomial_slack(delta, reps),
        econf_violation_fraction=econf_bad / reps,
        cor1_violation_fraction=cor1_bad / reps,
        cor1_violating_selections=sum(m.cor1_violations for m in monitors),
        selections=sum(m.selections for m in monitors),
        lemma2_checked=checked,
        lemma2_violations=l2,
    )


# -- fixed sequences ---------------------------------------------------------


def enumerate_fixed_sequences(spec: EnvironmentSpec, table: GainTable | None = None
                              ) -> list[tuple[tuple[str, ...], float]]:
    """Exact expected gain of every open-loop action sequence, best first.

    A sequence is infeasible (and omitted) if it prescribes an action that
    is unavailable in some state reached with positive probability.
    """
    m = len(spec.actions)
    count = sum(m**k for k in range(spec.l_max))
    if count > ENUMERATION_GUARD:
        raise ValueError(f"refusing to enumerate {count} fixed sequences (guard {ENUMERATION_GUARD})")

    def stop_value(t: int, dist: dict[str, float]) -> float:
        return math.fsum(p * spec.reward_mean[(t, x)] for x, p in dist.items())

    out: list[tuple[tuple[str, ...], float]] = []

    def walk(prefix: tuple[str, ...], dist: dict[str, float], spent: float) -> None:
        t = len(prefix) + 1
        out.append((prefix, stop_value(t, dist) - spent))
        if t >= spec.l_max:
            return
        for a in spec.actions:
            nxt: dict[str, float] = {}
            cost = 0.0
            feasible = True
            for x, p in dist.items():
                if (t, x, a) not in spec.feedback_dist:
                    feasible = False
                    break
                cost += p * spec.cost_mean[(t, x, a)]
                for q, f in zip(spec.feedback_dist[(t, x, a)], spec.feedbacks):
                    if q > 0:
                        s = spec.state_map[(t, x, a, f)]
                        nxt[s] = nxt.get(s, 0.0) + p * q
            if feasible:
                walk(prefix + (a,), nxt, spent + cost)

    walk((), {x: p for x, p in spec.initial_dist.items() if p > 0}, 0.0)
    out.sort(key=lambda item: -item[1])
    return out
