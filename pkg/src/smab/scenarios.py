"""Canonical environments.

* ``worked_example_env`` is the two-treatment, three-stage instance whose
  benchmark earns 9.2 per round against 9.1 for the best fixed sequence.
* ``submodular_env`` encodes adaptive set-function maximization with
  independent item states as a staged bandit.
* ``screening_env`` builds a synthetic breast-screening cohort. The cohort
  (with a latent cancer label per patient) is the ground truth the
  simulator plays against; the returned EnvironmentSpec is a Markov
  surrogate of it used for inspection and gain tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from itertools import combinations, product
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import INITIAL_STATE, STOP, EnvironmentSpec, NoiseModel, SpecError, validate_spec
from .engine import COHORT, ConfigError, RngStream, RoundDraws, SpecEnvironment
from .policies import BENIGN, MALIGNANT, FrequencyPredictor, ThresholdPredictor

# -- worked example ------------------------------------------------------------

WE_ACTIONS = ("a", "b")
WE_FEEDBACKS = ("-1", "1")
# joint feedback probabilities for the sequence (a, b)
WE_JOINT_AB = {("-1", "-1"): 0.3, ("-1", "1"): 0.2, ("1", "1"): 0.4, ("1", "-1"): 0.1}
WE_STAGE2_REWARD = {("a", "1"): 12.0, ("b", "1"): 6.0, ("a", "-1"): 0.0, ("b", "-1"): 0.0}
WE_STAGE3_REWARD_AB = {("1", "1"): 13.0, ("1", "-1"): 12.0, ("-1", "1"): 10.0, ("-1", "-1"): 9.0}


def history_state(actions: Sequence[str], feedbacks: Sequence[str]) -> str:
    if not actions:
        return INITIAL_STATE
    return "(" + ",".join([*actions, *feedbacks]) + ")"


def worked_example_env(noise: NoiseModel | None = None, initial_reward: float = 0.0) -> EnvironmentSpec:
    """Three-stage treatment example with history-valued states."""
    p_first = {"a": 0.5, "b": 0.5}
    fd, sm, cm, rm = {}, {}, {}, {}
    rm[(1, INITIAL_STATE)] = initial_reward
    for a1 in WE_ACTIONS:
        probs = (1.0 - p_first[a1], p_first[a1])
        fd[(1, INITIAL_STATE, a1)] = probs
        cm[(1, INITIAL_STATE, a1)] = 1.0
        for f1 in WE_FEEDBACKS:
            x2 = history_state((a1,), (f1,))
            sm[(1, INITIAL_STATE, a1, f1)] = x2
            rm[(2, x2)] = WE_STAGE2_REWARD[(a1, f1)]
            for a2 in WE_ACTIONS:
                if (a1, a2) == ("a", "b"):
                    marginal = WE_JOINT_AB[(f1, "-1")] + WE_JOINT_AB[(f1, "1")]
                    probs2 = tuple(WE_JOINT_AB[(f1, f2)] / marginal for f2 in WE_FEEDBACKS)
                else:
                    probs2 = (0.5, 0.5)
                fd[(2, x2, a2)] = probs2
                cm[(2, x2, a2)] = 1.0
                for f2 in WE_FEEDBACKS:
                    x3 = history_state((a1, a2), (f1, f2))
                    sm[(2, x2, a2, f2)] = x3
                    rm[(3, x3)] = WE_STAGE3_REWARD_AB[(f1, f2)] if (a1, a2) == ("a", "b") else 0.0
    states = [INITIAL_STATE]
    for t in (2, 3):
        states.extend(x for (s, x) in rm if s == t)
    spec = EnvironmentSpec(
        l_max=3, states=tuple(states), actions=WE_ACTIONS, feedbacks=WE_FEEDBACKS,
        feedback_dist=fd, state_map=sm, cost_mean=cm, reward_mean=rm,
        c_max=1.0, r_max=13.0, noise=noise or NoiseModel(),
    )
    return validate_spec(spec)


# -- adaptive submodular reduction -------------------------------------------

SetFunction = Callable[[frozenset, Mapping[str, int]], float]


def observation_state(items: Sequence[str], observed: Mapping[str, int]) -> str:
    """State id of the pair (selected set, observed item states)."""
    if not observed:
        return INITIAL_STATE
    return "{" + ",".join(f"{i}:{observed[i]:+d}" for i in items if i in observed) + "}"


def coverage_function(cover: Mapping[str, set]) -> SetFunction:
    """Number of elements covered by the selected items whose state is +1."""
    def h(chosen: frozenset, s: Mapping[str, int]) -> float:
        covered: set = set()
        for i in chosen:
            if s[i] == 1:
                covered |= set(cover[i])
        return float(len(covered))
    return h


def modular_function(chosen: frozenset, s: Mapping[str, int]) -> float:
    return float(sum(1 for i in chosen if s[i] == 1))


def submodular_env(ground_set: Sequence[str], item_state_priors: Mapping[str, float], h: SetFunction,
                   budget: int | None = None, noise: NoiseModel | None = None) -> EnvironmentSpec:
    """Staged bandit whose benchmark is the adaptive greedy policy for ``h``.

    Costs are zero, the feedback of an item is its state in {-1, +1}, and a
    state records which items were picked and what they revealed, so an
    item can never be picked twice. ``budget`` caps the number of picks
    (default: the whole ground set).
    """
    items = tuple(ground_set)
    if len(items) > 6:
        raise SpecError("submodular reduction is limited to 6 items")
    for i in items:
        p = item_state_priors[i]
        if not 0.0 <= p <= 1.0:
            raise SpecError(f"prior {p!r} of item {i!r} is not a probability")
    k = len(items) if budget is None else min(budget, len(items))
    l_max = k + 1
    feedbacks = ("-1", "1")
    fd, sm, cm, rm = {}, {}, {}, {}
    states: list[str] = []
    for size in range(0, k + 1):
        for chosen in combinations(items, size):
            for vals in product((-1, 1), repeat=size):
                obs = dict(zip(chosen, vals))
                x = observation_state(items, obs)
                states.append(x)
                t = size + 1
                rm[(t, x)] = h(frozenset(chosen), obs)
                if t >= l_max:
                    continue
                for i in items:
                    if i in obs:
                        continue
                    p = item_state_priors[i]
                    fd[(t, x, i)] = (1.0 - p, p)
                    cm[(t, x, i)] = 0.0
                    for f in feedbacks:
                        sm[(t, x, i, f)] = observation_state(items, {**obs, i: int(f)})
    r_max = max(rm.values())
    if min(rm.values()) < 0:
        raise SpecError("set function must be nonnegative")
    spec = EnvironmentSpec(
        l_max=l_max, states=tuple(states), actions=items, feedbacks=feedbacks,
        feedback_dist=fd, state_map=sm, cost_mean=cm, reward_mean=rm,
        c_max=0.0, r_max=r_max, noise=noise or NoiseModel(),
    )
    return validate_spec(spec)


def default_coverage_instance() -> tuple[tuple[str, ...], dict[str, float], SetFunction]:
    """Three items, each with an element no other item covers."""
    cover = {"i1": {1, 2}, "i2": {2, 3, 6}, "i3": {3, 4, 5}}
    priors = {"i1": 0.5, "i2": 0.6, "i3": 0.3}
    return tuple(cover), priors, coverage_function(cover)


# -- synthetic screening cohort ------------------------------------------------

RISK_STATES = ("very unlikely", "unlikely", "likely", "very likely")
MODALITIES = ("MG", "US", "MR")
BIRADS = ("1", "2", "3", "4", "5", "6")
RISK_CRITERIA = ("breast_density", "family_history", "early_menarche", "previous_biopsy")


def risk_state_from_score(score: int) -> str:
    """BI-RADS 1, 2, 3, >=4 map to the four risk levels in increasing order."""
    return RISK_STATES[min(score, 4) - 1]


def risk_state_from_count(count: int) -> str:
    return RISK_STATES[min(count, 3)]


@dataclass(frozen=True)
class CohortConfig:
    prevalence: float = 0.0268
    cohort_size: int = 24484
    # chance that each risk criterion is met, by label
    risk_factor_prob: Mapping[str, float] = field(
        default_factory=lambda: {MALIGNANT: 0.45, BENIGN: 0.15})
    # BI-RADS 1..6 emission probabilities per modality and label
    emission: Mapping[str, Mapping[str, tuple[float, ...]]] = field(default_factory=lambda: {
        "MG": {BENIGN: (0.60, 0.28, 0.09, 0.025, 0.005, 0.0),
               MALIGNANT: (0.08, 0.12, 0.20, 0.35, 0.22, 0.03)},
        "US": {BENIGN: (0.50, 0.33, 0.12, 0.04, 0.01, 0.0),
               MALIGNANT: (0.06, 0.10, 0.18, 0.36, 0.26, 0.04)},
        "MR": {BENIGN: (0.55, 0.30, 0.12, 0.025, 0.005, 0.0),
               MALIGNANT: (0.02, 0.03, 0.05, 0.30, 0.45, 0.15)},
    })
    cost: Mapping[str, float] = field(default_factory=lambda: {"MG": 0.2, "US": 0.5, "MR": 0.8})
    reward_detection: float = 10.0
    reward_correct_negative: float = 2.0
    reward_missed: float = 0.0
    reward_false_alarm: float = 0.5
    noise: NoiseModel = field(default_factory=NoiseModel)

    def __post_init__(self):
        if not 0.0 < self.prevalence < 1.0:
            raise SpecError(f"prevalence must be in (0, 1), got {self.prevalence!r}")
        for m in MODALITIES:
            for label in (BENIGN, MALIGNANT):
                probs = self.emission[m][label]
                if len(probs) != len(BIRADS) or abs(math.fsum(probs) - 1.0) > 1e-9 or min(probs) < 0:
                    raise SpecError(f"emission table for {m}/{label} is not a distribution over BI-RADS 1-6")

    def reward(self, prediction: str, label: str) -> float:
        if label == MALIGNANT:
            return self.reward_detection if prediction == MALIGNANT else self.reward_missed
        return self.reward_false_alarm if prediction == MALIGNANT else self.reward_correct_negative


@dataclass(frozen=True)
class Patient:
    label: str
    risk_count: int
    dense: bool

    @property
    def initial_state(self) -> str:
        return risk_state_from_count(self.risk_count)

    @property
    def high_risk(self) -> bool:
        return self.risk_count >= 2


def generate_cohort(config: CohortConfig, rng: np.random.Generator) -> list[Patient]:
    n = config.cohort_size
    malignant = rng.random(n) < config.prevalence
    q = np.where(malignant, config.risk_factor_prob[MALIGNANT], config.risk_factor_prob[BENIGN])
    criteria = rng.random((n, len(RISK_CRITERIA))) < q[:, None]
    counts = criteria.sum(axis=1)
    return [Patient(MALIGNANT if m else BENIGN, int(c), bool(row[0]))
            for m, c, row in zip(malignant.tolist(), counts.tolist(), criteria.tolist())]


def _binom_pmf(k: int, n: int, p: float) -> float:
    return math.comb(n, k) * p**k * (1 - p) ** (n - k)


def _initial_state_likelihood(config: CohortConfig, label: str) -> dict[str, float]:
    q = config.risk_factor_prob[label]
    m = len(RISK_CRITERIA)
    out = dict.fromkeys(RISK_STATES, 0.0)
    for c in range(m + 1):
        out[risk_state_from_count(c)] += _binom_pmf(c, m, q)
    return out


def screening_surrogate(config: CohortConfig) -> EnvironmentSpec:
    """Markov approximation of the cohort with a per-state malignancy posterior.

    Stage-1 posteriors follow from the risk-factor model; later stages use
    the posterior implied by the last BI-RADS bucket under the average
    emission of the three modalities.
    """
    prev = config.prevalence
    lik = {lab: _initial_state_likelihood(config, lab) for lab in (BENIGN, MALIGNANT)}
    initial = {x: prev * lik[MALIGNANT][x] + (1 - prev) * lik[BENIGN][x] for x in RISK_STATES}
    post1 = {x: prev * lik[MALIGNANT][x] / initial[x] for x in RISK_STATES}

    def bucket_lik(label: str) -> dict[str, float]:
        out = dict.fromkeys(RISK_STATES, 0.0)
        for m in MODALITIES:
            for s, p in zip(BIRADS, config.emission[m][label]):
                out[risk_state_from_score(int(s))] += p / len(MODALITIES)
        return out

    blik = {lab: bucket_lik(lab) for lab in (BENIGN, MALIGNANT)}
    post_later = {}
    for x in RISK_STATES:
        num = prev * blik[MALIGNANT][x]
        den = num + (1 - prev) * blik[BENIGN][x]
        post_later[x] = num / den if den > 0 else prev

    def expected_reward(pm: float) -> float:
        pred = MALIGNANT if pm > 0.5 else BENIGN
        return pm * config.reward(pred, MALIGNANT) + (1 - pm) * config.reward(pred, BENIGN)

    l_max = len(MODALITIES) + 1
    fd, sm, cm, rm = {}, {}, {}, {}
    for t in range(1, l_max + 1):
        post = post1 if t == 1 else post_later
        for x in RISK_STATES:
            rm[(t, x)] = expected_reward(post[x])
            if t == l_max:
                continue
            for a in MODALITIES:
                em = config.emission[a]
                fd[(t, x, a)] = tuple(post[x] * pm + (1 - post[x]) * pb
                                      for pm, pb in zip(em[MALIGNANT], em[BENIGN]))
                cm[(t, x, a)] = config.cost[a]
                for s in BIRADS:
                    sm[(t, x, a, s)] = risk_state_from_score(int(s))
    rewards = (config.reward_detection, config.reward_correct_negative,
               config.reward_missed, config.reward_false_alarm)
    spec = EnvironmentSpec(
        l_max=l_max, states=RISK_STATES, actions=MODALITIES, feedbacks=BIRADS,
        feedback_dist=fd, state_map=sm, cost_mean=cm, reward_mean=rm,
        c_max=max(config.cost.values()), r_max=max(rewards), noise=config.noise,
        initial_dist=initial,
    )
    return validate_spec(spec)


def screening_env(cohort_config: CohortConfig | None = None,
                  rng: np.random.Generator | int | None = None) -> tuple[EnvironmentSpec, list[Patient]]:
    """Surrogate spec and synthetic patient cohort for the screening scenario."""
    config = cohort_config or CohortConfig()
    if rng is None or isinstance(rng, int):
        rng = RngStream(rng or 0, (COHORT,)).generator()
    return screening_surrogate(config), generate_cohort(config, rng)


def default_predictor(policy_name: str):
    """The guideline uses its score-threshold rule; learners use the frequency table."""
    return ThresholdPredictor() if policy_name == "guideline" else FrequencyPredictor()


class CohortEnvironment:
    """Plays rounds against patients drawn from a synthetic cohort.

    Each round samples a patient; feedback scores come from the patient's
    latent label, and the terminal reward of stopping at stage t is the
    payoff of the predictor's call from what was seen before stage t.
    True gains are unknown here, so ``table`` is None and no regret is
    computed.
    """

    table = None

    def __init__(self, spec: EnvironmentSpec, cohort: Sequence[Patient], config: CohortConfig,
                 predictor=None):
        self.spec = spec
        self.cohort = list(cohort)
        self.config = config
        self.predictor = predictor or FrequencyPredictor()
        self.l_max = spec.l_max
        self.states = spec.states
        self.actions = spec.actions
        self._cum = {(m, lab): np.cumsum(config.emission[m][lab]).tolist()
                     for m in MODALITIES for lab in (BENIGN, MALIGNANT)}
        self._patient: Patient | None = None
        self._scores: list[int] = []
        self._used: list[str] = []

    def fresh(self, policy_name: str = "") -> "CohortEnvironment":
        return CohortEnvironment(self.spec, self.cohort, self.config, default_predictor(policy_name))

    def start_round(self, rho: int, draws: RoundDraws) -> tuple[str, dict]:
        idx = min(int(draws.initial_u * len(self.cohort)), len(self.cohort) - 1)
        p = self.cohort[idx]
        self._patient = p
        self._scores = []
        self._used = []
        return p.initial_state, {"initial_state": p.initial_state, "dense": p.dense,
                                 "high_risk": p.high_risk}

    def continuation_actions(self, t: int, x: str) -> Sequence[str]:
        """Modalities not yet used this round (each is applied at most once)."""
        if t >= self.l_max:
            return ()
        return tuple(a for a in self.actions if a not in self._used)

    def step(self, t: int, x: str, a: str, u: float) -> tuple[str, str]:
        cum = self._cum[(a, self._patient.label)]
        score = len(cum)
        for i, c in enumerate(cum):
            if u < c:
                score = i + 1
                break
        self._scores.append(score)
        self._used.append(a)
        return str(score), risk_state_from_score(score)

    def outcomes(self, states, actions, draws: RoundDraws):
        cfg = self.config
        sigma = cfg.noise.sigma
        label = self._patient.label
        T = len(actions)
        costs = tuple(cfg.cost[actions[t]] + sigma * draws.cost_noise[t] for t in range(T - 1))
        preds = [self.predictor.predict(self._scores[:t], states[t]) for t in range(T)]
        rewards = tuple(cfg.reward(preds[t], label) + sigma * draws.reward_noise[t] for t in range(T))
        for x in states:
            self.predictor.learn(x, label)
        return costs, rewards, {"label": label, "prediction": preds[-1]}


# -- random small instances ----------------------------------------------------


def random_env(rng: np.random.Generator | int, l_max: int | None = None, n_states: int | None = None,
               n_actions: int | None = None, n_feedbacks: int = 2, drop_prob: float = 0.15,
               noise: NoiseModel | None = None) -> EnvironmentSpec:
    """Random instance with at most 3 stages, 4 states and 3 actions by default.

    Each non-initial state exists at every stage >= 2; some (state, action)
    pairs are dropped at random so that action availability varies.
    """
    if isinstance(rng, int):
        rng = np.random.default_rng(rng)
    l_max = l_max or int(rng.integers(2, 4))
    n_states = n_states or int(rng.integers(2, 5))
    n_actions = n_actions or int(rng.integers(1, 4))
    states = (INITIAL_STATE, *(f"s{i}" for i in range(1, n_states)))
    later = states[1:] or (INITIAL_STATE,)
    actions = tuple(f"a{i}" for i in range(1, n_actions + 1))
    feedbacks = tuple(f"f{i}" for i in range(1, n_feedbacks + 1))
    fd, sm, cm, rm = {}, {}, {}, {}
    for t in range(1, l_max + 1):
        here = (INITIAL_STATE,) if t == 1 else later
        for x in here:
            rm[(t, x)] = float(np.round(rng.uniform(0, 10), 6))
            if t == l_max:
                continue
            for a in actions:
                if rng.random() < drop_prob:
                    continue
                w = rng.random(n_feedbacks) + 0.05
                fd[(t, x, a)] = tuple((w / w.sum()).tolist())
                cm[(t, x, a)] = float(np.round(rng.uniform(0, 2), 6))
                for f in feedbacks:
                    sm[(t, x, a, f)] = later[int(rng.integers(len(later)))]
    spec = EnvironmentSpec(
        l_max=l_max, states=states, actions=actions, feedbacks=feedbacks,
        feedback_dist=fd, state_map=sm, cost_mean=cm, reward_mean=rm,
        c_max=2.0, r_max=10.0, noise=noise or NoiseModel(),
    )
    return validate_spec(spec)


# -- environment resolution ------------------------------------------------------

SCENARIOS = ("worked-example", "submodular", "screening", "random")


def _noise_from(params: Mapping) -> NoiseModel:
    return NoiseModel(family=str(params.get("noise_family", "gaussian")), sigma=float(params.get("sigma", 0.0)))


def scenario_spec(name: str, params: Mapping | None = None, seed: int = 0) -> EnvironmentSpec:
    """EnvironmentSpec for a named scenario (the surrogate spec for screening)."""
    params = dict(params or {})
    if name == "worked-example":
        return worked_example_env(_noise_from(params), float(params.get("initial_reward", 0.0)))
    if name == "submodular":
        items, priors, h = default_coverage_instance()
        if "cover" in params:
            cover = {k: set(v) for k, v in params["cover"].items()}
            items, h = tuple(cover), coverage_function(cover)
            priors = {i: 0.5 for i in items}
        priors = {**priors, **params.get("priors", {})}
        return submodular_env(items, priors, h, params.get("budget"), _noise_from(params))
    if name == "screening":
        return screening_surrogate(cohort_config_from(params))
    if name == "random":
        return random_env(int(params.get("seed", seed)), noise=_noise_from(params))
    raise ConfigError(f"unknown scenario {name!r}; choose from {SCENARIOS}")


def cohort_config_from(params: Mapping) -> CohortConfig:
    cfg = CohortConfig()
    overrides = {k: v for k, v in params.items() if k in CohortConfig.__dataclass_fields__}
    if "sigma" in params or "noise_family" in params:
        overrides["noise"] = _noise_from(params)
    try:
        return replace(cfg, **overrides)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def resolve_environment(env_ref: Mapping, seed: int = 0):
    """Build the simulation environment an experiment config refers to."""
    if "scenario" in env_ref:
        name = env_ref["scenario"]
        params = env_ref.get("params", {}) or {}
        if name == "screening":
            cfg = cohort_config_from(params)
            spec, cohort = screening_env(cfg, RngStream(seed, (COHORT,)).generator())
            return CohortEnvironment(spec, cohort, cfg)
        return SpecEnvironment(scenario_spec(name, params, seed))
    if "path" in env_ref:
        path = Path(env_ref["path"])
        if not path.exists():
            raise ConfigError(f"environment file {path} does not exist")
        return SpecEnvironment(validate_spec(EnvironmentSpec.load(path)))
    if "inline" in env_ref:
        return SpecEnvironment(validate_spec(EnvironmentSpec.from_json_dict(env_ref["inline"])))
    raise ConfigError("env must name a scenario, a path or an inline spec")
