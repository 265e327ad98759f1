"""Command line front end: ``smab <command> ...``.

Exit status is 0 on success, 2 for malformed input (bad config, bad spec,
missing file) and 3 when a runtime invariant breaks during a run.
Set ``SMAB_LOG`` to a logging level name (DEBUG, INFO, ...) for more output.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from .analysis import confidence_audit, enumerate_fixed_sequences, theorem_bounds
from .core import EnvironmentSpec, SpecError, validate_spec
from .engine import ConfigError, ContractViolation, ExperimentConfig, fal_params_from, run_experiment
from .scenarios import SCENARIOS, resolve_environment, scenario_spec

log = logging.getLogger("smab")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3


class InputError(Exception):
    """Bad command line input; maps to exit status 2."""


def _parse_param(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise InputError(f"--param expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _read_json(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise InputError(f"file {path} does not exist")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def _env_ref(args, base: dict | None = None) -> dict:
    ref = dict(base or {})
    if getattr(args, "env", None):
        ref = {"path": args.env}
    elif getattr(args, "scenario", None):
        ref = {"scenario": args.scenario, "params": {}}
    params = [_parse_param(p) for p in getattr(args, "param", None) or []]
    if params:
        if "scenario" not in ref:
            raise InputError("--param only applies to a named scenario")
        ref["params"] = {**ref.get("params", {}), **dict(params)}
    if not ref:
        raise InputError("name an environment with --env FILE or --scenario NAME")
    return ref


def _load_env(args, base: dict | None = None):
    return resolve_environment(_env_ref(args, base), getattr(args, "seed", None) or 0)


def _print_json(doc) -> None:
    print(json.dumps(doc, indent=2, ensure_ascii=False))


# -- commands ------------------------------------------------------------------


def cmd_validate(args) -> int:
    spec = validate_spec(EnvironmentSpec.from_json_dict(_read_json(args.spec)))
    print(f"{args.spec}: valid (l_max={spec.l_max}, {len(spec.states)} states, "
          f"{len(spec.actions)} actions, K={spec.K})")
    return EXIT_OK


def cmd_gains(args) -> int:
    env = _load_env(args)
    if env.table is None:
        raise InputError("this environment has no gain table")
    _print_json(env.table.to_json_dict())
    return EXIT_OK


def cmd_bounds(args) -> int:
    env = _load_env(args)
    if env.table is None:
        raise InputError("this environment has no gain table")
    if args.delta is None and args.n is None:
        raise InputError("bounds needs --delta, --n or both")
    report = theorem_bounds(env.table, args.sigma, delta=args.delta, n=args.n)
    if args.json:
        _print_json(report.to_json_dict())
        return EXIT_OK
    print(f"sigma={report.sigma} K={report.K} delta={report.delta} n={report.n}")
    print(f"assumption 2 (stop strictly better or worse): {report.assumption_2_satisfied}")
    print(f"assumption 3 (early deviation): {report.assumption_3_satisfied}")
    print(f"omega_max={report.omega_max:.6g}")
    for name, v in (("thm1", report.thm1_total), ("thm2", report.thm2_total), ("cor2", report.cor2_total)):
        print(f"{name}: {'n/a' if v is None else f'{v:.6g}'}")
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def cmd_enumerate_fixed(args) -> int:
    env = _load_env(args)
    spec = getattr(env, "spec", None)
    rows = enumerate_fixed_sequences(spec, env.table)
    if args.top:
        rows = rows[: args.top]
    for seq, value in rows:
        print(f"{'(' + ','.join(seq) + ')':<24} {value:.12g}")
    if env.table is not None:
        print(f"{'benchmark':<24} {env.table.benchmark_value:.12g}")
    return EXIT_OK


def cmd_scenario_emit(args) -> int:
    params = dict(_parse_param(p) for p in args.param or [])
    spec = validate_spec(scenario_spec(args.name, params, args.seed))
    if args.out:
        spec.save(args.out)
        log.info("wrote %s", args.out)
    else:
        print(spec.dumps())
    return EXIT_OK


def build_config(args) -> ExperimentConfig:
    """Merge the optional config file with command line flags (flags win)."""
    doc = _read_json(args.config) if args.config else {}
    if not isinstance(doc, dict):
        raise InputError("config must be a JSON object")
    try:
        cfg = ExperimentConfig.from_dict({"env": {}, "policy": {"name": "fal"}, "horizon": 0, **doc})
    except ConfigError as exc:
        raise InputError(f"{args.config}: {exc}") from exc
    cfg.env = _env_ref(args, cfg.env)
    policy = dict(cfg.policy)
    if args.policy:
        if args.policy != policy.get("name"):
            policy = {}
        policy["name"] = args.policy
    for key in ("delta", "sigma", "epsilon", "mask", "seq"):
        v = getattr(args, key)
        if v is not None:
            policy[key] = v
    if args.delta_mode:
        policy["delta_mode"] = args.delta_mode
    cfg.policy = policy
    if args.n is not None:
        cfg.horizon = args.n
    if args.reps is not None:
        cfg.replications = args.reps
    cfg.seed = args.seed
    if args.coupling:
        cfg.coupling = args.coupling
    if args.checkpoints:
        try:
            cfg.checkpoints = tuple(int(c) for c in args.checkpoints.split(",") if c)
        except ValueError as exc:
            raise InputError(f"bad --checkpoints {args.checkpoints!r}") from exc
    if args.jobs is not None:
        cfg.jobs = args.jobs
    if args.audit:
        cfg.audit = True
    if args.check_traces:
        cfg.check_traces = True
    if args.csv:
        cfg.csv_path = args.csv
    if args.json:
        cfg.json_path = args.json
    return cfg.validate()


def regret_table(result, bounds_by_round: dict) -> list[str]:
    lines = [f"{'round':>8} {'mean_regret':>14} {'std':>12} {'thm1':>12} {'thm2':>12} {'cor2':>12} {'utility':>10}"]

    def cell(v):
        return f"{'n/a':>12}" if v is None else f"{v:12.4g}"

    for row in result.checkpoint_summary():
        b = bounds_by_round.get(row["round"], {})
        mean = row["mean_cumulative_regret"]
        lines.append(f"{row['round']:>8} {'n/a' if mean is None else f'{mean:.6g}':>14} "
                     f"{cell(row['std_cumulative_regret'])} {cell(b.get('thm1'))} "
                     f"{cell(b.get('thm2'))} {cell(b.get('cor2'))} {row['mean_utility']:10.4f}")
    return lines


def cmd_run(args) -> int:
    cfg = build_config(args)
    started = time.perf_counter()
    env = resolve_environment(cfg.env, cfg.seed)
    result = run_experiment(cfg, env)
    log.info("ran %d x %d rounds in %.2fs", cfg.replications, cfg.horizon, time.perf_counter() - started)

    bounds = audit = None
    by_round: dict[int, dict] = {}
    if env.table is not None and cfg.policy["name"] == "fal" and cfg.horizon >= 2:
        p = fal_params_from(cfg.policy, cfg.horizon)
        bounds = theorem_bounds(env.table, p.sigma, delta=p.delta, n=cfg.horizon)
        for c in cfg.effective_checkpoints:
            b = theorem_bounds(env.table, p.sigma, delta=p.delta, n=max(c, 2))
            by_round[c] = {"thm1": b.thm1_total, "thm2": b.thm2_total, "cor2": b.cor2_total}
        if cfg.audit:
            audit = confidence_audit(result.monitors, result.final_stats, env.table, p.sigma, p.delta)

    if cfg.csv_path:
        result.write_csv(cfg.csv_path)
    if cfg.json_path:
        result.write_json(cfg.json_path, bounds, audit)
    for line in regret_table(result, by_round):
        print(line)
    if audit is not None:
        print(f"E_conf violated in {audit.econf_violation_fraction:.3f} of replications "
              f"(threshold {audit.threshold:.3f}); 2*conf rule broken in "
              f"{audit.cor1_violation_fraction:.3f}; count-cap violations: {len(audit.lemma2_violations)}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _add_env_args(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--env", metavar="FILE", help="EnvironmentSpec JSON file")
    g.add_argument("--scenario", choices=SCENARIOS, help="built-in scenario")
    p.add_argument("--param", action="append", metavar="KEY=VALUE",
                   help="scenario parameter (value parsed as JSON when possible); repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smab", description="Staged multi-armed bandit simulator and regret analysis.",
        epilog="Exit status: 0 ok, 2 malformed input, 3 runtime invariant violation. "
               "SMAB_LOG sets the log level.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check an EnvironmentSpec JSON file")
    p.add_argument("spec", help="EnvironmentSpec JSON file")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("gains", help="print the gain table (y, g, gaps, optimal sets, values) as JSON")
    _add_env_args(p)
    p.set_defaults(func=cmd_gains)

    p = sub.add_parser("bounds", help="evaluate the regret bounds for an environment")
    _add_env_args(p)
    p.add_argument("--sigma", type=float, required=True, help="sub-Gaussian noise parameter")
    p.add_argument("--delta", type=float, help="confidence parameter (fixed-delta bound)")
    p.add_argument("--n", type=int, help="horizon (delta = 1/n bounds)")
    p.add_argument("--json", action="store_true", help="emit the full report as JSON")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("enumerate-fixed", help="expected gain of every fixed action sequence")
    _add_env_args(p)
    p.add_argument("--top", type=int, default=0, help="only show the best TOP sequences")
    p.set_defaults(func=cmd_enumerate_fixed)

    p = sub.add_parser("run", help="simulate a policy and report regret against the bounds")
    p.add_argument("--config", metavar="FILE", help="ExperimentConfig JSON; flags override its fields")
    _add_env_args(p)
    p.add_argument("--policy", choices=("benchmark", "fal", "fixed", "guideline", "cbb"))
    p.add_argument("--delta", type=float, help="FAL confidence parameter")
    p.add_argument("--delta-mode", choices=("fixed", "one-over-n"), help="one-over-n sets delta = 1/n")
    p.add_argument("--sigma", type=float, help="FAL sub-Gaussian parameter")
    p.add_argument("--epsilon", type=float, help="FAL bias added to the stop action")
    p.add_argument("--mask", choices=("none", "once-per-round"), help="FAL action masking")
    p.add_argument("--seq", help="comma separated actions for the fixed policy")
    p.add_argument("--n", type=int, help="rounds per replication")
    p.add_argument("--reps", type=int, help="replications")
    p.add_argument("--seed", type=int, required=True, help="master seed (required)")
    p.add_argument("--coupling", choices=("independent", "common-random-numbers"))
    p.add_argument("--checkpoints", help="comma separated rounds for the regret table")
    p.add_argument("--jobs", type=int, help="worker processes over replications")
    p.add_argument("--audit", action="store_true", help="audit FAL's confidence guarantees")
    p.add_argument("--check-traces", action="store_true", help="verify every round trace")
    p.add_argument("--csv", metavar="FILE", help="per-round regret curve")
    p.add_argument("--json", metavar="FILE", help="summary with bounds and audit")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("scenario", help="scenario builders")
    ssub = p.add_subparsers(dest="scenario_command", required=True)
    e = ssub.add_parser("emit", help="write a scenario's EnvironmentSpec JSON")
    e.add_argument("name", choices=SCENARIOS)
    e.add_argument("--out", metavar="FILE", help="output file (default: stdout)")
    e.add_argument("--param", action="append", metavar="KEY=VALUE", help="scenario parameter; repeatable")
    e.add_argument("--seed", type=int, default=0, help="seed for the random scenario")
    e.set_defaults(func=cmd_scenario_emit)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("SMAB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, ConfigError, SpecError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ContractViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        if exc.trace is not None:
            print(json.dumps(exc.trace, indent=2, default=str), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
