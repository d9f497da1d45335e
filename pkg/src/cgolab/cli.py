"""Batch experiment driver: ``cgolab <subcommand>``.

Exit codes: 0 success, 2 configuration or input error, 3 verification
failure, 4 solver divergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_io
from .baselines import GoalPredictionAgent, GoalPredictor
from .config import ConfigError, ExperimentConfig, from_dict, load_config
from .evaluation import REPORT_FORMATS, ExperimentReport, PolicyAgent, emit_report
from .mdp import ContextualMdp, MdpError, PolicyTable, build_augmented
from .oracle import QTable, verify_all
from .pipeline import TrainedMethod, build_env, evaluate_method, generate_data, regret, run_seed, train_method
from .solvers import SolverDivergence

log = logging.getLogger("cgolab")

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_DIVERGED = 0, 2, 3, 4
MODEL_FILE = "model.json"


class CliError(Exception):
    """Bad input that is not a config-file problem (missing files, shape mismatch)."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _seed(args, default: int) -> int:
    return default if args.seed is None else args.seed


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg.data.seed = args.seed
    return cfg


def _load_data(data_dir: Path, env):
    try:
        dyn = data_io.load(data_dir / "dyn.jsonl")
        goal = data_io.load(data_dir / "goal.jsonl")
    except OSError as exc:
        raise CliError(f"cannot read dataset: {exc}") from None
    except data_io.DatasetFormatError as exc:
        raise CliError(str(exc)) from None
    if dyn.n_states != env.mdp.n_states or goal.n_contexts != env.n_contexts:
        raise CliError(
            f"dataset shape (S={dyn.n_states}, C={goal.n_contexts}) does not match the configured env "
            f"(S={env.mdp.n_states}, C={env.n_contexts})"
        )
    return dyn, goal


def _model_doc(cfg: ExperimentConfig, trained: TrainedMethod, seed: int, extra: dict) -> dict:
    doc = {"method": trained.name, "seed": seed, "config": cfg.to_dict(), "info": trained.info, **extra}
    if isinstance(trained.agent, GoalPredictionAgent):
        pred = trained.agent.predictor
        doc["kind"] = "goal_pred"
        doc["goal_probs"] = pred.goal_probs.tolist()
        doc["gc_policy"] = pred.gc_policy.to_dict()
        doc["stay_action"] = pred.stay_action
    else:
        doc["kind"] = "policy"
        doc["policy"] = trained.policy.to_dict()
        doc["value_estimate"] = trained.value_estimate
        if trained.q is not None:
            doc["q"] = trained.q.to_dict()
    if trained.reward_model is not None:
        rm = trained.reward_model
        doc["reward_model"] = {"name": rm.name, "threshold": rm.threshold, "kappa": rm.kappa, "members": rm.members.tolist()}
    return doc


def _agent_from_doc(doc: dict, env):
    if doc.get("kind") == "goal_pred":
        pred = GoalPredictor(np.asarray(doc["goal_probs"]), PolicyTable.from_dict(doc["gc_policy"]), doc["stay_action"])
        return TrainedMethod(doc["method"], GoalPredictionAgent(pred, env))
    if doc.get("kind") == "policy":
        policy = PolicyTable.from_dict(doc["policy"])
        q = QTable.from_dict(doc["q"]) if "q" in doc else None
        return TrainedMethod(doc["method"], PolicyAgent(policy), policy, q, doc.get("value_estimate", float("nan")))
    raise CliError(f"unknown model kind {doc.get('kind')!r}")


def _parse_sweep(spec: str) -> tuple:
    """'goal_ratio=0.1,0.3' or 'method.goal_ratio=0.1,0.3' -> ('method', 'goal_ratio', [...])."""
    key, sep, values = spec.partition("=")
    if not sep or not values.strip():
        raise ConfigError(f"sweep {spec!r} must look like key=v1,v2,...")
    section, dot, name = key.strip().rpartition(".")
    section = section if dot else "method"
    return section, name, [v.strip() for v in values.split(",") if v.strip()]


def _with_value(cfg: ExperimentConfig, section: str, name: str, value: str) -> ExperimentConfig:
    doc = cfg.to_dict()
    doc.setdefault(section, {})[name] = value
    return from_dict(doc)


def _sweep_configs(cfg: ExperimentConfig, spec: str) -> list:
    section, name, values = _parse_sweep(spec)
    return [(f"{name}={v}", _with_value(cfg, section, name, v)) for v in values]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    env = build_env(cfg)
    seed = cfg.data.seed
    dyn, goal = generate_data(cfg, env, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_io.save(dyn, out / "dyn.jsonl")
    data_io.save(goal, out / "goal.jsonl")
    manifest = {
        "seed": seed,
        "config": cfg.to_dict(),
        "files": {
            "dyn.jsonl": {"records": len(dyn), "sha256": _sha256(out / "dyn.jsonl")},
            "goal.jsonl": {"records": len(goal), "sha256": _sha256(out / "goal.jsonl")},
        },
    }
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {len(dyn)} dynamics and {len(goal)} context-goal records to {out}")
    return EXIT_OK


def _train_one(cfg: ExperimentConfig, env, dyn, goal, seed: int, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "train.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    try:
        log.info("training %s with %s on %d/%d records, seed %d", cfg.method.name, cfg.method.solver, len(dyn), len(goal), seed)
        trained = train_method(cfg, env, dyn, goal, seed)
        extra = {}
        if trained.policy is not None:
            extra["regret"] = regret(env, trained.policy)
            log.info("value estimate %.4f, exact regret %.4f", trained.value_estimate, extra["regret"])
        _write_json(out / MODEL_FILE, _model_doc(cfg, trained, seed, extra))
    finally:
        log.removeHandler(handler)
        handler.close()
    return {"method": trained.name, **extra}


def cmd_train(args) -> int:
    cfg = _config(args)
    env = build_env(cfg)
    dyn, goal = _load_data(Path(args.data), env)
    seed = _seed(args, cfg.data.seed)
    out = Path(args.out)
    if not args.sweep:
        summary = _train_one(cfg, env, dyn, goal, seed, out)
        print(json.dumps(summary, sort_keys=True))
        return EXIT_OK
    report = ExperimentReport()
    label = f"{cfg.env.map}/{cfg.env.relation}"
    for tag, sub in _sweep_configs(cfg, args.sweep):
        _train_one(sub, env, dyn, goal, seed, out / tag)
        doc = json.loads((out / tag / MODEL_FILE).read_text(encoding="utf-8"))
        result = evaluate_method(sub, env, _agent_from_doc(doc, env), seed)
        report.rows.append(
            {"env": label, "method": f"{sub.method.name}[{tag}]", "seed": seed,
             "success_rate": result.success_rate, "episodes": result.episodes, "mean_steps": result.mean_steps}
        )
    for path in emit_report(report, out, args.formats, stem="sweep"):
        print(f"wrote {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    env = build_env(cfg)
    model_path = Path(args.model)
    if model_path.is_dir():
        model_path = model_path / MODEL_FILE
    try:
        doc = json.loads(model_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read model {model_path}: {exc}") from None
    trained = _agent_from_doc(doc, env)
    seed = _seed(args, cfg.data.seed)
    result = evaluate_method(cfg, env, trained, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = ExperimentReport()
    report.add(f"{cfg.env.map}/{cfg.env.relation}", trained.name, seed, result)
    summary = {"method": trained.name, "seed": seed, "success_rate": result.success_rate,
               "episodes": result.episodes, "mean_steps": result.mean_steps}
    if trained.policy is not None:
        summary["regret"] = regret(env, trained.policy)
    _write_json(out / "eval.json", summary)
    emit_report(report, out, args.formats, stem="eval")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def corrupt_kernel(mdp: ContextualMdp) -> ContextualMdp:
    """Same problem with every next-state distribution shifted by one index."""
    return ContextualMdp(np.roll(mdp.transition, 1, axis=2), mdp.goal_member, mdp.discount, mdp.init_dist, mdp.name + "-corrupt")


def cmd_verify(args) -> int:
    cfg = _config(args)
    mdp = build_env(cfg).mdp
    augmented = build_augmented(corrupt_kernel(mdp)) if args.inject_fault else None
    rng = np.random.default_rng(_seed(args, cfg.data.seed))
    reports = verify_all(mdp, rng, n_policies=args.policies, tol=args.tol, augmented=augmented)
    ok = True
    for rep in reports:
        worst = max(rep.violations.values(), default=0.0)
        print(f"{'PASS' if rep.passed else 'FAIL'} {rep.claim} max violation {worst:.3e} (tol {rep.tol:g})")
        ok &= rep.passed
    if args.out:
        _write_json(Path(args.out), [r.to_dict() for r in reports])
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_report(args) -> int:
    report = ExperimentReport()
    for path in args.runs:
        try:
            report.rows.extend(ExperimentReport.from_csv(Path(path).read_text(encoding="utf-8")).rows)
        except (OSError, KeyError, ValueError) as exc:
            raise CliError(f"cannot read runs from {path}: {exc}") from None
    if not report.rows:
        raise CliError("no runs to report")
    for path in emit_report(report, args.out, args.formats, stem=args.stem):
        print(f"wrote {path}")
    print(report.to_markdown(), end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.eval.seeds = [args.seed]
    env = build_env(cfg)
    label = f"{cfg.env.map}/{cfg.env.relation}"
    report = ExperimentReport()
    for tag, sub in _sweep_configs(cfg, args.param):
        for seed in sub.eval.seeds:
            run = run_seed(sub, seed, env)
            report.rows.append(
                {"env": label, "method": f"{sub.method.name}[{tag}]", "seed": int(seed),
                 "success_rate": run.success_rate, "episodes": sub.eval.episodes, "mean_steps": run.mean_steps}
            )
            log.info("%s seed %d: success %.1f", tag, seed, run.success_rate)
    for path in emit_report(report, args.out, args.formats, stem="sweep"):
        print(f"wrote {path}")
    print(report.to_markdown(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with [env], [data], [method], [eval] tables")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="seed for this run; mandatory in CI mode")
    common.add_argument("--ci", action="store_true", help="CI mode (also enabled by the CI environment variable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cgolab", description="Contextual goal-oriented offline RL experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    formats = dict(nargs="+", choices=REPORT_FORMATS, default=list(REPORT_FORMATS), help="report formats")

    p = sub.add_parser("gen-data", parents=[common], help="write dynamics and context-goal datasets")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train the configured method on a dataset directory")
    p.add_argument("--data", required=True, help="directory written by gen-data")
    p.add_argument("--out", required=True, help="output directory for model.json and train.log")
    p.add_argument("--sweep", metavar="KEY=V1,V2", help="train and evaluate once per value, e.g. goal_ratio=0.1,0.5")
    p.add_argument("--formats", **formats)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="roll out a trained model")
    p.add_argument("--model", required=True, help="model.json or the directory holding it")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--formats", **formats)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", parents=[common], help="check the augmented-MDP equivalences on the configured env")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--policies", type=int, default=10, help="random policies per claim")
    p.add_argument("--inject-fault", action="store_true", help="corrupt the augmented kernel (self-test)")
    p.add_argument("--out", help="optional JSON report path")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", parents=[common], help="merge run CSVs into csv/md/svg reports")
    p.add_argument("runs", nargs="+", help="CSV files written by eval or sweep")
    p.add_argument("--out", required=True)
    p.add_argument("--stem", default="report")
    p.add_argument("--formats", **formats)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", parents=[common], help="full train/eval runs over one config key")
    p.add_argument("--param", required=True, metavar="KEY=V1,V2", help="e.g. method.goal_ratio=0.1,0.3,0.5")
    p.add_argument("--out", required=True)
    p.add_argument("--formats", **formats)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    for handler in logging.getLogger().handlers:
        handler.setLevel(logging.INFO if args.verbose else logging.WARNING)
    # INFO records always reach train.log; the console handler filters them
    log.setLevel(logging.INFO)
    ci = args.ci or os.environ.get("CI", "").lower() not in ("", "0", "false")
    if ci and args.seed is None and args.command != "report":
        print("error: --seed is required in CI mode", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, CliError, MdpError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverDivergence as exc:
        print(f"error: solver diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
