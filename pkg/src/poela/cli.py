"""Command-line interface: ``poela <command> ...``.

Exit codes: 0 on success, 1 on validation errors (bad input, failed
verification), 2 on runtime failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import behavior as bh
from . import estimators as est
from . import harness as hs
from . import learners as lrn
from .bootstrap import bca_interval
from .data import SplitSpec, load_dataset, save_dataset, split
from .envs import EnvSpec, generate_logged_data, make_env, mc_value
from .errors import DatasetError, PoelaError
from .policy import SoftmaxPolicy, load_policy

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ValidationFailure(Exception):
    pass


def _param(text: str):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def _env_spec(args) -> EnvSpec | None:
    if getattr(args, "env", None) is None:
        return None
    return EnvSpec(args.env, dict(args.param or []), args.env_seed)


def _add_env_args(p, required=False):
    p.add_argument("--env", required=required, help="environment tag, e.g. example2")
    p.add_argument("--param", action="append", type=_param, metavar="KEY=VALUE",
                   help="environment parameter (repeatable)")
    p.add_argument("--env-seed", type=int, default=0)


def _print(obj):
    print(json.dumps(obj, indent=1, sort_keys=True))


def _masked_policy(policy_path: Path):
    """Load a checkpoint; inside a run directory, restore its cell's masks."""
    params, meta = load_policy(policy_path)
    manifest = policy_path.parent / "manifest.json"
    run = policy_path.parent.parent.parent
    if manifest.exists() and (run / "config.json").exists():
        cfg = hs.ExperimentConfig.from_dict(json.loads((run / "config.json").read_text()))
        tc = lrn.TrainConfig.from_dict(json.loads(manifest.read_text())["config"])
        train = load_dataset(run / "data" / "train.ds.jsonl")
        behavior = hs.make_behavior(cfg.behavior_source, cfg.data, train)
        return lrn.mask_context(tc, train, behavior).policy(params), tc.M
    return SoftmaxPolicy(params), math.inf


# --- commands ------------------------------------------------------------


def cmd_gen_data(args):
    env = make_env(_env_spec(args))
    ds = generate_logged_data(env, args.behavior, args.n, args.seed)
    save_dataset(ds, args.out)
    _print({"out": str(args.out), "n": ds.n, "steps": ds.n_steps, "fingerprint": ds.fingerprint})


def cmd_split(args):
    ds = load_dataset(args.data)
    parts = split(ds, SplitSpec(args.train, args.val, args.test, args.seed))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    info = {}
    for name, part in zip(("train", "val", "test"), parts):
        save_dataset(part, out / f"{name}.ds.jsonl")
        info[name] = {"n": part.n, "fingerprint": part.fingerprint}
    _print(info)


def cmd_train(args):
    cfg = hs.load_config(args.config)
    if args.out is not None:
        cfg = hs.ExperimentConfig.from_dict({**cfg.to_dict(), "output_dir": args.out})
    if args.workers is not None:
        cfg = hs.ExperimentConfig.from_dict({**cfg.to_dict(), "workers": args.workers})
    hs.run_experiment(cfg)
    print((Path(cfg.output_dir) / "summary.txt").read_text(), end="")


def cmd_select(args):
    _print(hs.reselect(args.run_dir, args.ess_min, args.mode))


def cmd_evaluate(args):
    policy, M = _masked_policy(Path(args.policy))
    if args.M is not None:
        M = args.M
    ds = load_dataset(args.data)
    e = lrn.evaluate_sntis(policy, ds, M)
    out = {"sntis": None if e is None else e.to_dict()}
    if e is not None:
        out["is"] = est.is_value(est.compute_weights(policy, ds, M), ds).to_dict()
    if args.bootstrap and e is not None:
        out["bca"] = bca_interval(ds, policy, "sntis", M, args.bootstrap, args.alpha,
                                  args.seed).to_dict()
    spec = _env_spec(args)
    if spec is not None:
        mean, se = mc_value(make_env(spec), policy, args.rollouts, args.seed)
        out["mc"] = {"mean": mean, "se": se, "rollouts": args.rollouts}
    _print(out)


def cmd_diagnose(args):
    if args.mode == "delta-sweep":
        cfg = hs.load_config(args.config)
        data = hs.prepare_data(cfg)
        spec = next((s for s in cfg.learners if s.learner == lrn.POELA), None)
        if spec is None:
            raise ValueError("delta-sweep needs a POELA learner in the config")
        base = spec.configs()[0]
        deltas = [float(d) for d in args.deltas.split(",")]
        env = hs._env(cfg.data)
        _print(hs.delta_sweep(base, deltas, data["train"], data["val"], data["test"], env,
                              cfg.mc_rollouts, hs.derive_seed(cfg.master_seed, 4)))
    elif args.mode == "masks":
        ds = load_dataset(args.data)
        behavior = bh.knn_behavior(ds, args.knn)
        res = hs.diagnose_masks(ds, args.delta, behavior, args.b)
        if not args.per_step:
            for k in ("eligible_size", "threshold_size", "jaccard"):
                res.pop(k)
        _print(res)
    elif args.mode == "low-reward":
        policy, M = _masked_policy(Path(args.policy))
        ds = load_dataset(args.data)
        mass = est.low_reward_weight_mass(est.compute_weights(policy, ds, M), ds, args.threshold)
        _print({"threshold": args.threshold, "low_reward_mass": mass})
    elif args.mode == "decompose":
        spec = _env_spec(args)
        if spec is None:
            raise ValueError("decompose needs --env for oracle values")
        env = make_env(spec)
        policy, M = _masked_policy(Path(args.policy))
        ds = load_dataset(args.data)
        d = est.decompose(policy, ds, lambda x: env.oracle_value(policy, x), M)
        _print({"empirical_v": d.empirical_v, "context_shift": d.context_shift,
                "per_context_error": d.per_context_error, "snis_value": d.snis_value})


def cmd_verify(args):
    res = hs.verify_report(args.run_dir)
    for m in res.missing:
        print(f"missing: {m}")
    for d in res.discrepancies:
        print(f"mismatch: {d}")
    if not res.ok:
        raise ValidationFailure("verification failed")
    print("verify: ok")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poela", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate logged data from an environment")
    _add_env_args(p, required=True)
    p.add_argument("--behavior", default="uniform", choices=["uniform", "mixture"])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("split", help="split a dataset into train/val/test files")
    p.add_argument("--data", required=True)
    p.add_argument("--train", type=float, default=0.6)
    p.add_argument("--val", type=float, default=0.2)
    p.add_argument("--test", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="run an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("select", help="re-select policies of a finished run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--ess-min", type=float, required=True)
    p.add_argument("--mode", choices=[hs.CHECKPOINT_MODE, hs.FINAL_MODE])
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("evaluate", help="evaluate a policy checkpoint on a dataset")
    p.add_argument("--policy", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--M", type=float)
    p.add_argument("--bootstrap", type=int, default=0, metavar="B")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rollouts", type=int, default=1000)
    _add_env_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diagnose", help="diagnostics")
    p.add_argument("--mode", required=True, choices=["delta-sweep", "masks", "low-reward", "decompose"])
    p.add_argument("--config")
    p.add_argument("--deltas", default="0,0.05,0.1,0.5,inf")
    p.add_argument("--data")
    p.add_argument("--policy")
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--b", type=float, default=0.05)
    p.add_argument("--knn", type=int, default=100)
    p.add_argument("--per-step", action="store_true")
    p.add_argument("--threshold", type=float, default=0.0)
    _add_env_args(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("verify", help="recompute a run's report from its artifacts")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValidationFailure, DatasetError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (PoelaError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
