"""Command-line entry point.

Subcommands: gen-data, fit-critic, train, eval, ablate, verify. Exit codes:
0 success, 1 acceptance failure, 2 usage or validation error. Config
precedence is defaults < config file < flags; the resolved configuration
is printed at startup of every command that trains something.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

from . import ablation, bundles, manifest, presets
from .critics import (
    CriticConfig,
    exact_dp,
    exact_goal_dp,
    fit_hiql,
    fit_iql,
)
from .data import (
    POLICIES,
    fixture_scripted_policy,
    generate_dataset,
    load_dataset,
    relabel_prompts,
    save_dataset,
)
from .envs import make_env, save_env_config
from .model import ModelConfig
from .policies import (
    GoalPromptPolicy,
    TrainConfig,
    ValuePromptPolicy,
    critic_hash,
    dt_baseline_train,
    train_goal_high_level,
    train_low_level,
)
from .rollout import rollout_dt, rollout_gadt, rollout_vadt


class UsageError(Exception):
    pass


def _load_config_file(path: str) -> dict[str, dict]:
    """Parse 'section.key = json-value' lines into {'model': {...}, 'train': {...}}."""
    out: dict[str, dict] = {"model": {}, "train": {}}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'section.key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if "." not in key:
            raise UsageError(f"{path}:{lineno}: key must be model.* or train.*")
        section, _, name = key.partition(".")
        if section not in out:
            raise UsageError(f"{path}:{lineno}: unknown section '{section}'")
        out[section][name] = json.loads(value.strip())
    return out


def _apply_overrides(cfg, overrides: dict, label: str):
    known = {f.name for f in dc_fields(cfg)}
    for key, value in overrides.items():
        if key not in known:
            raise UsageError(f"unknown {label} option '{key}'")
        setattr(cfg, key, value)
    return cfg


def _print_config(name: str, cfg) -> None:
    print(f"[{name}] " + " ".join(f"{k}={v}" for k, v in sorted(vars(cfg).items())))


def _require(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    env = make_env(args.env)
    if args.policy == "scripted":
        if not env.state_names:
            raise UsageError("--policy scripted is only defined for the stitch fixture")
        policy = fixture_scripted_policy(env)
    elif args.policy in POLICIES:
        policy = POLICIES[args.policy]()
    else:
        raise UsageError(f"unknown policy '{args.policy}' "
                         f"(known: scripted, {', '.join(sorted(POLICIES))})")
    ds = generate_dataset(env, policy, args.n, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_path = out / "dataset.jsonl"
    save_dataset(ds, data_path)
    save_env_config(env, out / "env.cfg")
    manifest.write_manifest(
        out, "gen-data",
        {"env": args.env, "policy": args.policy, "n": args.n},
        [args.seed], {}, ["dataset.jsonl", "env.cfg"])
    print(f"wrote {data_path} ({len(ds)} trajectories, {ds.n_transitions} transitions)")
    return 0


def cmd_fit_critic(args) -> int:
    data_path = _require(args.dataset, "dataset")
    ds = load_dataset(data_path)
    env = make_env(ds.env_name)
    gamma = env.gamma if args.gamma is None else args.gamma
    horizon = env.horizon if args.horizon is None else args.horizon
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.variant == "exact-dp":
        if args.goal_conditioned:
            critic = exact_goal_dp(ds, gamma=gamma, horizon=horizon)
        else:
            critic = exact_dp(ds, gamma=gamma, horizon=horizon)
    else:
        cfg = CriticConfig(tau=args.tau, gamma=gamma, seed=args.seed)
        if args.steps is not None:
            cfg.steps = args.steps
        _print_config("critic", cfg)
        critic = fit_hiql(ds, cfg) if args.variant == "hiql" else fit_iql(ds, cfg)
    bundles.save_critic(critic, out, env=env)
    manifest.write_manifest(
        out, "fit-critic",
        {"variant": args.variant, "tau": args.tau, "gamma": gamma,
         "goal_conditioned": args.goal_conditioned},
        [args.seed], {str(data_path): manifest.hash_file(data_path)},
        ["kind.json"])
    print(f"critic ({args.variant}) written to {out}")
    return 0


def _model_config_for(env, variant: str, overrides: dict) -> ModelConfig:
    if env.name == "stitch":
        cfg = presets.fixture_model_config()
    elif env.name == "fourrooms8" and variant == "gadt":
        cfg = presets.fourrooms_model_config()
    else:
        cfg = ModelConfig(
            n_actions=5, state_dim=env.encode_dim,
            prompt_dim=env.encode_dim if variant == "gadt" else 1,
            max_timestep=env.horizon,
            n_layers=2 if env.n_states <= 10 else 3,
            hidden_dim=32 if env.n_states <= 10 else 64,
            context_len=10 if variant == "gadt" else 20)
    if variant == "gadt" and cfg.prompt_dim != env.encode_dim:
        cfg.prompt_dim = env.encode_dim
    return _apply_overrides(cfg, overrides, "model")


def _train_config_for(env, variant: str, seed: int, overrides: dict) -> TrainConfig:
    if env.name == "stitch":
        cfg = presets.fixture_train_config(seed)
    elif env.name == "fourrooms8":
        cfg = presets.fourrooms_train_config(seed)
    else:
        cfg = TrainConfig(alpha=1.0 if variant == "gadt" else 3.0, lr=3e-4,
                          warmup_steps=100, batch_size=64, steps=800, seed=seed)
    cfg.seed = seed
    return _apply_overrides(cfg, overrides, "train")


def cmd_train(args) -> int:
    data_path = _require(args.dataset, "dataset")
    ds = load_dataset(data_path)
    env = make_env(ds.env_name)
    overrides = _load_config_file(args.config) if args.config else {"model": {}, "train": {}}
    model_cfg = _model_config_for(env, args.variant, overrides["model"])
    train_cfg = _train_config_for(env, args.variant, args.seed, overrides["train"])
    _print_config("model", model_cfg)
    _print_config("train", train_cfg)

    inputs = {str(data_path): manifest.hash_file(data_path)}
    critic = None
    if args.variant in ("vadt", "gadt"):
        if not args.critic:
            raise UsageError(f"--critic is required for variant {args.variant}")
        critic_dir = _require(args.critic, "critic directory")
        critic = bundles.load_critic(critic_dir)
        inputs[str(critic_dir)] = critic_hash(critic)

    if args.variant == "vadt":
        high = ValuePromptPolicy(critic)
        relabel_prompts(ds, high)
        policy = train_low_level(env, ds, model_cfg, train_cfg,
                                 critic=critic, variant="vadt")
    elif args.variant == "gadt":
        if args.goal is None:
            raise UsageError("--goal x,y is required for variant gadt")
        goal_cell = tuple(int(v) for v in args.goal.split(","))
        table = train_goal_high_level(env, ds, critic, k=args.way_step,
                                      alpha=train_cfg.alpha, gamma=env.gamma)
        high = GoalPromptPolicy(table, env, env.index_of(goal_cell))
        relabel_prompts(ds, high)
        policy = train_low_level(env, ds, model_cfg, train_cfg, critic=critic,
                                 variant="gadt", high_level=high)
        policy.subgoal_table = table
        policy.goal = env.index_of(goal_cell)
    else:
        policy = dt_baseline_train(env, ds, model_cfg, train_cfg)

    out = Path(args.out)
    bundles.save_bundle(policy, out, critic=critic, env=env)
    manifest.write_manifest(
        out, "train",
        {"variant": args.variant, "model": model_cfg.to_dict(),
         "train": train_cfg.to_dict(), "way_step": args.way_step,
         "goal": args.goal},
        [args.seed], inputs, ["policy.bin", "bundle.json", "loss_curve.csv"])
    print(f"policy bundle written to {out}")
    return 0


def cmd_eval(args) -> int:
    bundle_dir = _require(args.bundle, "bundle directory")
    policy, critic = bundles.load_bundle(bundle_dir)
    env = make_env(args.env)
    if policy.variant == "vadt":
        if critic is None:
            raise UsageError("bundle has no embedded critic; cannot recompute prompts")
        high = ValuePromptPolicy(critic)
        if policy.prompt_provenance and high.provenance_hash() != policy.prompt_provenance:
            raise UsageError("embedded critic does not match the bundle's "
                             "prompt provenance hash")
        report = rollout_vadt(env, high, policy, args.episodes, args.seed,
                              sample=args.sample)
    elif policy.variant == "gadt":
        if policy.subgoal_table is None or policy.goal is None:
            raise UsageError("bundle is missing the subgoal table or goal")
        high = GoalPromptPolicy(policy.subgoal_table, env, policy.goal)
        report = rollout_gadt(env, high, policy, args.episodes, args.seed,
                              sample=args.sample)
    else:
        if args.rtg is None:
            raise UsageError("--rtg is required to evaluate a dt bundle")
        report = rollout_dt(env, policy, args.rtg, args.episodes, args.seed,
                            sample=args.sample)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "episodes.csv")
    report.write_summary(out / "summary.json")
    manifest.write_manifest(
        out, "eval",
        {"bundle": str(bundle_dir), "env": args.env, "episodes": args.episodes,
         "rtg": args.rtg, "sample": args.sample},
        [args.seed], {str(bundle_dir / "policy.bin"):
                      manifest.hash_file(bundle_dir / "policy.bin")},
        ["episodes.csv", "summary.json"])
    summary = report.summary()
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    if args.suite == "stitch":
        suite = ablation.SuiteConfig()
    else:
        suite = ablation.SuiteConfig.from_file(_require(args.suite, "suite config"))
    if args.seeds is not None:
        suite.seeds = args.seeds
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = ablation.run_suite(suite, workers=args.workers)
    ablation.write_matrix_csv(result, out / "matrix.csv")
    ablation.write_summary(result, out / "summary.json")
    manifest.write_manifest(
        out, "ablate", {"suite": args.suite, "seeds": suite.seeds,
                        "workers": args.workers},
        list(range(suite.seeds)), {}, ["matrix.csv", "summary.json"])
    print(f"{len(result.rows)} rows, {len(result.failures)} failed cells -> {out}")
    return 0 if not result.failures else 1


def cmd_verify(args) -> int:
    from . import acceptance
    results = acceptance.run_level(args.level)
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridstitch",
        description="Prompt-conditioned transformer policies on gridworlds")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an offline dataset")
    p.add_argument("--env", required=True)
    p.add_argument("--policy", required=True,
                   help="scripted | random | optimal | segments")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("fit-critic", help="fit or compute a value critic")
    p.add_argument("--dataset", required=True)
    p.add_argument("--variant", required=True, choices=["iql", "hiql", "exact-dp"])
    p.add_argument("--tau", type=float, default=0.9)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--goal-conditioned", action="store_true")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_fit_critic)

    p = sub.add_parser("train", help="train a policy")
    p.add_argument("--variant", required=True, choices=["vadt", "gadt", "dt"])
    p.add_argument("--dataset", required=True)
    p.add_argument("--critic", default=None)
    p.add_argument("--config", default=None,
                   help="key-value file with model.* / train.* overrides")
    p.add_argument("--goal", default=None, help="goal cell 'x,y' for gadt")
    p.add_argument("--way-step", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a policy bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--env", required=True)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rtg", type=float, default=None,
                   help="initial return target (dt only)")
    p.add_argument("--sample", action="store_true",
                   help="sample actions instead of greedy argmax")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("--suite", default="stitch")
    p.add_argument("--seeds", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("verify", help="run the acceptance suite")
    p.add_argument("--level", choices=["quick", "full"], default="quick")
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
