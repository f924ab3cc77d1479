"""On-disk artifacts: critic directories and trained-policy bundles.

A critic artifact is a directory with a kind marker plus either a JSON
table (exact variants) or a binary checkpoint (fitted variants). A policy
bundle is self-contained: checkpoint, configs, loss curve, provenance
hashes, and an embedded copy of whatever the prompts are recomputed from.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import checkpoint
from .autograd import Tensor
from .critics import (
    CriticConfig,
    ExactValueTable,
    GoalValueTable,
    HIQLCritic,
    IQLCritic,
)
from .model import ModelConfig
from .policies import SubgoalTable, TrainConfig, TrainedPolicy


def save_critic(critic, out_dir: str | Path, env=None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(critic, ExactValueTable):
        (out / "kind.json").write_text(json.dumps({"kind": "exact-dp"}) + "\n")
        (out / "table.json").write_text(
            json.dumps(critic.to_json(), sort_keys=True, indent=2) + "\n")
        (out / "table.txt").write_text(critic.render_text(env) + "\n")
        return
    if isinstance(critic, GoalValueTable):
        blob = {
            "kind": "exact-goal-dp",
            "gamma": critic.gamma,
            "goals": list(critic.goals),
            "v": {f"{s},{g}": val for (s, g), val in sorted(critic.v.items())},
            "q": {f"{s},{a},{g}": val for (s, a, g), val in sorted(critic.q.items())},
        }
        (out / "kind.json").write_text(json.dumps({"kind": "exact-goal-dp"}) + "\n")
        (out / "table.json").write_text(json.dumps(blob, sort_keys=True) + "\n")
        return
    if isinstance(critic, (IQLCritic, HIQLCritic)):
        kind = "hiql" if isinstance(critic, HIQLCritic) else "iql"
        meta = {
            "kind": kind,
            "n_states": critic.n_states,
            "n_actions": critic.n_actions,
            "config": vars(critic.config).copy(),
        }
        if isinstance(critic, HIQLCritic):
            meta["next_map"] = {f"{s},{a}": s2 for (s, a), s2 in sorted(critic.next_map.items())}
        (out / "kind.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
        checkpoint.save(critic.params, out / "critic.bin")
        checkpoint.save({k: v for k, v in critic.target.items()}, out / "target.bin")
        with open(out / "loss_curve.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss_v", "loss_q"])
            for row in critic.loss_curve:
                writer.writerow([row[0], repr(row[1]), repr(row[2])])
        return
    raise TypeError(f"cannot save critic of type {type(critic).__name__}")


def load_critic(in_dir: str | Path):
    out = Path(in_dir)
    meta = json.loads((out / "kind.json").read_text())
    kind = meta["kind"]
    if kind == "exact-dp":
        return ExactValueTable.from_json(json.loads((out / "table.json").read_text()))
    if kind == "exact-goal-dp":
        blob = json.loads((out / "table.json").read_text())
        return GoalValueTable(
            v={tuple(int(x) for x in k.split(",")): float(val)
               for k, val in blob["v"].items()},
            q={tuple(int(x) for x in k.split(",")): float(val)
               for k, val in blob["q"].items()},
            gamma=float(blob["gamma"]),
            goals=tuple(blob["goals"]),
        )
    if kind in ("iql", "hiql"):
        config = CriticConfig(**meta["config"])
        cls = HIQLCritic if kind == "hiql" else IQLCritic
        critic = cls(meta["n_states"], meta["n_actions"], config)
        checkpoint.load_into(out / "critic.bin", critic.params)
        critic.target = dict(checkpoint.load(out / "target.bin"))
        if kind == "hiql":
            critic.next_map = {tuple(int(x) for x in k.split(",")): int(s2)
                               for k, s2 in meta["next_map"].items()}
        critic.fitted = True
        return critic
    raise ValueError(f"unknown critic kind '{kind}'")


def save_bundle(policy: TrainedPolicy, out_dir: str | Path, critic=None,
                env=None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(policy.params, out / "policy.bin")
    (out / "bundle.json").write_text(json.dumps({
        "variant": policy.variant,
        "model_config": policy.model_cfg.to_dict(),
        "train_config": policy.train_cfg.to_dict(),
        "prompt_provenance": policy.prompt_provenance,
        "goal": policy.goal,
    }, sort_keys=True, indent=2) + "\n")
    with open(out / "loss_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "seed", "metric", "value"])
        for step, loss in policy.loss_curve:
            writer.writerow([step, policy.train_cfg.seed, "train_loss", repr(loss)])
    if policy.subgoal_table is not None:
        (out / "subgoal_table.json").write_text(
            json.dumps(policy.subgoal_table.to_json(), sort_keys=True) + "\n")
    if critic is not None:
        save_critic(critic, out / "critic", env=env)


def load_bundle(in_dir: str | Path) -> tuple[TrainedPolicy, object | None]:
    out = Path(in_dir)
    blob = json.loads((out / "bundle.json").read_text())
    model_cfg = ModelConfig(**blob["model_config"])
    train_cfg = TrainConfig(**blob["train_config"])
    params = {name: Tensor(arr.copy(), requires_grad=True)
              for name, arr in checkpoint.load(out / "policy.bin").items()}
    curve = []
    curve_path = out / "loss_curve.csv"
    if curve_path.exists():
        with open(curve_path, newline="") as fh:
            for row in csv.DictReader(fh):
                curve.append((int(row["step"]), float(row["value"])))
    policy = TrainedPolicy(
        variant=blob["variant"], params=params, model_cfg=model_cfg,
        train_cfg=train_cfg, loss_curve=curve,
        prompt_provenance=blob.get("prompt_provenance"),
        goal=blob.get("goal"))
    table_path = out / "subgoal_table.json"
    if table_path.exists():
        policy.subgoal_table = SubgoalTable.from_json(json.loads(table_path.read_text()))
    critic = None
    if (out / "critic" / "kind.json").exists():
        critic = load_critic(out / "critic")
    return policy, critic
