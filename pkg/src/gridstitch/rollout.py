"""Evaluation rollouts and reports.

All rollouts are greedy by default (deterministic given trained weights
and the episode's start state); categorical sampling is available behind
a flag. Prompts are recomputed from the live high-level policy at every
step, and every episode records its full prompt trace so train/eval
prompt consistency can be checked after the fact.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .envs import GridWorldSpec
from .model import ModelConfig, Step, action_probs, logits_for_window
from .policies import (
    GoalPromptPolicy,
    IdealizedDTTable,
    TrainedPolicy,
    ValuePromptPolicy,
)


@dataclass
class EpisodeRecord:
    index: int
    seed: int
    start_state: int
    final_state: int
    steps: int
    episode_return: float
    success: bool
    normalized: float
    states: list[int] = field(default_factory=list)
    prompts: list[list[float]] = field(default_factory=list)
    rtg_trace: list[float] = field(default_factory=list)
    ood_count: int | None = None


@dataclass
class EvalReport:
    env_name: str
    variant: str
    seed: int
    requested: int
    episodes: list[EpisodeRecord] = field(default_factory=list)
    prompt_provenance: str | None = None

    @property
    def n(self) -> int:
        return len(self.episodes)

    @property
    def success_rate(self) -> float:
        if not self.episodes:
            return float("nan")
        return float(np.mean([e.success for e in self.episodes]))

    @property
    def mean_return(self) -> float:
        if not self.episodes:
            return float("nan")
        return float(np.mean([e.episode_return for e in self.episodes]))

    @property
    def mean_normalized(self) -> float:
        if not self.episodes:
            return float("nan")
        return float(np.mean([e.normalized for e in self.episodes]))

    def summary(self) -> dict:
        return {
            "env": self.env_name,
            "variant": self.variant,
            "seed": self.seed,
            "episodes": self.n,
            "success_rate": None if not self.episodes else self.success_rate,
            "mean_return": None if not self.episodes else self.mean_return,
            "mean_normalized": None if not self.episodes else self.mean_normalized,
        }

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["episode", "seed", "start_state", "final_state",
                             "steps", "return", "success", "normalized", "ood_count"])
            for e in self.episodes:
                writer.writerow([e.index, e.seed, e.start_state, e.final_state,
                                 e.steps, repr(e.episode_return), int(e.success),
                                 repr(e.normalized),
                                 "" if e.ood_count is None else e.ood_count])

    def write_summary(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.summary(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8")


def _normalized(env: GridWorldSpec, ret: float) -> float:
    span = env.return_max - env.return_min
    if span <= 0:
        return 0.0
    return (ret - env.return_min) / span


def _select_action(logits: np.ndarray, sample: bool, rng: np.random.Generator) -> int:
    if sample:
        p = action_probs(logits)
        return int(rng.choice(len(p), p=p))
    return int(np.argmax(logits))


def _check_dims(env: GridWorldSpec, cfg: ModelConfig, prompt_dim: int) -> None:
    if cfg.state_dim != env.encode_dim:
        raise ValueError(f"policy expects state_dim {cfg.state_dim}, "
                         f"environment encodes {env.encode_dim}")
    if cfg.prompt_dim != prompt_dim:
        raise ValueError(f"policy expects prompt_dim {cfg.prompt_dim}, "
                         f"high level produces {prompt_dim}")


def _rollout_prompted(env: GridWorldSpec, prompt_fn, policy: TrainedPolicy,
                      episodes: int, seed: int, sample: bool, variant: str,
                      goal_fn=None, success_fn=None) -> EvalReport:
    cfg = policy.model_cfg
    report = EvalReport(env_name=env.name, variant=variant, seed=seed,
                        requested=episodes,
                        prompt_provenance=policy.prompt_provenance)
    K = cfg.context_len
    for ep in range(episodes):
        goal = None if goal_fn is None else goal_fn(ep)
        ep_rng = rngmod.stream(seed, "eval", ep)
        cell = env.sample_start(ep_rng)
        s = env.index_of(cell)
        history: list[Step] = []
        rec = EpisodeRecord(index=ep, seed=seed, start_state=s, final_state=s,
                            steps=0, episode_return=0.0, success=False,
                            normalized=0.0, states=[s])
        for t in range(env.horizon):
            if env.is_terminal(env.cell_of(s), goal=goal):
                break
            prompt = np.asarray(prompt_fn(s, goal), dtype=float)
            rec.prompts.append([float(x) for x in prompt])
            current = Step(prompt=prompt, state=env.encode(s), action=0, timestep=t)
            window = history[-(K - 1):] + [current] if K > 1 else [current]
            logits = logits_for_window(policy.params, cfg, window)
            a = _select_action(logits, sample, ep_rng)
            nxt = env.step_cell(env.cell_of(s), a)
            r = env.reward(env.cell_of(s), a, nxt, goal=goal)
            current.action = a
            history.append(current)
            s = env.index_of(nxt)
            rec.states.append(s)
            rec.episode_return += r
            rec.steps += 1
        rec.final_state = s
        if success_fn is not None:
            rec.success = success_fn(rec, goal)
        else:
            rec.success = env.cell_of(s) in env.success_cells
        rec.normalized = _normalized(env, rec.episode_return)
        report.episodes.append(rec)
    return report


def rollout_vadt(env: GridWorldSpec, high_level: ValuePromptPolicy,
                 policy: TrainedPolicy, episodes: int, seed: int,
                 sample: bool = False) -> EvalReport:
    """Value prompt recomputed from the critic at every step."""
    _check_dims(env, policy.model_cfg, high_level.prompt_dim)
    return _rollout_prompted(env, lambda s, g: high_level.prompt(s), policy,
                             episodes, seed, sample, "vadt")


def rollout_gadt(env: GridWorldSpec, high_level: GoalPromptPolicy,
                 policy: TrainedPolicy, episodes: int, seed: int,
                 sample: bool = False, goals: list[int] | None = None) -> EvalReport:
    """Subgoal recomputed every step; success is reaching the episode goal.

    With `goals`, episodes rotate through them; otherwise the high level's
    own goal is used throughout.
    """
    _check_dims(env, policy.model_cfg, high_level.prompt_dim)
    goal_list = goals if goals else [high_level.goal]

    def goal_fn(ep: int):
        return env.cell_of(goal_list[ep % len(goal_list)])

    def prompt_fn(s: int, goal_cell):
        return high_level.prompt(s, goal=env.index_of(goal_cell))

    def success(rec: EpisodeRecord, goal_cell) -> bool:
        return env.cell_of(rec.final_state) == goal_cell

    return _rollout_prompted(env, prompt_fn, policy, episodes, seed,
                             sample, "gadt", goal_fn=goal_fn, success_fn=success)


def rollout_dt(env: GridWorldSpec, policy: TrainedPolicy, initial_rtg: float,
               episodes: int, seed: int, sample: bool = False,
               ood_table: IdealizedDTTable | None = None) -> EvalReport:
    """Learned return-conditioned rollout: the prompt starts at the chosen
    target return and is decremented by each achieved reward."""
    cfg = policy.model_cfg
    _check_dims(env, cfg, 1)
    report = EvalReport(env_name=env.name, variant="dt", seed=seed, requested=episodes)
    K = cfg.context_len
    for ep in range(episodes):
        ep_rng = rngmod.stream(seed, "eval", ep)
        cell = env.sample_start(ep_rng)
        s = env.index_of(cell)
        rtg = float(initial_rtg)
        history: list[Step] = []
        rec = EpisodeRecord(index=ep, seed=seed, start_state=s, final_state=s,
                            steps=0, episode_return=0.0, success=False,
                            normalized=0.0, states=[s], ood_count=0)
        for t in range(env.horizon):
            rec.rtg_trace.append(rtg)
            rec.prompts.append([rtg])
            if ood_table is not None and ood_table.is_ood(s, rtg):
                rec.ood_count += 1
            current = Step(prompt=np.array([rtg]), state=env.encode(s),
                           action=0, timestep=t)
            window = history[-(K - 1):] + [current] if K > 1 else [current]
            logits = logits_for_window(policy.params, cfg, window)
            a = _select_action(logits, sample, ep_rng)
            nxt = env.step_cell(env.cell_of(s), a)
            r = env.reward(env.cell_of(s), a, nxt)
            current.action = a
            history.append(current)
            s = env.index_of(nxt)
            rec.states.append(s)
            rec.episode_return += r
            rec.steps += 1
            rtg -= r
            if env.is_terminal(nxt):
                break
        rec.final_state = s
        rec.success = env.cell_of(s) in env.success_cells
        rec.normalized = _normalized(env, rec.episode_return)
        report.episodes.append(rec)
    return report


def rollout_idealized_dt(env: GridWorldSpec, table: IdealizedDTTable,
                         initial_rtg: float, episodes: int, seed: int) -> EvalReport:
    """Roll the exact memorizer. In-support prompts follow the stored
    conditional; an out-of-distribution prompt switches onto a stored
    occurrence of the state, adopting both its action and its stored
    return-to-go (a memorizer cannot synthesize unseen pairings)."""
    report = EvalReport(env_name=env.name, variant="idealized-dt", seed=seed,
                        requested=episodes)
    for ep in range(episodes):
        ep_rng = rngmod.stream(seed, "eval", ep)
        cell = env.sample_start(ep_rng)
        s = env.index_of(cell)
        rtg = float(initial_rtg)
        rec = EpisodeRecord(index=ep, seed=seed, start_state=s, final_state=s,
                            steps=0, episode_return=0.0, success=False,
                            normalized=0.0, states=[s], ood_count=0)
        for _ in range(env.horizon):
            rec.rtg_trace.append(rtg)
            dist = table.query(s, rtg)
            if dist is None:
                rec.ood_count += 1
                a, rtg = table.fallback(s, ep_rng)
            else:
                actions = sorted(dist)
                probs = np.array([dist[a] for a in actions])
                a = actions[int(ep_rng.choice(len(actions), p=probs))]
            nxt = env.step_cell(env.cell_of(s), a)
            r = env.reward(env.cell_of(s), a, nxt)
            s = env.index_of(nxt)
            rec.states.append(s)
            rec.episode_return += r
            rec.steps += 1
            rtg -= r
            if env.is_terminal(nxt):
                break
        rec.final_state = s
        rec.success = env.cell_of(s) in env.success_cells
        rec.normalized = _normalized(env, rec.episode_return)
        report.episodes.append(rec)
    return report


def verify_prompt_trace(report: EvalReport, high_level) -> bool:
    """Recompute every recorded prompt from the live high level."""
    for rec in report.episodes:
        for s, prompt in zip(rec.states[:-1], rec.prompts):
            fresh = np.asarray(high_level.prompt(s), dtype=float)
            if not np.array_equal(fresh, np.asarray(prompt)):
                return False
    return True
