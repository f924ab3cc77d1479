"""Desk-scale default configurations and end-to-end pipeline helpers.

Training defaults in TrainConfig follow the reference large-scale values
(learning rate 1e-4, batch 256, warmup 10000); the presets here override
them with sizes that converge in seconds on the small fixtures while
keeping the same shapes of schedule.
"""

from __future__ import annotations

import numpy as np

from . import data as datamod
from .critics import CriticConfig, ExactValueTable, exact_dp, exact_goal_dp, fit_hiql
from .data import OfflineDataset, generate_dataset, relabel_prompts
from .envs import GridWorldSpec, make_four_rooms, make_stitch_fixture
from .model import ModelConfig
from .policies import (
    GoalPromptPolicy,
    TrainConfig,
    TrainedPolicy,
    ValuePromptPolicy,
    dt_baseline_train,
    train_goal_high_level,
    train_low_level,
)

FIXTURE_DATA_SEED = 0
FOURROOMS_GOAL = (7, 7)
FOURROOMS_SEGMENTS = 300
FOURROOMS_WAY_STEP = 3


def fixture_dataset(seed: int = FIXTURE_DATA_SEED) -> tuple[GridWorldSpec, OfflineDataset]:
    env = make_stitch_fixture()
    ds = generate_dataset(env, datamod.fixture_scripted_policy(env), 3, seed=seed)
    return env, ds


def fixture_model_config(tokenization: str = "concat") -> ModelConfig:
    return ModelConfig(
        n_actions=5, state_dim=7, prompt_dim=1, max_timestep=8,
        n_layers=2, hidden_dim=32, n_heads=1, context_len=20,
        tokenization=tokenization, prompt_scale=1.0)


def fixture_train_config(seed: int, steps: int = 600) -> TrainConfig:
    # alpha 1.0: the wrong-branch weight exp(-10) is then too small to let
    # the net memorize that branch's unique context within the step budget
    return TrainConfig(alpha=1.0, lr=3e-4, warmup_steps=50, batch_size=16,
                       steps=steps, seed=seed)


def fixture_vadt(seed: int, tokenization: str = "concat", steps: int = 600,
                 weights_on: bool = True, prompt_on: bool = True,
                 ) -> tuple[GridWorldSpec, OfflineDataset, ExactValueTable,
                            ValuePromptPolicy, TrainedPolicy]:
    """Full value-prompt pipeline on the stitch fixture."""
    env, ds = fixture_dataset()
    table = exact_dp(ds, gamma=env.gamma, horizon=env.horizon)
    high = ValuePromptPolicy(table)
    relabel_prompts(ds, high)
    policy = train_low_level(
        env, ds, fixture_model_config(tokenization), fixture_train_config(seed, steps),
        critic=table, variant="vadt", weights_on=weights_on, prompt_on=prompt_on)
    return env, ds, table, high, policy


def fixture_dt(seed: int, steps: int = 600) -> tuple[GridWorldSpec, OfflineDataset, TrainedPolicy]:
    env, ds = fixture_dataset()
    policy = dt_baseline_train(env, ds, fixture_model_config("concat"),
                               fixture_train_config(seed, steps))
    return env, ds, policy


def fourrooms_dataset(seed: int = 0, n_segments: int = FOURROOMS_SEGMENTS,
                      ) -> tuple[GridWorldSpec, OfflineDataset]:
    env = make_four_rooms()
    ds = generate_dataset(env, datamod.SegmentPolicy(), n_segments, seed=seed)
    return env, ds


def fourrooms_critic_config(seed: int) -> CriticConfig:
    return CriticConfig(tau=0.9, gamma=0.99, lr=1e-3, batch_size=256,
                        steps=12000, hidden_dim=96, seed=seed, log_every=500)


def fourrooms_model_config() -> ModelConfig:
    return ModelConfig(
        n_actions=5, state_dim=6, prompt_dim=6, max_timestep=40,
        n_layers=3, hidden_dim=64, n_heads=1, context_len=10,
        tokenization="concat", prompt_scale=1.0)


def fourrooms_train_config(seed: int, steps: int = 1500) -> TrainConfig:
    return TrainConfig(alpha=1.0, lr=3e-4, warmup_steps=100, batch_size=64,
                       steps=steps, seed=seed)


def fourrooms_gadt(seed: int, way_step: int = FOURROOMS_WAY_STEP,
                   critic_steps: int | None = None, train_steps: int = 1500,
                   ) -> tuple[GridWorldSpec, OfflineDataset, GoalPromptPolicy, TrainedPolicy]:
    """Full goal-prompt pipeline on the four-rooms maze."""
    env, ds = fourrooms_dataset()
    ccfg = fourrooms_critic_config(seed)
    if critic_steps is not None:
        ccfg.steps = critic_steps
    critic = fit_hiql(ds, ccfg)
    goal_idx = env.index_of(FOURROOMS_GOAL)
    table = train_goal_high_level(env, ds, critic, k=way_step, alpha=1.0,
                                  gamma=ccfg.gamma)
    high = GoalPromptPolicy(table, env, goal_idx)
    relabel_prompts(ds, high)
    policy = train_low_level(
        env, ds, fourrooms_model_config(), fourrooms_train_config(seed, train_steps),
        critic=critic, variant="gadt", high_level=high)
    policy.subgoal_table = table
    policy.goal = goal_idx
    return env, ds, high, policy


MULTIGOAL_CELLS = ((0, 0), (7, 0), (0, 7), (7, 7))


def fourrooms_multigoal_gadt(seed: int, prompt_on: bool = True,
                             train_steps: int = 1500, way_step: int = FOURROOMS_WAY_STEP,
                             ) -> tuple[GridWorldSpec, GoalPromptPolicy, TrainedPolicy, list[int]]:
    """Goal-diverse variant: one policy serves four corner goals.

    The subgoal prompt is the only channel carrying the episode's goal, so
    removing it erases the task information entirely (this is the cell
    family behind the prompt ablation). Advantages come from the exact
    goal-conditioned table to keep cells cheap.
    """
    env, ds = fourrooms_dataset()
    goal_idxs = [env.index_of(c) for c in MULTIGOAL_CELLS]
    gamma = env.gamma
    table_values = exact_goal_dp(ds, gamma=gamma)
    table = train_goal_high_level(env, ds, table_values, k=way_step, alpha=1.0,
                                  gamma=gamma)
    high = GoalPromptPolicy(table, env, goal_idxs[-1])

    union = OfflineDataset(env_name=ds.env_name, env_hash=ds.env_hash,
                           n_states=ds.n_states, n_actions=ds.n_actions,
                           behavior=ds.behavior + "+multigoal", seed=ds.seed)
    for g in goal_idxs:
        for traj in ds.trajectories:
            copy = datamod.Trajectory(states=traj.states, actions=traj.actions,
                                      rewards=traj.rewards, terminal=traj.terminal,
                                      goal=g)
            copy.prompts = [env.encode(table.subgoal(s, g)) for s in traj.states[:-1]]
            union.trajectories.append(copy)

    policy = train_low_level(
        env, union, fourrooms_model_config(), fourrooms_train_config(seed, train_steps),
        critic=table_values, variant="gadt", high_level=high, prompt_on=prompt_on)
    policy.subgoal_table = table
    return env, high, policy, goal_idxs
