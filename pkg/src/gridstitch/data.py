"""Offline trajectory datasets: scripted generation, relabeling, serialization.

States are stored as indices into the environment's cell list. Return-to-go
and prompts are derived fields, filled in by the relabel passes and never
serialized; the on-disk format keeps only states, actions, rewards and the
optional episode goal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .envs import GridWorldSpec, N_ACTIONS, Cell

FORMAT_VERSION = 1


@dataclass
class Transition:
    state: int
    action: int
    reward: float
    next_state: int
    done: bool
    goal: int | None = None
    rtg: float | None = None
    prompt: np.ndarray | None = None


@dataclass
class Trajectory:
    states: list[int]            # length T+1
    actions: list[int]           # length T
    rewards: list[float]         # length T
    terminal: bool               # ended on a terminal cell (vs. horizon timeout)
    goal: int | None = None
    rtg: list[float] | None = None
    prompts: list[np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.actions)

    def transitions(self):
        for t in range(len(self.actions)):
            yield Transition(
                state=self.states[t],
                action=self.actions[t],
                reward=self.rewards[t],
                next_state=self.states[t + 1],
                done=self.terminal and t == len(self.actions) - 1,
                goal=self.goal,
                rtg=None if self.rtg is None else self.rtg[t],
                prompt=None if self.prompts is None else self.prompts[t],
            )

    @property
    def episode_return(self) -> float:
        return float(sum(self.rewards))


@dataclass
class OfflineDataset:
    env_name: str
    env_hash: str
    n_states: int
    n_actions: int
    behavior: str
    seed: int
    trajectories: list[Trajectory] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def max_abs_return(self) -> float:
        best = 0.0
        for traj in self.trajectories:
            run = 0.0
            for r in reversed(traj.rewards):
                run += r
                best = max(best, abs(run))
        return best

    def max_return(self) -> float:
        if not self.trajectories:
            return 0.0
        return max(t.episode_return for t in self.trajectories)


# ---------------------------------------------------------------------------
# behavior policies

class RandomPolicy:
    """Uniform over all actions."""

    name = "random"

    def start(self, env: GridWorldSpec, episode: int, rng: np.random.Generator) -> Cell | None:
        return None

    def act(self, env: GridWorldSpec, cell: Cell, t: int,
            rng: np.random.Generator, episode: int) -> int | None:
        return int(rng.integers(0, N_ACTIONS))


class ScriptedPolicy:
    """Replays a fixed list of (start, action sequence) episodes, cycling."""

    name = "scripted"

    def __init__(self, episodes: list[tuple[Cell, list[int]]]):
        if not episodes:
            raise ValueError("scripted policy needs at least one episode")
        self.episodes = episodes

    def start(self, env: GridWorldSpec, episode: int, rng: np.random.Generator) -> Cell:
        return self.episodes[episode % len(self.episodes)][0]

    def act(self, env: GridWorldSpec, cell: Cell, t: int,
            rng: np.random.Generator, episode: int) -> int | None:
        plan = self.episodes[episode % len(self.episodes)][1]
        return plan[t] if t < len(plan) else None


class OptimalPolicy:
    """Greedy shortest-path moves toward the nearest success cell."""

    name = "optimal"

    def __init__(self, target: Cell | None = None):
        self.target = target
        self._dist: dict[Cell, int] | None = None

    def _distances(self, env: GridWorldSpec) -> dict[Cell, int]:
        if self._dist is None:
            target = self.target
            if target is None:
                target = sorted(env.success_cells)[0]
            self._dist = env.bfs_distances(target)
        return self._dist

    def start(self, env: GridWorldSpec, episode: int, rng: np.random.Generator) -> Cell | None:
        return None

    def act(self, env: GridWorldSpec, cell: Cell, t: int,
            rng: np.random.Generator, episode: int) -> int | None:
        dist = self._distances(env)
        for a in range(N_ACTIONS - 1):
            nxt = env.step_cell(cell, a)
            if nxt != cell and dist.get(nxt, np.inf) < dist.get(cell, np.inf):
                return a
        return None  # already at the target


class SegmentPolicy:
    """Partial demonstrations for mazes: each episode walks a shortest path
    from a random cell in one room to a random cell in an adjacent room.

    No single episode crosses more than one doorway, so any long route
    exists in the data only as concatenable pieces.
    """

    name = "segments"

    def __init__(self):
        self._plan: list[int] | None = None

    def start(self, env: GridWorldSpec, episode: int, rng: np.random.Generator) -> Cell:
        rooms: dict[int, list[Cell]] = {}
        for cell in env.cells:
            rooms.setdefault(env.room_of(cell), []).append(cell)
        room_ids = sorted(rooms)
        src_room = room_ids[int(rng.integers(0, len(room_ids)))]
        # adjacency in the four-rooms cross layout: room ids differ in one bit
        neighbors = [r for r in room_ids if bin(r ^ src_room).count("1") == 1]
        dst_room = neighbors[int(rng.integers(0, len(neighbors)))]
        start = sorted(rooms[src_room])[int(rng.integers(0, len(rooms[src_room])))]
        target = sorted(rooms[dst_room])[int(rng.integers(0, len(rooms[dst_room])))]
        self._plan = env.shortest_path(start, target, rng=rng)
        return start

    def act(self, env: GridWorldSpec, cell: Cell, t: int,
            rng: np.random.Generator, episode: int) -> int | None:
        if self._plan is None or t >= len(self._plan):
            return None
        return self._plan[t]


POLICIES = {
    "random": RandomPolicy,
    "optimal": OptimalPolicy,
    "segments": SegmentPolicy,
}


def fixture_scripted_policy(env: GridWorldSpec) -> ScriptedPolicy:
    """The three stored demonstrations of the stitch fixture."""
    n = env.state_names
    up, down, left, right = 0, 1, 2, 3
    return ScriptedPolicy([
        (n["a"], [right, down]),   # a -> b -> c
        (n["d"], [down, right]),   # d -> b -> e
        (n["a"], [down, down]),    # a -> f -> g
    ])


# ---------------------------------------------------------------------------
# generation and relabeling

def generate_dataset(env: GridWorldSpec, policy, n_trajectories: int, seed: int,
                     goal: Cell | None = None) -> OfflineDataset:
    """Roll the behavior policy for n episodes; reproducible per seed."""
    ds = OfflineDataset(
        env_name=env.name,
        env_hash=env.content_hash(),
        n_states=env.n_states,
        n_actions=N_ACTIONS,
        behavior=policy.name,
        seed=seed,
    )
    for ep in range(n_trajectories):
        ep_rng = rngmod.stream(seed, "data", ep)
        start = policy.start(env, ep, ep_rng)
        if start is None:
            start = env.sample_start(ep_rng)
        if start not in env.cells:
            raise ValueError(f"start cell {start} unreachable in {env.name}")
        cell = start
        states = [env.index_of(cell)]
        actions: list[int] = []
        rewards: list[float] = []
        terminal = False
        for t in range(env.horizon):
            a = policy.act(env, cell, t, ep_rng, ep)
            if a is None:
                break
            nxt = env.step_cell(cell, a)
            if env.goal_conditioned and goal is None:
                r = 0.0  # placeholder; goal-conditioned rewards are derived later
            else:
                r = env.reward(cell, a, nxt, goal=goal)
            actions.append(a)
            rewards.append(r)
            states.append(env.index_of(nxt))
            cell = nxt
            if env.is_terminal(cell, goal=goal):
                terminal = True
                break
        ds.trajectories.append(Trajectory(
            states=states,
            actions=actions,
            rewards=rewards,
            terminal=terminal,
            goal=None if goal is None else env.index_of(goal),
        ))
    return ds


def relabel_return_to_go(ds: OfflineDataset) -> OfflineDataset:
    """Fill rtg with undiscounted suffix sums of rewards, in place."""
    for traj in ds.trajectories:
        rtg = [0.0] * len(traj.rewards)
        run = 0.0
        for t in range(len(traj.rewards) - 1, -1, -1):
            run += traj.rewards[t]
            rtg[t] = run
        traj.rtg = rtg
    return ds


def relabel_prompts(ds: OfflineDataset, high_level) -> OfflineDataset:
    """Attach high-level prompts p_t for every visited state, in place."""
    for traj in ds.trajectories:
        prompts = []
        for t in range(len(traj.actions)):
            try:
                prompts.append(np.asarray(high_level.prompt(traj.states[t]), dtype=float))
            except KeyError as e:
                raise ValueError(
                    f"high-level policy has no value for state {traj.states[t]}") from e
        traj.prompts = prompts
    return ds


@dataclass
class KStepPair:
    t: int
    s_from: int
    s_to: int
    k_eff: int                    # clamped jump length, 0 at trajectory end
    reward_sum: float             # discounted dataset rewards over the jump
    states_between: tuple[int, ...]  # s_{t+1} .. s_{t+k_eff}


def k_step_pairs(traj: Trajectory, k: int, gamma: float) -> list[KStepPair]:
    """One training tuple per visited state, with end-of-trajectory clamping."""
    if k <= 0:
        raise ValueError(f"way-step k must be >= 1, got {k}")
    pairs = []
    T = len(traj.actions)
    for t in range(T + 1):
        k_eff = min(k, T - t)
        total = 0.0
        for i in range(k_eff):
            total += (gamma ** i) * traj.rewards[t + i]
        pairs.append(KStepPair(
            t=t,
            s_from=traj.states[t],
            s_to=traj.states[t + k_eff],
            k_eff=k_eff,
            reward_sum=total,
            states_between=tuple(traj.states[t + 1:t + k_eff + 1]),
        ))
    return pairs


# ---------------------------------------------------------------------------
# serialization (line-delimited JSON records)

def save_dataset(ds: OfflineDataset, path: str | Path) -> None:
    header = {
        "kind": "trajectory-dataset",
        "version": FORMAT_VERSION,
        "env": ds.env_name,
        "env_hash": ds.env_hash,
        "n_states": ds.n_states,
        "n_actions": ds.n_actions,
        "behavior": ds.behavior,
        "seed": ds.seed,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for traj in ds.trajectories:
        rec = {
            "states": traj.states,
            "actions": traj.actions,
            "rewards": traj.rewards,
            "terminal": traj.terminal,
        }
        if traj.goal is not None:
            rec["goal"] = traj.goal
        lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path: str | Path) -> OfflineDataset:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    if header.get("kind") != "trajectory-dataset":
        raise ValueError(f"{path}: not a trajectory dataset")
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {header.get('version')}")
    ds = OfflineDataset(
        env_name=header["env"],
        env_hash=header["env_hash"],
        n_states=header["n_states"],
        n_actions=header["n_actions"],
        behavior=header["behavior"],
        seed=header["seed"],
    )
    for line in lines[1:]:
        if not line.strip():
            continue
        rec = json.loads(line)
        ds.trajectories.append(Trajectory(
            states=rec["states"],
            actions=rec["actions"],
            rewards=[float(r) for r in rec["rewards"]],
            terminal=rec["terminal"],
            goal=rec.get("goal"),
        ))
    return ds
