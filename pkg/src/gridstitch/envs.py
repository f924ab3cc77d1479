"""Finite deterministic gridworld MDPs with exact enumerability.

Cells are (x, y) with x growing rightward and y growing downward. Moving
into a wall or off the grid leaves the agent in place. All dynamics are
deterministic; episodes end on a terminal cell or at the horizon.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIONS = ("up", "down", "left", "right", "stay")
DELTAS = ((0, -1), (0, 1), (-1, 0), (1, 0), (0, 0))
N_ACTIONS = len(ACTIONS)

Cell = tuple[int, int]


@dataclass
class GridWorldSpec:
    """A finite deterministic MDP over grid cells.

    Rewards are earned on arrival: `arrival_rewards` for specific cells,
    `step_reward` otherwise. In goal-conditioned mode the reward is 0 on
    reaching the episode goal and -1 otherwise, regardless of those fields.
    """

    name: str
    width: int
    height: int
    walls: frozenset[Cell]
    start_cells: tuple[tuple[Cell, float], ...]
    terminal_cells: frozenset[Cell]
    success_cells: frozenset[Cell]
    arrival_rewards: dict[Cell, float] = field(default_factory=dict)
    step_reward: float = 0.0
    goal_conditioned: bool = False
    gamma: float = 0.99
    horizon: int = 40
    return_min: float = 0.0
    return_max: float = 1.0
    encoding: str = "onehot"        # or "coords_room"
    n_rooms: int = 1
    state_names: dict[str, Cell] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.gamma == 1.0 and self.horizon <= 0:
            raise ValueError("gamma = 1 requires a finite horizon")
        total = sum(p for _, p in self.start_cells)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"start probabilities sum to {total}, expected 1")
        self._cells = sorted(
            (x, y)
            for y in range(self.height)
            for x in range(self.width)
            if (x, y) not in self.walls
        )
        self._index = {c: i for i, c in enumerate(self._cells)}
        for cell, _ in self.start_cells:
            if cell not in self._index:
                raise ValueError(f"start cell {cell} is a wall or out of bounds")

    # -- state space ------------------------------------------------------

    @property
    def cells(self) -> list[Cell]:
        return self._cells

    @property
    def n_states(self) -> int:
        return len(self._cells)

    def index_of(self, cell: Cell) -> int:
        return self._index[cell]

    def cell_of(self, idx: int) -> Cell:
        return self._cells[idx]

    def room_of(self, cell: Cell) -> int:
        if self.n_rooms == 1:
            return 0
        # four-rooms quadrants split at the wall cross
        mx, my = self.width // 2, self.height // 2
        return (1 if cell[0] > mx else 0) + (2 if cell[1] > my else 0)

    # -- dynamics ----------------------------------------------------------

    def step_cell(self, cell: Cell, action: int) -> Cell:
        dx, dy = DELTAS[action]
        nxt = (cell[0] + dx, cell[1] + dy)
        if nxt in self._index:
            return nxt
        return cell

    def reward(self, state: Cell, action: int, next_state: Cell,
               goal: Cell | None = None) -> float:
        if self.goal_conditioned:
            if goal is None:
                raise ValueError(f"{self.name}: goal-conditioned env needs a goal")
            return 0.0 if state == goal else -1.0
        if next_state in self.arrival_rewards:
            return self.arrival_rewards[next_state]
        return self.step_reward

    def is_terminal(self, cell: Cell, goal: Cell | None = None) -> bool:
        if self.goal_conditioned:
            return cell == goal
        return cell in self.terminal_cells

    def sample_start(self, rng: np.random.Generator) -> Cell:
        probs = np.array([p for _, p in self.start_cells])
        i = int(rng.choice(len(self.start_cells), p=probs / probs.sum()))
        return self.start_cells[i][0]

    # -- encodings ---------------------------------------------------------

    @property
    def encode_dim(self) -> int:
        if self.encoding == "onehot":
            return self.n_states
        return 2 + self.n_rooms

    def encode(self, idx: int) -> np.ndarray:
        if self.encoding == "onehot":
            v = np.zeros(self.n_states)
            v[idx] = 1.0
            return v
        x, y = self._cells[idx]
        v = np.zeros(2 + self.n_rooms)
        v[0] = x / max(self.width - 1, 1)
        v[1] = y / max(self.height - 1, 1)
        v[2 + self.room_of((x, y))] = 1.0
        return v

    # -- oracles -----------------------------------------------------------

    def bfs_distances(self, target: Cell) -> dict[Cell, int]:
        """True shortest-path step counts to `target` over free cells."""
        dist = {target: 0}
        queue = deque([target])
        while queue:
            cur = queue.popleft()
            for a in range(N_ACTIONS - 1):  # moves only, not stay
                dx, dy = DELTAS[a]
                nb = (cur[0] - dx, cur[1] - dy)  # predecessor under this move
                if nb in self._index and nb not in dist:
                    dist[nb] = dist[cur] + 1
                    queue.append(nb)
        return dist

    def shortest_path(self, start: Cell, target: Cell,
                      rng: np.random.Generator | None = None) -> list[int]:
        """Action sequence of one shortest path.

        Ties between equally good moves break by action order, or uniformly
        at random when an rng is supplied (diverse paths over many calls).
        """
        dist = self.bfs_distances(target)
        if start not in dist:
            raise ValueError(f"{self.name}: no path from {start} to {target}")
        path = []
        cur = start
        while cur != target:
            options = []
            for a in range(N_ACTIONS - 1):
                nxt = self.step_cell(cur, a)
                if nxt != cur and dist.get(nxt, np.inf) == dist[cur] - 1:
                    options.append(a)
            a = options[0] if rng is None else options[int(rng.integers(0, len(options)))]
            path.append(a)
            cur = self.step_cell(cur, a)
        return path

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "width": self.width,
            "height": self.height,
            "walls": sorted(self.walls),
            "start_cells": [[list(c), p] for c, p in self.start_cells],
            "terminal_cells": sorted(self.terminal_cells),
            "success_cells": sorted(self.success_cells),
            "arrival_rewards": {f"{x},{y}": r for (x, y), r in sorted(self.arrival_rewards.items())},
            "step_reward": self.step_reward,
            "goal_conditioned": self.goal_conditioned,
            "gamma": self.gamma,
            "horizon": self.horizon,
            "return_min": self.return_min,
            "return_max": self.return_max,
            "encoding": self.encoding,
            "n_rooms": self.n_rooms,
            "state_names": {k: list(v) for k, v in sorted(self.state_names.items())},
        }

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def save_env_config(spec: GridWorldSpec, path: str | Path) -> None:
    """Write the spec as a human-readable key-value file."""
    lines = []
    for key, value in spec.to_dict().items():
        lines.append(f"{key} = {json.dumps(value)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_env_config(path: str | Path) -> GridWorldSpec:
    fields: dict = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        fields[key.strip()] = json.loads(value.strip())
    return GridWorldSpec(
        name=fields["name"],
        width=fields["width"],
        height=fields["height"],
        walls=frozenset(tuple(c) for c in fields["walls"]),
        start_cells=tuple((tuple(c), p) for c, p in fields["start_cells"]),
        terminal_cells=frozenset(tuple(c) for c in fields["terminal_cells"]),
        success_cells=frozenset(tuple(c) for c in fields["success_cells"]),
        arrival_rewards={tuple(int(t) for t in k.split(",")): r
                         for k, r in fields["arrival_rewards"].items()},
        step_reward=fields["step_reward"],
        goal_conditioned=fields["goal_conditioned"],
        gamma=fields["gamma"],
        horizon=fields["horizon"],
        return_min=fields["return_min"],
        return_max=fields["return_max"],
        encoding=fields["encoding"],
        n_rooms=fields["n_rooms"],
        state_names={k: tuple(v) for k, v in fields["state_names"].items()},
    )


# ---------------------------------------------------------------------------
# builders

def make_stitch_fixture(distractor_return: float = 1.0) -> GridWorldSpec:
    """Seven-cell world with two crossing corridors and a distractor branch.

    Named cells:  d sits above b; a - b - e form a row; the distractor
    f, g hangs below a; c hangs below b. Stored demonstrations are
    a->b->c (return 0), d->b->e (return 10) and a->f->g (distractor
    return). The good path a->b->e exists in the world but never in data.
    """
    names = {
        "d": (1, 0),
        "a": (0, 1), "b": (1, 1), "e": (2, 1),
        "f": (0, 2), "c": (1, 2),
        "g": (0, 3),
    }
    cells = set(names.values())
    walls = frozenset(
        (x, y) for y in range(4) for x in range(3) if (x, y) not in cells
    )
    return GridWorldSpec(
        name="stitch",
        width=3,
        height=4,
        walls=walls,
        start_cells=(((0, 1), 1.0),),
        terminal_cells=frozenset({names["c"], names["e"], names["g"]}),
        success_cells=frozenset({names["e"]}),
        arrival_rewards={names["e"]: 10.0, names["g"]: distractor_return, names["c"]: 0.0},
        step_reward=0.0,
        gamma=1.0,
        horizon=8,
        return_min=0.0,
        return_max=10.0,
        encoding="onehot",
        state_names=names,
    )


def make_open_grid(size: int = 5, gamma: float = 0.99, horizon: int = 40) -> GridWorldSpec:
    """Open size x size grid, reward 1 on reaching the far corner."""
    goal = (size - 1, size - 1)
    starts = tuple(
        ((x, y), 1.0) for y in range(size) for x in range(size) if (x, y) != goal
    )
    starts = tuple((c, 1.0 / len(starts)) for c, _ in starts)
    return GridWorldSpec(
        name=f"open{size}x{size}",
        width=size,
        height=size,
        walls=frozenset(),
        start_cells=starts,
        terminal_cells=frozenset({goal}),
        success_cells=frozenset({goal}),
        arrival_rewards={goal: 1.0},
        gamma=gamma,
        horizon=horizon,
        return_min=0.0,
        return_max=1.0,
        encoding="coords_room",
    )


def make_four_rooms(gamma: float = 0.99, horizon: int = 40) -> GridWorldSpec:
    """8x8 four-rooms maze, goal-conditioned sparse rewards (-1 per step)."""
    size = 8
    mid = size // 2
    doors = {(mid, 1), (mid, 6), (1, mid), (6, mid)}
    walls = frozenset(
        {(mid, y) for y in range(size)} | {(x, mid) for x in range(size)}
    ) - doors
    free = [
        (x, y) for y in range(size) for x in range(size) if (x, y) not in walls
    ]
    starts = tuple((c, 1.0 / len(free)) for c in free)
    return GridWorldSpec(
        name="fourrooms8",
        width=size,
        height=size,
        walls=frozenset(walls),
        start_cells=starts,
        terminal_cells=frozenset(),
        success_cells=frozenset(),
        goal_conditioned=True,
        gamma=gamma,
        horizon=horizon,
        return_min=-float(horizon),
        return_max=0.0,
        encoding="coords_room",
        n_rooms=4,
    )


def make_corridor(length: int = 5, gamma: float = 1.0,
                  horizon: int | None = None) -> GridWorldSpec:
    """1 x length corridor; -1 per step until the right end, then 0."""
    goal = (length - 1, 0)
    starts = tuple(((x, 0), 1.0 / (length - 1)) for x in range(length - 1))
    return GridWorldSpec(
        name=f"corridor{length}",
        width=length,
        height=1,
        walls=frozenset(),
        start_cells=starts,
        terminal_cells=frozenset({goal}),
        success_cells=frozenset({goal}),
        arrival_rewards={goal: 0.0},
        step_reward=-1.0,
        gamma=gamma,
        horizon=horizon if horizon is not None else 3 * length,
        return_min=-float(horizon if horizon is not None else 3 * length),
        return_max=0.0,
        encoding="onehot",
    )


_BUILDERS = {
    "stitch": make_stitch_fixture,
    "open5x5": make_open_grid,
    "fourrooms8": make_four_rooms,
}


def make_env(name: str) -> GridWorldSpec:
    """Build a named environment; corridors use 'corridor:<length>'."""
    if name in _BUILDERS:
        return _BUILDERS[name]()
    if name.startswith("corridor:"):
        return make_corridor(int(name.split(":", 1)[1]))
    if Path(name).exists():
        return load_env_config(name)
    raise ValueError(f"unknown environment '{name}' "
                     f"(known: {', '.join(sorted(_BUILDERS))}, corridor:<n>, or a config path)")
