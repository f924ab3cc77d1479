"""Value learning over offline datasets.

Three routes to values, kept deliberately independent so they can check
each other:

  * exact dynamic programming on the empirical MDP (the ground truth at
    this scale), including a goal-conditioned variant;
  * expectile-regression critics (V and Q nets with a Polyak target);
  * an action-free goal-conditioned expectile critic.

The empirical MDP is built from dataset counts only: maximization ranges
over actions the behavior policy actually took, and querying a state-action
pair that never occurs raises OutOfSupport.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import autograd as ag
from . import nn, rng as rngmod
from .autograd import Tensor, backward, tape
from .data import OfflineDataset
from .optim import AdamW


class OutOfSupport(KeyError):
    """Queried a state or state-action pair absent from the dataset."""


class CriticDiverged(RuntimeError):
    """Fitted values exceeded ten times the dataset's return bound."""


# ---------------------------------------------------------------------------
# expectile machinery

def expectile_loss(x: np.ndarray | float, tau: float) -> np.ndarray | float:
    """Asymmetric squared loss: tau * x^2 above zero, (1 - tau) * x^2 below."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"expectile tau must be in (0, 1), got {tau}")
    x = np.asarray(x, dtype=float)
    w = np.where(x < 0.0, 1.0 - tau, tau)
    out = w * x * x
    return float(out) if out.ndim == 0 else out


def expectile_loss_t(diff: Tensor, tau: float) -> Tensor:
    """Tensor version; the asymmetric weight is constant w.r.t. the graph."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"expectile tau must be in (0, 1), got {tau}")
    w = np.where(diff.data < 0.0, 1.0 - tau, tau)
    return ag.mean(ag.mul(Tensor(w), ag.mul(diff, diff)))


def expectile_bisection(samples: np.ndarray, tau: float, iters: int = 200) -> float:
    """Solve the first-order condition tau*E[(Z-v)+] = (1-tau)*E[(v-Z)+]."""
    z = np.asarray(samples, dtype=float)
    lo, hi = float(z.min()), float(z.max())
    for _ in range(iters):
        v = 0.5 * (lo + hi)
        f = tau * np.maximum(z - v, 0.0).sum() - (1.0 - tau) * np.maximum(v - z, 0.0).sum()
        if f > 0.0:
            lo = v
        else:
            hi = v
    return 0.5 * (lo + hi)


def fit_scalar_expectile(samples: np.ndarray, tau: float,
                         steps: int = 6000, lr: float = 0.2) -> float:
    """Gradient-descend the mean expectile loss over a scalar location."""
    z = Tensor(np.asarray(samples, dtype=float))
    v = Tensor(np.array([float(np.mean(samples))]), requires_grad=True)
    for _ in range(steps):
        v.grad = None
        with tape():
            diff = ag.add(z, ag.mul(v, -1.0))
            loss = expectile_loss_t(diff, tau)
        backward(loss)
        v.data = v.data - lr * v.grad
    return float(v.data[0])


# ---------------------------------------------------------------------------
# empirical MDP and exact dynamic programming

def _occurrences(ds: OfflineDataset) -> dict[int, dict[int, list[tuple[int, float, bool]]]]:
    """state -> action -> list of (next_state, reward, done) observations."""
    occ: dict[int, dict[int, list[tuple[int, float, bool]]]] = {}
    for traj in ds.trajectories:
        T = len(traj.actions)
        for t in range(T):
            done = traj.terminal and t == T - 1
            occ.setdefault(traj.states[t], {}).setdefault(traj.actions[t], []).append(
                (traj.states[t + 1], traj.rewards[t], done))
    return occ


def oracle_returns(ds: OfflineDataset) -> dict[int, float]:
    """Best stored-trajectory return from each state (suffix-sum maximum)."""
    best: dict[int, float] = {}
    for traj in ds.trajectories:
        run = 0.0
        suffix = [0.0] * (len(traj.actions) + 1)
        for t in range(len(traj.actions) - 1, -1, -1):
            run += traj.rewards[t]
            suffix[t] = run
        for t in range(len(traj.actions) + 1):
            s = traj.states[t]
            if s not in best or suffix[t] > best[s]:
                best[s] = suffix[t]
    return best


@dataclass
class ExactValueTable:
    """In-sample optimal values of the empirical MDP."""

    v: dict[int, float]
    q: dict[tuple[int, int], float]
    gamma: float

    def value(self, s: int) -> float:
        if s not in self.v:
            raise OutOfSupport(f"state {s} has no in-support action in the dataset")
        return self.v[s]

    def qvalue(self, s: int, a: int) -> float:
        if (s, a) not in self.q:
            raise OutOfSupport(f"state-action ({s}, {a}) never occurs in the dataset")
        return self.q[(s, a)]

    def advantage(self, s: int, a: int) -> float:
        return self.qvalue(s, a) - self.value(s)

    def support_actions(self, s: int) -> list[int]:
        return sorted(a for (st, a) in self.q if st == s)

    def render_text(self, env=None) -> str:
        lines = ["state  value  q-per-action"]
        for s in sorted(self.v):
            label = str(s)
            if env is not None:
                label = f"{s}{env.cell_of(s)}"
            qs = ", ".join(f"a{a}={self.q[(s, a)]:.6g}" for a in self.support_actions(s))
            lines.append(f"{label}  {self.v[s]:.6g}  [{qs}]")
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {
            "kind": "exact-value-table",
            "gamma": self.gamma,
            "v": {str(s): val for s, val in sorted(self.v.items())},
            "q": {f"{s},{a}": val for (s, a), val in sorted(self.q.items())},
        }

    @classmethod
    def from_json(cls, blob: dict) -> "ExactValueTable":
        return cls(
            v={int(k): float(x) for k, x in blob["v"].items()},
            q={tuple(int(t) for t in k.split(",")): float(x) for k, x in blob["q"].items()},
            gamma=float(blob["gamma"]),
        )


class _CompiledMDP:
    """Occurrence lists folded into flat arrays for fast sweeps.

    Per in-support (s, a): mean reward, plus (source-position, weight)
    terms for every non-done successor that is itself a source. Done
    transitions and truncation frontiers bootstrap with 0.
    """

    def __init__(self, occ):
        self.states = sorted(occ)
        pos = {s: i for i, s in enumerate(self.states)}
        self.entries = []  # per state: list of (action, r_mean, [(pos, weight)...])
        for s in self.states:
            rows = []
            for a in sorted(occ[s]):
                obs = occ[s][a]
                r_mean = float(np.mean([r for _, r, _ in obs]))
                terms: dict[int, float] = {}
                for s2, _, done in obs:
                    if not done and s2 in pos:
                        terms[pos[s2]] = terms.get(pos[s2], 0.0) + 1.0 / len(obs)
                rows.append((a, r_mean, sorted(terms.items())))
            self.entries.append(rows)

    def sweep(self, v: np.ndarray, gamma: float) -> np.ndarray:
        out = np.empty_like(v)
        for i, rows in enumerate(self.entries):
            best = -np.inf
            for _, r_mean, terms in rows:
                q = r_mean + gamma * sum(w * v[j] for j, w in terms)
                if q > best:
                    best = q
            out[i] = best
        return out

    def q_values(self, v: np.ndarray, gamma: float) -> dict[tuple[int, int], float]:
        q = {}
        for i, rows in enumerate(self.entries):
            s = self.states[i]
            for a, r_mean, terms in rows:
                q[(s, a)] = float(r_mean + gamma * sum(w * v[j] for j, w in terms))
        return q


def exact_dp(ds: OfflineDataset, gamma: float,
             horizon: int | None = None) -> ExactValueTable:
    """In-sample optimal values by value iteration / backward induction.

    gamma = 1 needs either an acyclic empirical MDP or a finite horizon;
    cyclic, horizonless input is rejected. With a horizon, sweeps stop at
    sup-norm 1e-10 and error out past 10x horizon iterations.
    """
    occ = _occurrences(ds)
    mdp = _CompiledMDP(occ)
    v = np.zeros(len(mdp.states))

    if gamma < 1.0:
        for _ in range(100_000):
            nv = mdp.sweep(v, gamma)
            if np.max(np.abs(nv - v), initial=0.0) < 1e-10:
                v = nv
                break
            v = nv
        else:
            raise CriticDiverged("value iteration failed to reach 1e-10")
    elif horizon is None:
        order = _topological_states(occ)
        pos = {s: i for i, s in enumerate(mdp.states)}
        for s in order:  # successors first
            i = pos[s]
            best = -np.inf
            for _, r_mean, terms in mdp.entries[i]:
                q = r_mean + sum(w * v[j] for j, w in terms)
                best = max(best, q)
            v[i] = best
    else:
        converged = False
        for _ in range(10 * horizon):
            nv = mdp.sweep(v, 1.0)
            if np.max(np.abs(nv - v), initial=0.0) < 1e-10:
                v = nv
                converged = True
                break
            v = nv
        if not converged:
            raise ValueError(
                "gamma = 1 did not converge within 10x horizon sweeps; "
                "the empirical MDP drives values without bound")

    vmap = {s: float(v[i]) for i, s in enumerate(mdp.states)}
    return ExactValueTable(v=vmap, q=mdp.q_values(v, gamma), gamma=gamma)


def _topological_states(occ) -> list[int]:
    """States ordered successors-first; raises on cycles."""
    edges: dict[int, set[int]] = {s: set() for s in occ}
    for s, by_action in occ.items():
        for obs in by_action.values():
            for s2, _, done in obs:
                if not done and s2 in occ:
                    edges[s].add(s2)
    order: list[int] = []
    mark: dict[int, int] = {}  # 1 = visiting, 2 = finished

    def visit(s: int, trail: list[int]) -> None:
        mark[s] = 1
        for s2 in sorted(edges[s]):
            st = mark.get(s2, 0)
            if st == 1:
                raise ValueError(
                    f"gamma = 1 on a cyclic empirical MDP needs a horizon "
                    f"(cycle through states {trail + [s2]})")
            if st == 0:
                visit(s2, trail + [s2])
        mark[s] = 2
        order.append(s)

    for s in sorted(occ):
        if mark.get(s, 0) == 0:
            visit(s, [s])
    return order


@dataclass
class GoalValueTable:
    """Goal-conditioned in-sample optimal values V(s, g), Q(s, a, g).

    Sparse shortest-path convention: every step from a non-goal state
    costs 1; the goal is absorbing with value exactly 0.
    """

    v: dict[tuple[int, int], float]
    q: dict[tuple[int, int, int], float]
    gamma: float
    goals: tuple[int, ...]

    def value(self, s: int, g: int) -> float:
        if s == g:
            return 0.0
        if (s, g) not in self.v:
            raise OutOfSupport(f"state {s} has no in-support action (goal {g})")
        return self.v[(s, g)]

    def qvalue(self, s: int, a: int, g: int) -> float:
        if (s, a, g) not in self.q:
            raise OutOfSupport(f"({s}, {a}) never occurs in the dataset (goal {g})")
        return self.q[(s, a, g)]

    def advantage(self, s: int, a: int, g: int) -> float:
        return self.qvalue(s, a, g) - self.value(s, g)


def exact_goal_dp(ds: OfflineDataset, gamma: float, horizon: int | None = None,
                  goals: list[int] | None = None) -> GoalValueTable:
    """Vectorized per-goal value iteration over the empirical MDP."""
    if gamma >= 1.0 and horizon is None:
        raise ValueError("goal-conditioned DP with gamma = 1 needs a horizon")
    occ = _occurrences(ds)
    if goals is None:
        seen = set(occ)
        for traj in ds.trajectories:
            seen.update(traj.states)
        goals = sorted(seen)
    goals_arr = np.array(goals)

    # edge e: unique (source, action) with its deterministic-ish successor set
    srcs = sorted(occ)
    src_pos = {s: i for i, s in enumerate(srcs)}
    edge_src, edge_action, edge_terms = [], [], []
    for s in srcs:
        for a in sorted(occ[s]):
            obs = occ[s][a]
            terms: dict[int, float] = {}
            for s2, _, _ in obs:
                terms[s2] = terms.get(s2, 0.0) + 1.0 / len(obs)
            edge_src.append(s)
            edge_action.append(a)
            edge_terms.append(sorted(terms.items()))
    n_edges = len(edge_src)
    max_terms = max(len(t) for t in edge_terms)
    succ = np.zeros((n_edges, max_terms), dtype=int)
    w = np.zeros((n_edges, max_terms))
    for e, terms in enumerate(edge_terms):
        for j, (s2, weight) in enumerate(terms):
            succ[e, j] = src_pos.get(s2, -1)   # -1: truncation frontier, V = 0
            w[e, j] = weight
    succ_state = np.array([[edge_terms[e][j][0] if j < len(edge_terms[e]) else -1
                            for j in range(max_terms)] for e in range(n_edges)])
    frontier = succ < 0

    G, S = len(goals), len(srcs)
    # per goal: successor is absorbing iff it equals the goal
    absorbing = succ_state[None, :, :] == goals_arr[:, None, None]      # [G, E, T]
    src_of_edge = np.array([src_pos[s] for s in edge_src])
    edge_is_from_goal = np.array(edge_src)[None, :] == goals_arr[:, None]  # [G, E]

    # reduceat segments: edges are already grouped by source
    seg_starts = np.flatnonzero(np.r_[1, np.diff(src_of_edge)])
    seg_src = src_of_edge[seg_starts]

    v = np.zeros((G, S))
    max_sweeps = 100_000 if gamma < 1.0 else 10 * int(horizon or 0)
    converged = False
    for _ in range(max_sweeps):
        vs = np.where(frontier[None, :, :] | absorbing, 0.0,
                      v[:, np.clip(succ, 0, S - 1)])                     # [G, E, T]
        q = -1.0 + gamma * (vs * w[None, :, :]).sum(axis=2)              # [G, E]
        q = np.where(edge_is_from_goal, 0.0, q)
        nv = np.full((G, S), -np.inf)
        red = np.maximum.reduceat(q, seg_starts, axis=1)                 # [G, n_seg]
        nv[:, seg_src] = red
        nv[np.arange(G), [src_pos.get(g, 0) for g in goals]] = np.where(
            [g in src_pos for g in goals],
            0.0,
            nv[np.arange(G), [src_pos.get(g, 0) for g in goals]])
        if np.max(np.abs(nv - v)) < 1e-10:
            v = nv
            converged = True
            break
        v = nv
    if not converged:
        raise ValueError("goal-conditioned DP did not converge "
                         "(gamma = 1 with unreachable goals?)")

    vs = np.where(frontier[None, :, :] | absorbing, 0.0, v[:, np.clip(succ, 0, S - 1)])
    q_arr = -1.0 + gamma * (vs * w[None, :, :]).sum(axis=2)
    q_arr = np.where(edge_is_from_goal, 0.0, q_arr)

    v_out: dict[tuple[int, int], float] = {}
    q_out: dict[tuple[int, int, int], float] = {}
    for gi, g in enumerate(goals):
        for s, i in src_pos.items():
            if s != g:
                v_out[(s, g)] = float(v[gi, i])
        for e in range(n_edges):
            q_out[(edge_src[e], edge_action[e], g)] = float(q_arr[gi, e])
    return GoalValueTable(v=v_out, q=q_out, gamma=gamma, goals=tuple(goals))


# ---------------------------------------------------------------------------
# fitted critics

@dataclass
class CriticConfig:
    tau: float = 0.9
    polyak: float = 0.005
    gamma: float = 0.99
    lr: float = 1e-3
    batch_size: int = 256
    steps: int = 20000
    hidden_dim: int = 64
    seed: int = 0
    twin_q: bool = False
    # goal sampling mixture for the goal-conditioned critic
    goal_future_p: float = 0.5
    goal_final_p: float = 0.2
    goal_random_p: float = 0.3
    goal_geom_p: float = 0.25
    log_every: int = 500

    def __post_init__(self):
        if not 0.5 <= self.tau < 1.0:
            raise ValueError(f"critic tau must lie in [0.5, 1), got {self.tau}")
        mix = self.goal_future_p + self.goal_final_p + self.goal_random_p
        if abs(mix - 1.0) > 1e-9:
            raise ValueError(f"goal sampling mixture sums to {mix}, expected 1")


def _flatten_transitions(ds: OfflineDataset):
    s, a, r, s2, done = [], [], [], [], []
    for traj in ds.trajectories:
        T = len(traj.actions)
        for t in range(T):
            s.append(traj.states[t])
            a.append(traj.actions[t])
            r.append(traj.rewards[t])
            s2.append(traj.states[t + 1])
            done.append(traj.terminal and t == T - 1)
    return (np.array(s), np.array(a), np.array(r, dtype=float),
            np.array(s2), np.array(done, dtype=bool))


class _NetCritic:
    """Shared numpy-side forward passes for fitted critics."""

    params: dict[str, Tensor]
    target: dict[str, np.ndarray]
    n_states: int

    def _np_mlp(self, params, prefix: str, x: np.ndarray) -> np.ndarray:
        h = x
        for i in range(2):
            h = h @ self._arr(params, f"{prefix}.h{i}.w") + self._arr(params, f"{prefix}.h{i}.b")
            h = h * 0.5 * (1.0 + erf(h / np.sqrt(2.0)))
        return h @ self._arr(params, f"{prefix}.out.w") + self._arr(params, f"{prefix}.out.b")

    @staticmethod
    def _arr(params, key):
        p = params[key]
        return p.data if isinstance(p, Tensor) else p

    def _onehot(self, idx: np.ndarray) -> np.ndarray:
        return np.eye(self.n_states)[idx]


class IQLCritic(_NetCritic):
    """Expectile state-value net plus a TD-trained Q net with Polyak target."""

    def __init__(self, n_states: int, n_actions: int, config: CriticConfig):
        self.n_states = n_states
        self.n_actions = n_actions
        self.config = config
        self.fitted = False
        self.loss_curve: list[tuple[int, float, float]] = []
        rng = rngmod.stream(config.seed, "init")
        self.params = {}
        nn.add_mlp(self.params, rng, "v", n_states, config.hidden_dim, 1)
        nn.add_mlp(self.params, rng, "q", n_states, config.hidden_dim, n_actions)
        if config.twin_q:
            nn.add_mlp(self.params, rng, "q2", n_states, config.hidden_dim, n_actions)
        self.target = {k: p.data.copy() for k, p in self.params.items()}

    def v(self, s: int) -> float:
        return float(self._np_mlp(self.params, "v", self._onehot(np.array([s])))[0, 0])

    def q(self, s: int, a: int) -> float:
        if not self.fitted:
            raise RuntimeError("critic queried before fitting")
        oh = self._onehot(np.array([s]))
        row = self._np_mlp(self.params, "q", oh)[0]
        if self.config.twin_q:
            row = np.minimum(row, self._np_mlp(self.params, "q2", oh)[0])
        return float(row[a])

    def q_target(self, s_onehot: np.ndarray, a: np.ndarray) -> np.ndarray:
        rows = self._np_mlp(self.target, "q", s_onehot)
        if self.config.twin_q:
            rows = np.minimum(rows, self._np_mlp(self.target, "q2", s_onehot))
        return rows[np.arange(len(a)), a]

    def v_values(self, s_onehot: np.ndarray) -> np.ndarray:
        return self._np_mlp(self.params, "v", s_onehot)[:, 0]


def fit_iql(ds: OfflineDataset, config: CriticConfig) -> IQLCritic:
    """Simultaneous expectile-V and TD-Q regression with target smoothing.

    The V loss regresses toward the target Q net; the Q loss regresses
    toward r + gamma * V(s') with V held constant. Terminal transitions
    bootstrap 0.
    """
    if not ds.trajectories:
        raise ValueError("cannot fit a critic on an empty dataset")
    critic = IQLCritic(ds.n_states, ds.n_actions, config)
    s, a, r, s2, done = _flatten_transitions(ds)
    n = len(s)
    eye = np.eye(ds.n_states)
    eye_a = np.eye(ds.n_actions)
    bound = 10.0 * max(ds.max_abs_return(), 1.0)
    batch_rng = rngmod.stream(config.seed, "batch")
    opt = AdamW(critic.params, lr=config.lr)

    for step in range(config.steps):
        idx = batch_rng.integers(0, n, size=min(config.batch_size, n))
        s_oh = eye[s[idx]]
        a_b = a[idx]

        q_bar = critic.q_target(s_oh, a_b)                        # constant
        v_next = critic.v_values(eye[s2[idx]])                    # constant (stop-grad)
        y = r[idx] + config.gamma * np.where(done[idx], 0.0, v_next)

        with tape():
            v_t = ag.reshape(nn.mlp(Tensor(s_oh), critic.params, "v"), (len(idx),))
            loss_v = expectile_loss_t(ag.add(Tensor(q_bar), ag.mul(v_t, -1.0)), config.tau)

            q_all = nn.mlp(Tensor(s_oh), critic.params, "q")
            q_sa = ag.sum(ag.mul(q_all, Tensor(eye_a[a_b])), axis=-1)
            td = ag.add(Tensor(y), ag.mul(q_sa, -1.0))
            loss_q = ag.mean(ag.mul(td, td))
            if config.twin_q:
                q2_sa = ag.sum(ag.mul(nn.mlp(Tensor(s_oh), critic.params, "q2"),
                                      Tensor(eye_a[a_b])), axis=-1)
                td2 = ag.add(Tensor(y), ag.mul(q2_sa, -1.0))
                loss_q = ag.add(loss_q, ag.mean(ag.mul(td2, td2)))
            loss = ag.add(loss_v, loss_q)
        opt.zero_grad()
        backward(loss)
        opt.step()

        rho = config.polyak
        for k, p in critic.params.items():
            critic.target[k] = (1.0 - rho) * critic.target[k] + rho * p.data

        if step % config.log_every == 0 or step == config.steps - 1:
            critic.loss_curve.append((step, float(loss_v.data), float(loss_q.data)))
            if np.max(np.abs(critic.v_values(eye))) > bound:
                raise CriticDiverged(f"|V| exceeded {bound:.3g} at step {step}")

    critic.fitted = True
    return critic


class HIQLCritic(_NetCritic):
    """Action-free goal-conditioned expectile critic V(s, g).

    Q(s, a, g) is derived by a one-step bootstrap through the dataset's
    deterministic transition, so its support mirrors the empirical MDP.
    V(g, g) is 0 by the absorbing convention.
    """

    def __init__(self, n_states: int, n_actions: int, config: CriticConfig):
        self.n_states = n_states
        self.n_actions = n_actions
        self.config = config
        self.fitted = False
        self.loss_curve: list[tuple[int, float, float]] = []
        rng = rngmod.stream(config.seed, "init")
        self.params = {}
        nn.add_mlp(self.params, rng, "vg", 2 * n_states, config.hidden_dim, 1)
        self.target = {k: p.data.copy() for k, p in self.params.items()}
        self.next_map: dict[tuple[int, int], int] = {}

    def _pair_onehot(self, s: np.ndarray, g: np.ndarray) -> np.ndarray:
        eye = np.eye(self.n_states)
        return np.concatenate([eye[s], eye[g]], axis=1)

    def v(self, s: int, g: int) -> float:
        if s == g:
            return 0.0
        return float(self._np_mlp(self.params, "vg",
                                  self._pair_onehot(np.array([s]), np.array([g])))[0, 0])

    def v_batch(self, s: np.ndarray, g: np.ndarray, use_target: bool = False) -> np.ndarray:
        params = self.target if use_target else self.params
        out = self._np_mlp(params, "vg", self._pair_onehot(s, g))[:, 0]
        return np.where(s == g, 0.0, out)

    def q(self, s: int, a: int, g: int) -> float:
        if (s, a) not in self.next_map:
            raise OutOfSupport(f"state-action ({s}, {a}) never occurs in the dataset")
        if s == g:
            return 0.0
        s2 = self.next_map[(s, a)]
        return -1.0 + self.config.gamma * (0.0 if s2 == g else self.v(s2, g))


def fit_hiql(ds: OfflineDataset, config: CriticConfig) -> HIQLCritic:
    """Goal-conditioned expectile regression with mixture goal sampling.

    Goals come from the same trajectory's future (geometric offset), its
    final state, or a uniformly random observed state; the random component
    is what lets values propagate across disjoint trajectory segments.
    """
    if not ds.trajectories:
        raise ValueError("cannot fit a critic on an empty dataset")
    critic = HIQLCritic(ds.n_states, ds.n_actions, config)

    traj_of, pos_of, s_list, s2_list = [], [], [], []
    cat_states: list[int] = []
    traj_off, traj_last = [], []
    for ti, traj in enumerate(ds.trajectories):
        T = len(traj.actions)
        traj_off.append(len(cat_states))
        cat_states.extend(traj.states)
        traj_last.append(T)  # index of final state within the trajectory
        for t in range(T):
            traj_of.append(ti)
            pos_of.append(t)
            s_list.append(traj.states[t])
            s2_list.append(traj.states[t + 1])
            critic.next_map[(traj.states[t], traj.actions[t])] = traj.states[t + 1]
    s_arr, s2_arr = np.array(s_list), np.array(s2_list)
    traj_of, pos_of = np.array(traj_of), np.array(pos_of)
    cat_states = np.array(cat_states)
    traj_off, traj_last = np.array(traj_off), np.array(traj_last)
    all_states = np.unique(np.concatenate([s_arr, s2_arr]))
    n = len(s_arr)
    bound = 10.0 * max(1.0 / max(1.0 - config.gamma, 1e-6),
                       float(max(len(t) for t in ds.trajectories)))

    batch_rng = rngmod.stream(config.seed, "batch")
    goal_rng = rngmod.stream(config.seed, "goals")
    opt = AdamW(critic.params, lr=config.lr)

    for step in range(config.steps):
        idx = batch_rng.integers(0, n, size=min(config.batch_size, n))
        s_b, s2_b = s_arr[idx], s2_arr[idx]
        u = goal_rng.random(len(idx))
        offsets = goal_rng.geometric(config.goal_geom_p, size=len(idx))
        tr = traj_of[idx]
        future_pos = np.minimum(pos_of[idx] + offsets, traj_last[tr])
        g_future = cat_states[traj_off[tr] + future_pos]
        g_final = cat_states[traj_off[tr] + traj_last[tr]]
        g_random = all_states[goal_rng.integers(0, len(all_states), size=len(idx))]
        g_b = np.where(u < config.goal_future_p, g_future,
                       np.where(u < config.goal_future_p + config.goal_final_p,
                                g_final, g_random))

        v_next = critic.v_batch(s2_b, g_b, use_target=True)
        target = np.where(s_b == g_b, 0.0,
                          -1.0 + config.gamma * np.where(s2_b == g_b, 0.0, v_next))

        with tape():
            v_t = ag.reshape(nn.mlp(Tensor(critic._pair_onehot(s_b, g_b)),
                                    critic.params, "vg"), (len(idx),))
            loss = expectile_loss_t(ag.add(Tensor(target), ag.mul(v_t, -1.0)), config.tau)
        opt.zero_grad()
        backward(loss)
        opt.step()

        rho = config.polyak
        for k, p in critic.params.items():
            critic.target[k] = (1.0 - rho) * critic.target[k] + rho * p.data

        if step % config.log_every == 0 or step == config.steps - 1:
            critic.loss_curve.append((step, float(loss.data), 0.0))
            if np.max(np.abs(critic.v_batch(s_b, g_b))) > bound:
                raise CriticDiverged(f"|V| exceeded {bound:.3g} at step {step}")

    critic.fitted = True
    return critic
