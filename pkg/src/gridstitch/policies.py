"""Hierarchical policies over the transformer low-level learner.

The value-prompt variant feeds each state's in-sample optimal value as a
scalar prompt; the goal-prompt variant feeds an encoded subgoal chosen by
a tabular jump policy. Both train the same transformer with per-timestep
advantage weights; the return-to-go baseline is the same pipeline with
suffix-sum prompts and unit weights.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import nn, rng as rngmod
from .autograd import NonFiniteError, Tensor, backward, tape
from .critics import ExactValueTable, GoalValueTable, HIQLCritic, OutOfSupport
from .data import OfflineDataset, Trajectory, k_step_pairs, relabel_return_to_go
from .envs import GridWorldSpec
from .model import ModelConfig, Step, forward, init_params, tokenize, weighted_nll_loss
from .optim import AdamW


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during policy training."""


@dataclass
class TrainConfig:
    alpha: float = 3.0            # advantage temperature; 1.0 for goal prompts
    weight_clip: float = 100.0
    lr: float = 1e-4
    warmup_steps: int = 10000
    batch_size: int = 256
    steps: int = 2000
    grad_clip: float = 0.25
    weight_decay: float = 1e-4
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"inverse temperature alpha must be positive, got {self.alpha}")
        if self.weight_clip < 1:
            raise ValueError(f"weight clip must be >= 1, got {self.weight_clip}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "alpha", "weight_clip", "lr", "warmup_steps", "batch_size", "steps",
            "grad_clip", "weight_decay", "seed", "log_every")}


# ---------------------------------------------------------------------------
# critic adapters and provenance

def _value_fns(critic):
    """(v, q) callables for either exact tables or fitted nets."""
    if hasattr(critic, "value"):
        return critic.value, critic.qvalue
    return critic.v, critic.q


def critic_hash(critic) -> str:
    """Stable content hash of whatever produces prompts."""
    h = hashlib.sha256()
    if hasattr(critic, "to_json"):
        h.update(json.dumps(critic.to_json(), sort_keys=True).encode())
    elif hasattr(critic, "params"):
        for name in sorted(critic.params):
            h.update(name.encode())
            h.update(critic.params[name].data.tobytes())
    elif isinstance(critic, GoalValueTable):
        for key in sorted(critic.v):
            h.update(f"{key}={critic.v[key]:.12g}".encode())
    else:
        raise TypeError(f"cannot hash critic of type {type(critic).__name__}")
    return h.hexdigest()


class ValuePromptPolicy:
    """High-level policy that is exactly the fitted state value."""

    prompt_dim = 1

    def __init__(self, critic):
        self.critic = critic
        self._v, _ = _value_fns(critic)

    def prompt(self, s: int) -> np.ndarray:
        return np.array([self._v(s)])

    def provenance_hash(self) -> str:
        return critic_hash(self.critic)


@dataclass
class SubgoalTable:
    """Tabular jump policy: normalized advantage-weighted successor counts."""

    probs: dict[tuple[int, int], dict[int, float]]
    way_step: int

    def distribution(self, s: int, g: int) -> dict[int, float]:
        if (s, g) not in self.probs:
            raise OutOfSupport(f"no observed jumps from state {s} (goal {g})")
        return self.probs[(s, g)]

    def subgoal(self, s: int, g: int) -> int:
        dist = self.distribution(s, g)
        best = max(dist.items(), key=lambda kv: (kv[1], -kv[0]))
        return best[0]

    def to_json(self) -> dict:
        return {
            "kind": "subgoal-table",
            "way_step": self.way_step,
            "probs": {f"{s},{g}": {str(sub): p for sub, p in sorted(d.items())}
                      for (s, g), d in sorted(self.probs.items())},
        }

    @classmethod
    def from_json(cls, blob: dict) -> "SubgoalTable":
        return cls(
            probs={tuple(int(t) for t in k.split(",")):
                   {int(sub): float(p) for sub, p in d.items()}
                   for k, d in blob["probs"].items()},
            way_step=int(blob["way_step"]),
        )


class GoalPromptPolicy:
    """High-level policy that prompts with an encoded k-step subgoal."""

    def __init__(self, table: SubgoalTable, env: GridWorldSpec, goal: int):
        self.table = table
        self.env = env
        self.goal = goal
        self.prompt_dim = env.encode_dim

    def subgoal(self, s: int, goal: int | None = None) -> int:
        return self.table.subgoal(s, self.goal if goal is None else goal)

    def prompt(self, s: int, goal: int | None = None) -> np.ndarray:
        return self.env.encode(self.subgoal(s, goal))

    def provenance_hash(self) -> str:
        h = hashlib.sha256(json.dumps(self.table.to_json(), sort_keys=True).encode())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# advantage weights

def _clipped_exp_weights(adv: np.ndarray, alpha: float, clip: float) -> np.ndarray:
    # exp(min(A/alpha, log clip)) == min(exp(A/alpha), clip) without overflow
    return np.exp(np.minimum(adv / alpha, np.log(clip)))


def awr_weights(ds: OfflineDataset, critic, alpha: float, clip: float = 100.0,
                high_level: GoalPromptPolicy | None = None) -> list[np.ndarray]:
    """Per-trajectory arrays of min(exp(advantage / alpha), clip).

    With a goal-prompt high level, advantages are computed against the
    relabeled subgoal of each transition's source state; a trajectory's
    own goal field, when set, overrides the high level's default goal.
    """
    if alpha <= 0:
        raise ValueError(f"inverse temperature alpha must be positive, got {alpha}")
    if getattr(critic, "fitted", True) is False:
        raise ValueError("critic must be fitted before computing advantage weights")
    v_fn, q_fn = _value_fns(critic)
    out = []
    for traj in ds.trajectories:
        adv = np.empty(len(traj.actions))
        for t in range(len(traj.actions)):
            s, a = traj.states[t], traj.actions[t]
            if high_level is not None:
                sub = high_level.subgoal(s, goal=traj.goal)
                adv[t] = q_fn(s, a, sub) - v_fn(s, sub)
            else:
                adv[t] = q_fn(s, a) - v_fn(s)
        out.append(_clipped_exp_weights(adv, alpha, clip))
    return out


# ---------------------------------------------------------------------------
# low-level transformer training

@dataclass
class TrainedPolicy:
    variant: str
    params: dict[str, Tensor]
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    loss_curve: list[tuple[int, float]]
    prompt_provenance: str | None = None
    subgoal_table: SubgoalTable | None = None
    goal: int | None = None


def _trajectory_rows(env: GridWorldSpec, traj: Trajectory,
                     weights: np.ndarray | None, prompt_on: bool,
                     prompt_dim: int) -> dict:
    T = len(traj.actions)
    enc = np.stack([env.encode(traj.states[t]) for t in range(T)])
    if prompt_on:
        if traj.prompts is None:
            raise ValueError("trajectory has no prompts; relabel first")
        prompts = np.stack([np.asarray(p, dtype=float) for p in traj.prompts])
    else:
        prompts = np.zeros((T, prompt_dim))
    return {
        "states": enc,
        "prompts": prompts,
        "actions": np.array(traj.actions, dtype=int),
        "weights": np.ones(T) if weights is None else np.asarray(weights, dtype=float),
    }


def train_low_level(env: GridWorldSpec, ds: OfflineDataset, model_cfg: ModelConfig,
                    train_cfg: TrainConfig, critic=None, variant: str = "vadt",
                    high_level: GoalPromptPolicy | None = None,
                    weights_on: bool = True, prompt_on: bool = True) -> TrainedPolicy:
    """Advantage-weighted sequence modeling over sliding windows.

    Sliding windows of at most `context_len` timesteps, linear warmup then
    constant learning rate, global gradient-norm clipping. A non-finite
    loss aborts with a diagnostic.
    """
    if not ds.trajectories:
        raise ValueError("cannot train on an empty dataset")
    if model_cfg.state_dim != env.encode_dim:
        raise ValueError(f"model state_dim {model_cfg.state_dim} != "
                         f"env encoding {env.encode_dim}")

    if weights_on and variant in ("vadt", "gadt"):
        if critic is None:
            raise ValueError(f"{variant} training needs a critic for weights")
        weight_arrays = awr_weights(ds, critic, train_cfg.alpha,
                                    train_cfg.weight_clip, high_level=high_level)
    else:
        weight_arrays = [None] * len(ds.trajectories)

    rows = [_trajectory_rows(env, traj, w, prompt_on, model_cfg.prompt_dim)
            for traj, w in zip(ds.trajectories, weight_arrays)]
    flat = [(ti, t_end) for ti, traj in enumerate(ds.trajectories)
            for t_end in range(len(traj.actions))]
    if not flat:
        raise ValueError("dataset has no transitions")

    params = init_params(model_cfg, train_cfg.seed)
    opt = AdamW(params, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    batch_rng = rngmod.stream(train_cfg.seed, "batch")
    drop_rng = rngmod.stream(train_cfg.seed, "dropout")
    K = model_cfg.context_len
    curve: list[tuple[int, float]] = []

    def window(ti: int, t_end: int) -> list[Step]:
        r = rows[ti]
        t0 = max(0, t_end - K + 1)
        return [Step(prompt=r["prompts"][t], state=r["states"][t],
                     action=int(r["actions"][t]), timestep=t,
                     target=int(r["actions"][t]), weight=float(r["weights"][t]))
                for t in range(t0, t_end + 1)]

    for step_i in range(train_cfg.steps):
        opt.lr = train_cfg.lr * min(1.0, (step_i + 1) / max(train_cfg.warmup_steps, 1))
        picks = batch_rng.integers(0, len(flat), size=min(train_cfg.batch_size, len(flat)))
        windows = [window(*flat[i]) for i in picks]
        batch = tokenize(windows, model_cfg.tokenization, model_cfg.prompt_scale)
        try:
            with tape():
                logits = forward(params, model_cfg, batch, training=True, rng=drop_rng)
                loss = weighted_nll_loss(logits, batch.targets, batch.weights)
        except NonFiniteError as e:
            raise TrainingDiverged(f"non-finite activation at step {step_i}: {e}") from e
        if not np.isfinite(loss.data):
            raise TrainingDiverged(f"loss became non-finite at step {step_i}")
        opt.zero_grad()
        backward(loss)
        nn.clip_grad_norm(params, train_cfg.grad_clip)
        opt.step()
        if step_i % train_cfg.log_every == 0 or step_i == train_cfg.steps - 1:
            curve.append((step_i, float(loss.data)))

    provenance = None
    if variant == "vadt" and critic is not None:
        provenance = critic_hash(critic)
    elif variant == "gadt" and high_level is not None:
        provenance = high_level.provenance_hash()
    return TrainedPolicy(variant=variant, params=params, model_cfg=model_cfg,
                         train_cfg=train_cfg, loss_curve=curve,
                         prompt_provenance=provenance)


def dt_baseline_train(env: GridWorldSpec, ds: OfflineDataset, model_cfg: ModelConfig,
                      train_cfg: TrainConfig) -> TrainedPolicy:
    """Return-to-go prompts, unit weights; otherwise the identical pipeline."""
    relabel_return_to_go(ds)
    for traj in ds.trajectories:
        traj.prompts = [np.array([r]) for r in traj.rtg]
    policy = train_low_level(env, ds, model_cfg, train_cfg, critic=None,
                             variant="dt", weights_on=False, prompt_on=True)
    return policy


# ---------------------------------------------------------------------------
# goal-prompt high level

def train_goal_high_level(env: GridWorldSpec, ds: OfflineDataset, critic,
                          k: int, alpha: float, gamma: float,
                          clip: float = 100.0,
                          goals: list[int] | None = None) -> SubgoalTable:
    """Fit the tabular jump policy in closed form.

    For a tabular softmax the weighted log-likelihood is maximized exactly
    by normalized weighted counts, so no gradient loop is needed: each
    observed k-step jump contributes exp(advantage / alpha) to its
    (state, goal) cell.
    """
    if k <= 0:
        raise ValueError(f"way-step k must be >= 1, got {k}")
    if alpha <= 0:
        raise ValueError(f"inverse temperature alpha must be positive, got {alpha}")
    if getattr(critic, "fitted", True) is False:
        raise ValueError("critic must be fitted before training the high level")

    if goals is None:
        seen: set[int] = set()
        for traj in ds.trajectories:
            seen.update(traj.states)
        goals = sorted(seen)

    v_fn, _ = _value_fns(critic)
    vcache: dict[tuple[int, int], float] = {}

    def vget(s: int, g: int) -> float:
        key = (s, g)
        if key not in vcache:
            vcache[key] = 0.0 if s == g else v_fn(s, g)
        return vcache[key]

    sums: dict[tuple[int, int], dict[int, float]] = {}
    for traj in ds.trajectories:
        for pair in k_step_pairs(traj, k, gamma):
            if pair.k_eff:
                sources = (pair.s_from,) + pair.states_between[:-1]
                k_pow = pair.k_eff
            else:
                # zero-length clamp: score it as a k-step self-loop so that
                # lingering is only advantage-neutral at the goal itself
                sources = (pair.s_from,) * k
                k_pow = k
            for g in goals:
                r_sum = 0.0
                for i, src in enumerate(sources):
                    r_sum += (gamma ** i) * (0.0 if src == g else -1.0)
                adv = (r_sum + (gamma ** k_pow) * vget(pair.s_to, g)
                       - vget(pair.s_from, g))
                w = float(_clipped_exp_weights(np.array(adv), alpha, clip))
                cell = sums.setdefault((pair.s_from, g), {})
                cell[pair.s_to] = cell.get(pair.s_to, 0.0) + w

    probs = {}
    for key, cell in sums.items():
        total = sum(cell.values())
        probs[key] = {sub: w / total for sub, w in sorted(cell.items())}
    return SubgoalTable(probs=probs, way_step=k)


# ---------------------------------------------------------------------------
# idealized tabular return-conditioned policy

def _rtg_key(rtg: float) -> float:
    return round(float(rtg), 9)


@dataclass
class IdealizedDTTable:
    """Exact empirical conditional of action given (state, return-to-go).

    A perfect memorizer of the dataset: the return prompt acts as a switch
    between stored continuations, and anything unseen is flagged rather
    than extrapolated.
    """

    table: dict[tuple[int, float], dict[int, int]]
    occurrences: dict[int, list[tuple[int, float]]] = field(default_factory=dict)

    @classmethod
    def build(cls, ds: OfflineDataset) -> "IdealizedDTTable":
        relabel_return_to_go(ds)
        table: dict[tuple[int, float], dict[int, int]] = {}
        occurrences: dict[int, list[tuple[int, float]]] = {}
        for traj in ds.trajectories:
            for t in range(len(traj.actions)):
                s, a, rtg = traj.states[t], traj.actions[t], _rtg_key(traj.rtg[t])
                counts = table.setdefault((s, rtg), {})
                counts[a] = counts.get(a, 0) + 1
                occurrences.setdefault(s, []).append((a, rtg))
        return cls(table=table, occurrences=occurrences)

    def query(self, s: int, rtg: float) -> dict[int, float] | None:
        """Action distribution, or None when (s, rtg) is out of distribution."""
        counts = self.table.get((s, _rtg_key(rtg)))
        if counts is None:
            return None
        total = sum(counts.values())
        return {a: c / total for a, c in sorted(counts.items())}

    def is_ood(self, s: int, rtg: float) -> bool:
        return (s, _rtg_key(rtg)) not in self.table

    def support_rtgs(self, s: int) -> list[float]:
        return sorted({rtg for (st, rtg) in self.table if st == s})

    def fallback(self, s: int, rng: np.random.Generator) -> tuple[int, float]:
        """Switch onto a stored occurrence of s: its action and stored return.

        Used when the prompt is out of distribution; the policy can only
        replay stored trajectories, never synthesize an unseen pairing.
        """
        occ = self.occurrences.get(s)
        if not occ:
            raise OutOfSupport(f"state {s} never occurs in the dataset")
        a, rtg = occ[int(rng.integers(0, len(occ)))]
        return a, rtg
