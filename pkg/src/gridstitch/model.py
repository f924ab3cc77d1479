"""Causal transformer policy over prompted trajectory windows.

Token layout per timestep, in sequence order:

  concat mode:   [prompt (+) state] [action]          (2 tokens per step)
  separate mode: [prompt] [state] [action]            (3 tokens per step)

Prompts are multiplied by the prompt scale before embedding. The action
distribution for step t is read at the last pre-action token of step t,
so it can never condition on the step's own action. Windows in a batch
are left-padded to a common length; padded key positions are masked out
of attention entirely and carry zero loss weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import nn, rng as rngmod
from .autograd import Tensor

ATTN_MASK_VALUE = -1e9


@dataclass
class ModelConfig:
    n_actions: int
    state_dim: int
    prompt_dim: int
    max_timestep: int
    n_layers: int = 3
    hidden_dim: int = 64
    n_heads: int = 1
    context_len: int = 20
    tokenization: str = "concat"      # or "separate"
    prompt_scale: float = 1.0
    embed_dropout: float = 0.1
    attn_dropout: float = 0.1
    resid_dropout: float = 0.1

    def __post_init__(self):
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.n_heads}")
        if self.context_len < 1:
            raise ValueError("context_len must be >= 1")
        if self.tokenization not in ("concat", "separate"):
            raise ValueError(f"unknown tokenization mode '{self.tokenization}'")

    @property
    def tokens_per_step(self) -> int:
        return 2 if self.tokenization == "concat" else 3

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "n_actions", "state_dim", "prompt_dim", "max_timestep", "n_layers",
            "hidden_dim", "n_heads", "context_len", "tokenization", "prompt_scale",
            "embed_dropout", "attn_dropout", "resid_dropout")}


@dataclass
class Step:
    """One timestep of a trajectory window fed to the tokenizer."""

    prompt: np.ndarray | None
    state: np.ndarray
    action: int                 # input token; a placeholder at the current step
    timestep: int
    target: int = 0             # supervised action index
    weight: float = 0.0


@dataclass
class TokenizedBatch:
    mode: str
    prompts: np.ndarray         # [B, T, P], already scaled
    states: np.ndarray          # [B, T, S]
    actions: np.ndarray         # [B, T] int
    timesteps: np.ndarray       # [B, T] int
    targets: np.ndarray         # [B, T] int
    weights: np.ndarray         # [B, T], zero on padding
    valid: np.ndarray           # [B, T] bool
    attn_mask: np.ndarray = field(repr=False)  # [B, N, N] bool, True = blocked
    tokens_per_step: int = 2

    @property
    def n_tokens(self) -> int:
        return self.attn_mask.shape[-1]


def tokenize(windows: list[list[Step]], mode: str, prompt_scale: float,
             max_len: int | None = None) -> TokenizedBatch:
    """Stack windows into a left-padded batch with a strictly causal mask."""
    if mode not in ("concat", "separate"):
        raise ValueError(f"unknown tokenization mode '{mode}'")
    if not windows:
        raise ValueError("tokenize needs at least one window")
    lengths = [len(w) for w in windows]
    if max_len is not None:
        too_long = [n for n in lengths if n > max_len]
        if too_long:
            raise ValueError(
                f"window of {too_long[0]} timesteps exceeds context length {max_len}")
        T = max_len
    else:
        T = max(lengths)
    first = next(s for w in windows for s in w)
    if first.prompt is None:
        raise ValueError("missing prompt at timestep 0: relabel prompts first")
    p_dim = len(first.prompt)
    s_dim = len(first.state)
    B = len(windows)

    prompts = np.zeros((B, T, p_dim))
    states = np.zeros((B, T, s_dim))
    actions = np.zeros((B, T), dtype=int)
    timesteps = np.zeros((B, T), dtype=int)
    targets = np.zeros((B, T), dtype=int)
    weights = np.zeros((B, T))
    valid = np.zeros((B, T), dtype=bool)

    for b, window in enumerate(windows):
        off = T - len(window)  # left padding
        for i, step in enumerate(window):
            if step.prompt is None:
                raise ValueError(f"missing prompt at timestep {step.timestep}: "
                                 "relabel prompts first")
            t = off + i
            prompts[b, t] = np.asarray(step.prompt, dtype=float) * prompt_scale
            states[b, t] = step.state
            actions[b, t] = step.action
            timesteps[b, t] = step.timestep
            targets[b, t] = step.target
            weights[b, t] = step.weight
            valid[b, t] = True

    ntok = 2 if mode == "concat" else 3
    N = ntok * T
    causal = np.triu(np.ones((N, N), dtype=bool), k=1)
    token_valid = np.repeat(valid, ntok, axis=1)               # [B, N]
    attn_mask = causal[None, :, :] | ~token_valid[:, None, :]  # blocked keys
    return TokenizedBatch(
        mode=mode, prompts=prompts, states=states, actions=actions,
        timesteps=timesteps, targets=targets, weights=weights, valid=valid,
        attn_mask=attn_mask, tokens_per_step=ntok)


# ---------------------------------------------------------------------------
# parameters and forward pass

def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = rngmod.stream(seed, "init")
    params: dict[str, Tensor] = {}
    d = cfg.hidden_dim
    if cfg.tokenization == "concat":
        nn.add_linear(params, rng, "embed_ps", cfg.prompt_dim + cfg.state_dim, d)
    else:
        nn.add_linear(params, rng, "embed_p", cfg.prompt_dim, d)
        nn.add_linear(params, rng, "embed_s", cfg.state_dim, d)
    params["embed_a"] = nn.init_param(rng, (cfg.n_actions, d))
    params["embed_pos"] = nn.init_param(rng, (cfg.max_timestep + 1, d))
    for i in range(cfg.n_layers):
        params[f"l{i}.ln1.g"] = Tensor(np.ones(d), requires_grad=True)
        params[f"l{i}.ln1.b"] = Tensor(np.zeros(d), requires_grad=True)
        for proj in ("wq", "wk", "wv", "wo"):
            nn.add_linear(params, rng, f"l{i}.attn.{proj}", d, d)
        params[f"l{i}.ln2.g"] = Tensor(np.ones(d), requires_grad=True)
        params[f"l{i}.ln2.b"] = Tensor(np.zeros(d), requires_grad=True)
        nn.add_linear(params, rng, f"l{i}.mlp.fc", d, 4 * d)
        nn.add_linear(params, rng, f"l{i}.mlp.proj", 4 * d, d)
    params["lnf.g"] = Tensor(np.ones(d), requires_grad=True)
    params["lnf.b"] = Tensor(np.zeros(d), requires_grad=True)
    # zero head: an untrained model is exactly uniform over actions
    nn.add_linear(params, rng, "head", d, cfg.n_actions, zero=True)
    return params


def _attention(x: Tensor, params: dict[str, Tensor], prefix: str, cfg: ModelConfig,
               attn_mask: np.ndarray, training: bool,
               rng: np.random.Generator | None) -> Tensor:
    B, N, d = x.shape
    H = cfg.n_heads
    dh = d // H

    def heads(t: Tensor) -> Tensor:
        t = ag.reshape(t, (B, N, H, dh))
        t = ag.transpose(t, (0, 2, 1, 3))
        return ag.reshape(t, (B * H, N, dh))

    q = heads(nn.linear(x, params[f"{prefix}.wq.w"], params[f"{prefix}.wq.b"]))
    k = heads(nn.linear(x, params[f"{prefix}.wk.w"], params[f"{prefix}.wk.b"]))
    v = heads(nn.linear(x, params[f"{prefix}.wv.w"], params[f"{prefix}.wv.b"]))

    scores = ag.mul(ag.matmul(q, ag.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
    mask = np.repeat(attn_mask, H, axis=0)
    probs = ag.softmax_last(ag.masked_fill(scores, mask, ATTN_MASK_VALUE))
    probs = nn.dropout(probs, cfg.attn_dropout, rng, training)
    ctx = ag.matmul(probs, v)
    ctx = ag.reshape(ag.transpose(ag.reshape(ctx, (B, H, N, dh)), (0, 2, 1, 3)), (B, N, d))
    return nn.linear(ctx, params[f"{prefix}.wo.w"], params[f"{prefix}.wo.b"])


def forward(params: dict[str, Tensor], cfg: ModelConfig, batch: TokenizedBatch,
            training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Per-timestep action logits, shape [B, T, n_actions]."""
    B, T = batch.actions.shape
    d = cfg.hidden_dim
    ntok = batch.tokens_per_step

    pos = ag.embedding(params["embed_pos"], batch.timesteps)          # [B, T, d]
    a_emb = ag.add(ag.embedding(params["embed_a"], batch.actions), pos)
    if cfg.tokenization == "concat":
        ps = Tensor(np.concatenate([batch.prompts, batch.states], axis=-1))
        ps_emb = ag.add(nn.linear(ps, params["embed_ps.w"], params["embed_ps.b"]), pos)
        stacked = ag.concat_last([ps_emb, a_emb])                     # [B, T, 2d]
    else:
        p_emb = ag.add(nn.linear(Tensor(batch.prompts),
                                 params["embed_p.w"], params["embed_p.b"]), pos)
        s_emb = ag.add(nn.linear(Tensor(batch.states),
                                 params["embed_s.w"], params["embed_s.b"]), pos)
        stacked = ag.concat_last([p_emb, s_emb, a_emb])               # [B, T, 3d]
    x = ag.reshape(stacked, (B, T * ntok, d))
    x = nn.dropout(x, cfg.embed_dropout, rng, training)

    for i in range(cfg.n_layers):
        h = nn.layer_norm_affine(x, params[f"l{i}.ln1.g"], params[f"l{i}.ln1.b"])
        a = _attention(h, params, f"l{i}.attn", cfg, batch.attn_mask, training, rng)
        x = ag.add(x, nn.dropout(a, cfg.resid_dropout, rng, training))
        h = nn.layer_norm_affine(x, params[f"l{i}.ln2.g"], params[f"l{i}.ln2.b"])
        m = ag.gelu(nn.linear(h, params[f"l{i}.mlp.fc.w"], params[f"l{i}.mlp.fc.b"]))
        m = nn.linear(m, params[f"l{i}.mlp.proj.w"], params[f"l{i}.mlp.proj.b"])
        x = ag.add(x, nn.dropout(m, cfg.resid_dropout, rng, training))

    x = nn.layer_norm_affine(x, params["lnf.g"], params["lnf.b"])
    # read at the last pre-action token of each timestep
    readout = 0 if cfg.tokenization == "concat" else 1
    per_step = ag.reshape(x, (B, T, ntok, d))
    h_read = ag.reshape(ag.slice_axis(per_step, 2, readout, readout + 1), (B, T, d))
    return nn.linear(h_read, params["head.w"], params["head.b"])


def weighted_nll_loss(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Sum over timesteps of w_t * (-log p(target_t)), averaged over the batch."""
    if (np.asarray(weights) < 0).any():
        raise ValueError("timestep weights must be non-negative")
    B, T, A = logits.shape
    m = logits.data.max(axis=-1, keepdims=True)
    shifted = ag.add(logits, Tensor(-np.broadcast_to(m, logits.shape).copy()))
    lse = ag.add(ag.log(ag.sum(ag.exp(shifted), axis=-1)), Tensor(m[..., 0]))
    onehot = np.eye(A)[np.asarray(targets, dtype=int)]
    picked = ag.sum(ag.mul(logits, Tensor(onehot)), axis=-1)
    nll = ag.add(lse, ag.mul(picked, -1.0))
    weighted = ag.mul(Tensor(np.asarray(weights, dtype=float)), nll)
    return ag.mean(ag.sum(weighted, axis=1))


def logits_for_window(params: dict[str, Tensor], cfg: ModelConfig,
                      window: list[Step]) -> np.ndarray:
    """Evaluation-mode logits at the window's last timestep."""
    batch = tokenize([window], cfg.tokenization, cfg.prompt_scale)
    out = forward(params, cfg, batch, training=False)
    return out.data[0, -1].copy()


def action_probs(logits_row: np.ndarray) -> np.ndarray:
    z = logits_row - logits_row.max()
    e = np.exp(z)
    return e / e.sum()
