"""Reusable transformer pieces: attention with 2D RoPE, MLP, AdaLN modulation.

Blocks are pure functions over parameter containers; the containers hold
named ``Tensor`` leaves registered in a ``ParamStore`` so every learnable
value has a stable checkpoint key.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


class ParamStore:
    """Flat name -> Tensor registry for all learnable parameters."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self.rng = rng
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}

    def tensor(self, name: str, shape, init: str = "normal", std: float = 0.02) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        if init == "zeros":
            data = np.zeros(shape, dtype=self.dtype)
        elif init == "normal":
            data = (self.rng.normal(scale=std, size=shape)).astype(self.dtype)
        else:
            raise ConfigError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def linear(self, name: str, d_in: int, d_out: int, init: str = "normal",
               std: float = 0.02) -> "LinearParams":
        w = self.tensor(f"{name}.w", (d_in, d_out), init=init, std=std)
        b = self.tensor(f"{name}.b", (d_out,), init="zeros")
        return LinearParams(w=w, b=b)

    def num_elements(self) -> int:
        return sum(t.size for t in self.params.values())


@dataclass
class LinearParams:
    w: Tensor
    b: Tensor


def linear(x: Tensor, p: LinearParams) -> Tensor:
    return T.matmul(x, p.w) + p.b


@dataclass
class AttentionConfig:
    heads: int
    head_dim: int
    rope_enabled: bool = True
    grid: tuple[int, int] = (1, 1)
    positions: Optional[np.ndarray] = None  # per-token (row, col); overrides grid enumeration

    def __post_init__(self):
        if self.heads < 1 or self.head_dim < 1:
            raise ConfigError("attention needs positive heads and head_dim")
        if self.rope_enabled and self.head_dim % 4 != 0:
            raise ConfigError(f"2D RoPE needs head_dim divisible by 4, got {self.head_dim}")

    @property
    def width(self) -> int:
        return self.heads * self.head_dim


@dataclass
class AttentionParams:
    q: LinearParams
    k: LinearParams
    v: LinearParams
    o: LinearParams


def make_attention_params(store: ParamStore, name: str, width: int) -> AttentionParams:
    return AttentionParams(
        q=store.linear(f"{name}.q", width, width),
        k=store.linear(f"{name}.k", width, width),
        v=store.linear(f"{name}.v", width, width),
        o=store.linear(f"{name}.o", width, width),
    )


def multi_head_attention(x: Tensor, params: AttentionParams, cfg: AttentionConfig) -> Tensor:
    """Scaled dot-product attention over (B, T, D) with per-head softmax."""
    B, Tlen, D = x.shape
    if D != cfg.width:
        raise ShapeError(f"attention width mismatch: input {D}, config {cfg.width}")
    h, hd = cfg.heads, cfg.head_dim
    q = linear(x, params.q).reshape(B, Tlen, h, hd)
    k = linear(x, params.k).reshape(B, Tlen, h, hd)
    v = linear(x, params.v).reshape(B, Tlen, h, hd)
    if cfg.rope_enabled:
        q = T.rope_2d(q, cfg.grid, positions=cfg.positions)
        k = T.rope_2d(k, cfg.grid, positions=cfg.positions)
    q = q.transpose(0, 2, 1, 3)  # (B, h, T, hd)
    k = k.transpose(0, 2, 1, 3)
    v = v.transpose(0, 2, 1, 3)
    scores = T.scale(T.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / math.sqrt(hd))
    attn = T.softmax_lastdim(scores)
    ctx = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, Tlen, D)
    return linear(ctx, params.o)


@dataclass
class MlpParams:
    fc1: LinearParams
    fc2: LinearParams


def make_mlp_params(store: ParamStore, name: str, width: int, hidden_ratio: float = 4.0) -> MlpParams:
    hidden = int(round(hidden_ratio * width))
    return MlpParams(
        fc1=store.linear(f"{name}.fc1", width, hidden),
        fc2=store.linear(f"{name}.fc2", hidden, width),
    )


def mlp(x: Tensor, params: MlpParams) -> Tensor:
    """linear -> GELU (tanh approximation) -> linear."""
    return linear(T.gelu_tanh(linear(x, params.fc1)), params.fc2)


@dataclass
class ModulationParams:
    """Six AdaLN groups; each broadcastable onto the normalized activations."""

    beta1: Tensor
    gamma1: Tensor
    alpha1: Tensor
    beta2: Tensor
    gamma2: Tensor
    alpha2: Tensor


MOD_GROUP_ORDER = ("beta1", "gamma1", "alpha1", "beta2", "gamma2", "alpha2")


def split_modulation(theta: Tensor, width: int) -> ModulationParams:
    """Partition the last axis of theta into the six fixed-order groups."""
    if theta.shape[-1] != 6 * width:
        raise ConfigError(
            f"modulation head output width {theta.shape[-1]} != 6*{width}"
        )
    groups = {
        name: T.slice_lastdim(theta, i * width, (i + 1) * width)
        for i, name in enumerate(MOD_GROUP_ORDER)
    }
    return ModulationParams(**groups)


def adaln_modulate(x_norm: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """gamma * x_norm + beta, with gamma/beta broadcast onto x_norm."""
    return x_norm * gamma + beta


@dataclass
class DitBlockParams:
    attn: AttentionParams
    mlp: MlpParams
    ada: LinearParams  # conditioning -> six per-feature groups


def init_modulation_head(head: LinearParams, width: int):
    """Scale-one start: weights and gates/shifts zero, gamma groups one.

    Gates alone make a fresh block the identity; starting the gammas at one
    keeps the branch outputs (and hence the gate gradients) nonzero, without
    which a bare gamma*x+beta modulation never trains: alpha=0 zeroes every
    branch gradient while gamma=beta=0 zeroes the branch output that alpha's
    own gradient needs.
    """
    head.w.data[...] = 0.0
    bias = head.b.data.reshape(-1, 6, width)
    bias[...] = 0.0
    bias[:, MOD_GROUP_ORDER.index("gamma1"), :] = 1.0
    bias[:, MOD_GROUP_ORDER.index("gamma2"), :] = 1.0


def make_dit_block_params(store: ParamStore, name: str, width: int) -> DitBlockParams:
    params = DitBlockParams(
        attn=make_attention_params(store, f"{name}.attn", width),
        mlp=make_mlp_params(store, f"{name}.mlp", width),
        ada=store.linear(f"{name}.ada", width, 6 * width, init="zeros"),
    )
    init_modulation_head(params.ada, width)
    return params


def dit_block(s: Tensor, c: Tensor, params: DitBlockParams, cfg: AttentionConfig) -> Tensor:
    """One patch-pathway block with global AdaLN conditioning.

    s_bar = s + alpha1(c) * Attn(gamma1(c) * RMSNorm(s) + beta1(c); RoPE)
    s'    = s_bar + alpha2(c) * MLP(gamma2(c) * RMSNorm(s_bar) + beta2(c))

    The six groups come from a linear head on SiLU(c), broadcast over the
    token axis. The head starts with zero weights and a scale-one bias
    (see init_modulation_head), so a fresh block is the identity map through
    its zero gates while still passing gradient to them.
    """
    D = s.shape[-1]
    mods = split_modulation(linear(T.silu(c), params.ada), D)
    h = adaln_modulate(T.rms_norm(s), mods.gamma1, mods.beta1)
    s = s + mods.alpha1 * multi_head_attention(h, params.attn, cfg)
    h = adaln_modulate(T.rms_norm(s), mods.gamma2, mods.beta2)
    return s + mods.alpha2 * mlp(h, params.mlp)
