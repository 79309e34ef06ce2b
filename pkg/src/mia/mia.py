"""Mutual Iterative Attention over paired visual / concept matrices.

One *round* refines the visual rows using the concept rows as queries, then
refines the concept rows using the freshly refined visual rows as queries.
Rounds repeat ``n_iter`` times with a single shared parameter set. After each
round every branch is re-anchored to that round's input, and the final pair is
fused into one matrix by ``LayerNorm(I_N + T_N)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .attention import (
    LN_EPS,
    FcnParams,
    MultiHeadParams,
    SublayerConfig,
    fcn,
    multi_head,
    sublayer_post,
)
from .tensor import ShapeError, Tensor, add, dropout, layer_norm_rows, parameter


class AlignmentError(ShapeError):
    """Visual and concept matrices do not line up row for row."""


class GuidingOrder(str, Enum):
    CONCEPTS_FIRST = "concepts_first"
    VISUAL_FIRST = "visual_first"


class AttentionMode(str, Enum):
    MUTUAL = "mutual"
    SELF_ABLATION = "self_ablation"


@dataclass
class MiaConfig:
    d_h: int = 512
    k: int = 8
    n_iter: int = 2
    d_ff: int | None = None
    dropout_p: float = 0.1
    guiding_order: GuidingOrder = GuidingOrder.CONCEPTS_FIRST
    attention_mode: AttentionMode = AttentionMode.MUTUAL
    anchor: bool = True
    per_head_trace: bool = False

    def __post_init__(self):
        self.guiding_order = GuidingOrder(self.guiding_order)
        self.attention_mode = AttentionMode(self.attention_mode)
        if self.k < 1 or self.d_h % self.k:
            raise ValueError(f"d_h={self.d_h} must be divisible by k={self.k}")
        if self.n_iter < 1:
            raise ValueError("n_iter must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.d_ff is None:
            self.d_ff = 4 * self.d_h

    def to_dict(self) -> dict:
        return {
            "d_h": self.d_h,
            "k": self.k,
            "n_iter": self.n_iter,
            "d_ff": self.d_ff,
            "dropout_p": self.dropout_p,
            "guiding_order": self.guiding_order.value,
            "attention_mode": self.attention_mode.value,
            "anchor": self.anchor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MiaConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class BranchParams:
    attn: MultiHeadParams
    attn_post: SublayerConfig
    ffn: FcnParams
    ffn_post: SublayerConfig
    anchor_gain: Tensor
    anchor_bias: Tensor

    @classmethod
    def init(cls, cfg: MiaConfig, rng: np.random.Generator) -> "BranchParams":
        return cls(
            MultiHeadParams.init(cfg.d_h, cfg.k, rng),
            SublayerConfig.init(cfg.d_h, cfg.dropout_p),
            FcnParams.init(cfg.d_h, cfg.d_ff, rng),
            SublayerConfig.init(cfg.d_h, cfg.dropout_p),
            parameter(np.ones(cfg.d_h)),
            parameter(np.zeros(cfg.d_h)),
        )

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = self.attn.named_parameters(f"{prefix}attn.")
        out.update(self.attn_post.named_parameters(f"{prefix}attn_post."))
        out.update(self.ffn.named_parameters(f"{prefix}ffn."))
        out.update(self.ffn_post.named_parameters(f"{prefix}ffn_post."))
        out[f"{prefix}anchor.ln_gain"] = self.anchor_gain
        out[f"{prefix}anchor.ln_bias"] = self.anchor_bias
        return out


@dataclass
class MiaParams:
    """The single parameter set shared by every iteration."""

    visual: BranchParams
    textual: BranchParams
    fuse_gain: Tensor
    fuse_bias: Tensor

    @classmethod
    def init(cls, cfg: MiaConfig, rng: np.random.Generator) -> "MiaParams":
        return cls(
            BranchParams.init(cfg, rng),
            BranchParams.init(cfg, rng),
            parameter(np.ones(cfg.d_h)),
            parameter(np.zeros(cfg.d_h)),
        )

    def named_parameters(self, prefix: str = "mia.") -> dict[str, Tensor]:
        out = self.visual.named_parameters(f"{prefix}visual.")
        out.update(self.textual.named_parameters(f"{prefix}textual."))
        out[f"{prefix}fuse.ln_gain"] = self.fuse_gain
        out[f"{prefix}fuse.ln_bias"] = self.fuse_bias
        return out

    def num_parameters(self) -> int:
        return sum(t.size for t in self.named_parameters().values())


@dataclass
class AttentionTrace:
    """Head-averaged attention maps, one entry per iteration.

    ``visual[t]`` holds the weights the visual branch used at iteration t+1
    (rows: refined visual rows, columns: visual rows of the previous
    iteration); ``textual[t]`` likewise for the concept branch.
    """

    visual: list[np.ndarray] = field(default_factory=list)
    textual: list[np.ndarray] = field(default_factory=list)
    visual_heads: list[list[np.ndarray]] = field(default_factory=list)
    textual_heads: list[list[np.ndarray]] = field(default_factory=list)

    def extend(self, other: "AttentionTrace") -> None:
        self.visual.extend(other.visual)
        self.textual.extend(other.textual)
        self.visual_heads.extend(other.visual_heads)
        self.textual_heads.extend(other.textual_heads)

    def __len__(self) -> int:
        return len(self.visual)


@dataclass
class MiaOutput:
    visual: Tensor
    textual: Tensor
    fused: Tensor
    trace: AttentionTrace


def _branch(q: Tensor, s: Tensor, p: BranchParams, train: bool, rng):
    attended, head_weights = multi_head(q, s, p.attn)
    x = sublayer_post(attended, s, p.attn_post, rng, train)
    out = sublayer_post(fcn(x, p.ffn), x, p.ffn_post, rng, train)
    return out, head_weights


def _head_mean(weights: list[Tensor]) -> np.ndarray:
    return np.mean([w.data for w in weights], axis=0)


def mutual_round(
    i_prev: Tensor,
    t_prev: Tensor,
    params: MiaParams,
    cfg: MiaConfig,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> tuple[Tensor, Tensor, AttentionTrace]:
    """One round of mutual attention (no layer anchor)."""
    if i_prev.shape[0] != t_prev.shape[0]:
        raise AlignmentError(
            f"visual rows ({i_prev.shape[0]}) and concept rows ({t_prev.shape[0]}) differ"
        )
    if i_prev.shape[1] != cfg.d_h or t_prev.shape[1] != cfg.d_h:
        raise ShapeError(f"feature width must be d_h={cfg.d_h}, got {i_prev.shape}, {t_prev.shape}")

    if cfg.attention_mode is AttentionMode.SELF_ABLATION:
        i_new, wi = _branch(i_prev, i_prev, params.visual, train, rng)
        t_new, wt = _branch(t_prev, t_prev, params.textual, train, rng)
    elif cfg.guiding_order is GuidingOrder.CONCEPTS_FIRST:
        i_new, wi = _branch(t_prev, i_prev, params.visual, train, rng)
        t_new, wt = _branch(i_new, t_prev, params.textual, train, rng)
    else:
        t_new, wt = _branch(i_prev, t_prev, params.textual, train, rng)
        i_new, wi = _branch(t_new, i_prev, params.visual, train, rng)

    trace = AttentionTrace([_head_mean(wi)], [_head_mean(wt)])
    if cfg.per_head_trace:
        trace.visual_heads.append([w.data for w in wi])
        trace.textual_heads.append([w.data for w in wt])
    return i_new, t_new, trace


def _anchor(block: Tensor, layer_input: Tensor, p: BranchParams, cfg: MiaConfig, train, rng):
    dropped = dropout(block, cfg.dropout_p, train, rng)
    return layer_norm_rows(add(dropped, layer_input), p.anchor_gain, p.anchor_bias, LN_EPS)


def mia_refine(
    i0: Tensor,
    t0: Tensor,
    params: MiaParams,
    cfg: MiaConfig,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> MiaOutput:
    """Run ``cfg.n_iter`` shared-parameter rounds and fuse the result."""
    i_cur, t_cur = i0, t0
    trace = AttentionTrace()
    for _ in range(cfg.n_iter):
        i_blk, t_blk, round_trace = mutual_round(i_cur, t_cur, params, cfg, rng, train)
        trace.extend(round_trace)
        if cfg.anchor:
            i_blk = _anchor(i_blk, i_cur, params.visual, cfg, train, rng)
            t_blk = _anchor(t_blk, t_cur, params.textual, cfg, train, rng)
        i_cur, t_cur = i_blk, t_blk
    fused = layer_norm_rows(add(i_cur, t_cur), params.fuse_gain, params.fuse_bias, LN_EPS)
    return MiaOutput(i_cur, t_cur, fused, trace)


def accumulate_trace(maps: list[np.ndarray]) -> list[np.ndarray]:
    """Compose per-iteration maps back onto the original feature indices.

    ``out[t] = maps[t] @ out[t-1]`` with the identity before the first
    iteration. Products of row-stochastic matrices stay row-stochastic.
    """
    out: list[np.ndarray] = []
    acc: np.ndarray | None = None
    for a in maps:
        acc = np.array(a, dtype=np.float64) if acc is None else np.asarray(a) @ acc
        out.append(acc)
    return out
