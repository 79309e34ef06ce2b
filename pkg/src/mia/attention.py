"""Transformer-style sublayers with a source-side shortcut.

The residual partner of every sublayer here is the *source* the sublayer
attended over (or, for the position-wise network, its own input), never the
query. Keeping the query out of the residual path means features of one
modality never leak into the other modality's values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    add_broadcast_row,
    concat_cols,
    dropout,
    layer_norm_rows,
    matmul,
    parameter,
    relu,
    scale,
    softmax_rows,
    transpose,
)

LN_EPS = 1e-5


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class HeadParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}wq": self.wq, f"{prefix}wk": self.wk, f"{prefix}wv": self.wv}


@dataclass
class MultiHeadParams:
    heads: list[HeadParams]
    wo: Tensor

    def __post_init__(self):
        if not self.heads:
            raise ValueError("multi-head attention needs at least one head")
        d_h, d_k = self.heads[0].wq.shape
        for h in self.heads:
            for w in (h.wq, h.wk, h.wv):
                if w.shape != (d_h, d_k):
                    raise ShapeError(f"head weight {w.shape} != {(d_h, d_k)}")
        if d_k * len(self.heads) != d_h:
            raise ShapeError(f"d_k={d_k} times k={len(self.heads)} must equal d_h={d_h}")
        if self.wo.shape != (d_h, d_h):
            raise ShapeError(f"output projection {self.wo.shape} != {(d_h, d_h)}")

    @property
    def d_h(self) -> int:
        return self.wo.shape[0]

    @classmethod
    def init(cls, d_h: int, k: int, rng: np.random.Generator) -> "MultiHeadParams":
        if k < 1 or d_h % k:
            raise ValueError(f"d_h={d_h} must be divisible by k={k}")
        d_k = d_h // k
        heads = [
            HeadParams(*(parameter(glorot(rng, d_h, d_k)) for _ in range(3))) for _ in range(k)
        ]
        return cls(heads, parameter(glorot(rng, d_h, d_h)))

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, h in enumerate(self.heads):
            out.update(h.named_parameters(f"{prefix}head{i}."))
        out[f"{prefix}wo"] = self.wo
        return out


@dataclass
class FcnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, d_h: int, d_ff: int, rng: np.random.Generator) -> "FcnParams":
        if d_ff < 1:
            raise ValueError("d_ff must be positive")
        return cls(
            parameter(glorot(rng, d_h, d_ff)),
            parameter(np.zeros(d_ff)),
            parameter(glorot(rng, d_ff, d_h)),
            parameter(np.zeros(d_h)),
        )

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {
            f"{prefix}w1": self.w1,
            f"{prefix}b1": self.b1,
            f"{prefix}w2": self.w2,
            f"{prefix}b2": self.b2,
        }


@dataclass
class SublayerConfig:
    """Post-op settings for one sublayer: dropout, shortcut, layer norm."""

    ln_gain: Tensor
    ln_bias: Tensor
    dropout_p: float = 0.1
    train: bool = False

    def __post_init__(self):
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @classmethod
    def init(cls, d_h: int, dropout_p: float = 0.1) -> "SublayerConfig":
        return cls(parameter(np.ones(d_h)), parameter(np.zeros(d_h)), dropout_p)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}ln_gain": self.ln_gain, f"{prefix}ln_bias": self.ln_bias}


def attend_head(q: Tensor, s: Tensor, h: HeadParams) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention of ``q`` rows over ``s`` rows for one head.

    Returns the head output (m x d_k) and the attention weights (m x n).
    """
    if q.shape[1] != s.shape[1]:
        raise ShapeError(f"query width {q.shape[1]} != source width {s.shape[1]}")
    if s.shape[0] < 1:
        raise ShapeError("attention needs at least one source row")
    d_k = h.wq.shape[1]
    logits = matmul(matmul(q, h.wq), transpose(matmul(s, h.wk)))
    weights = softmax_rows(scale(logits, 1.0 / math.sqrt(d_k)))
    return matmul(weights, matmul(s, h.wv)), weights


def multi_head(q: Tensor, s: Tensor, p: MultiHeadParams) -> tuple[Tensor, list[Tensor]]:
    outs, traces = [], []
    for h in p.heads:
        o, w = attend_head(q, s, h)
        outs.append(o)
        traces.append(w)
    merged = outs[0] if len(outs) == 1 else concat_cols(outs)
    return matmul(merged, p.wo), traces


def fcn(x: Tensor, p: FcnParams) -> Tensor:
    hidden = relu(add_broadcast_row(matmul(x, p.w1), p.b1))
    return add_broadcast_row(matmul(hidden, p.w2), p.b2)


def sublayer_post(
    sub_out: Tensor,
    source: Tensor,
    cfg: SublayerConfig,
    rng: np.random.Generator | None = None,
    train: bool | None = None,
) -> Tensor:
    """``LayerNorm(dropout(sub_out) + source)``.

    ``train`` overrides ``cfg.train`` so shared parameter sets can be run in
    either mode without mutation.
    """
    if sub_out.shape != source.shape:
        raise ShapeError(f"sublayer output {sub_out.shape} != source {source.shape}")
    mode = cfg.train if train is None else train
    dropped = dropout(sub_out, cfg.dropout_p, mode, rng)
    return layer_norm_rows(add(dropped, source), cfg.ln_gain, cfg.ln_bias, LN_EPS)
