"""LSTM captioning decoders that consume visual features and/or concepts.

Five variants differ in which image representation drives each step:

* visual attention: every step feeds ``w_t + I_a`` and attends over ``I``
* concept attention: step 1 feeds ``I_a``; later steps feed ``w_t + T_a``
  and attend over ``T``
* visual condition: step 1 feeds ``T_a``; later steps feed ``w_t + I_a``
* concept condition: step 1 feeds ``I_a``; later steps feed ``w_t + T_a``
* visual regional attention: two stacked LSTMs, attention between them

Step 1 of the condition / concept-attention variants consumes no word, so the
BOS token handed to that step is ignored; its output still predicts the first
caption word.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .attention import glorot
from .mia import MiaOutput
from .tensor import (
    ShapeError,
    Tensor,
    add,
    add_broadcast_row,
    concat_cols,
    concat_rows,
    elementwise_mul,
    embedding_lookup,
    matmul,
    mean_rows,
    parameter,
    sigmoid,
    slice_cols,
    softmax_rows,
    tanh,
    transpose,
)
from .vocab import BOS_ID, EOS_ID


class Variant(str, Enum):
    VISUAL_ATTENTION = "visual_attention"
    CONCEPT_ATTENTION = "concept_attention"
    VISUAL_CONDITION = "visual_condition"
    CONCEPT_CONDITION = "concept_condition"
    VISUAL_REGIONAL = "visual_regional_attention"


class FeatureSource(str, Enum):
    ORIGINAL = "original"
    MIA_FUSED = "mia_fused"
    MIA_VISUAL = "mia_visual"  # I_N replaces I only
    MIA_TEXTUAL = "mia_textual"  # T_N replaces T only

    @property
    def uses_mia(self) -> bool:
        return self is not FeatureSource.ORIGINAL


class VariantError(RuntimeError):
    """A step function was called on a decoder of another variant."""


# ---------------------------------------------------------------------------
# LSTM and additive attention
# ---------------------------------------------------------------------------


@dataclass
class LstmParams:
    w_x: Tensor  # d_in x 4d, gate order i, f, g, o
    w_h: Tensor  # d x 4d
    b: Tensor  # 4d

    @property
    def hidden(self) -> int:
        return self.w_h.shape[0]

    @classmethod
    def init(cls, d_in: int, d: int, rng: np.random.Generator, forget_bias: float = 1.0):
        b = np.zeros(4 * d)
        b[d : 2 * d] = forget_bias
        return cls(parameter(glorot(rng, d_in, 4 * d)), parameter(glorot(rng, d, 4 * d)), parameter(b))

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}w_x": self.w_x, f"{prefix}w_h": self.w_h, f"{prefix}b": self.b}


@dataclass
class LstmState:
    h: Tensor  # 1 x d
    c: Tensor  # 1 x d

    @classmethod
    def zeros(cls, d: int) -> "LstmState":
        return cls(Tensor(np.zeros((1, d))), Tensor(np.zeros((1, d))))


def lstm_step(p: LstmParams, x: Tensor, state: LstmState) -> LstmState:
    d = p.hidden
    if x.shape != (1, p.w_x.shape[0]):
        raise ShapeError(f"LSTM input {x.shape} != (1, {p.w_x.shape[0]})")
    z = add_broadcast_row(add(matmul(x, p.w_x), matmul(state.h, p.w_h)), p.b)
    i = sigmoid(slice_cols(z, 0, d))
    f = sigmoid(slice_cols(z, d, 2 * d))
    g = tanh(slice_cols(z, 2 * d, 3 * d))
    o = sigmoid(slice_cols(z, 3 * d, 4 * d))
    c = add(elementwise_mul(f, state.c), elementwise_mul(i, g))
    return LstmState(elementwise_mul(o, tanh(c)), c)


@dataclass
class AttentionParams:
    w_feat: Tensor  # d_h x d_att, applied to each feature row
    w_hid: Tensor  # d_h x d_att, applied to the query state
    w_alpha: Tensor  # d_att x 1

    @classmethod
    def init(cls, d_h: int, d_att: int, rng: np.random.Generator) -> "AttentionParams":
        return cls(
            parameter(glorot(rng, d_h, d_att)),
            parameter(glorot(rng, d_h, d_att)),
            parameter(glorot(rng, d_att, 1)),
        )

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}w_feat": self.w_feat, f"{prefix}w_hid": self.w_hid, f"{prefix}w_alpha": self.w_alpha}


def additive_attend(
    h: Tensor, feats: Tensor, p: AttentionParams, feat_proj: Tensor | None = None
) -> tuple[Tensor, Tensor]:
    """Additive attention of a state over feature rows.

    Computes ``alpha = softmax(w_alpha . tanh(W_F F^T (+) W_h h))`` where (+)
    adds the projected state to every column, and ``c = alpha F``. Returns
    ``(c, alpha)`` with shapes ``(1, d_h)`` and ``(1, L)``. ``feat_proj``
    may carry a precomputed ``F @ w_feat``.
    """
    if h.shape[-1] != p.w_hid.shape[0] or feats.shape[1] != p.w_feat.shape[0]:
        raise ShapeError(f"attention width mismatch: h {h.shape}, features {feats.shape}")
    if feats.shape[0] < 1:
        raise ShapeError("attention needs at least one feature row")
    proj = feat_proj if feat_proj is not None else matmul(feats, p.w_feat)
    energy = tanh(add_broadcast_row(proj, matmul(h, p.w_hid)))
    alpha = softmax_rows(transpose(matmul(energy, p.w_alpha)))
    return matmul(alpha, feats), alpha


# ---------------------------------------------------------------------------
# Decoder model
# ---------------------------------------------------------------------------


@dataclass
class DecoderInputs:
    """Per-image features in the form the decoder steps consume."""

    visual: Tensor
    concepts: Tensor
    visual_mean: Tensor
    concept_mean: Tensor
    attn_proj: Tensor | None = None  # cached source @ w_feat


@dataclass
class DecoderState:
    lstm: LstmState
    lstm2: LstmState | None = None
    t: int = 0
    alpha: Tensor | None = None


class CaptionDecoder:
    """One of the five baseline captioners, all widths ``d_h``."""

    def __init__(self, variant: Variant | str, vocab_size: int, d_h: int, rng: np.random.Generator):
        self.variant = Variant(variant)
        self.vocab_size = vocab_size
        self.d_h = d_h
        self.embed = parameter(rng.normal(0.0, 0.1, size=(vocab_size, d_h)))
        self.lstm2: LstmParams | None = None
        self.attn: AttentionParams | None = None
        if self.variant is Variant.VISUAL_REGIONAL:
            self.lstm = LstmParams.init(2 * d_h, d_h, rng)
            self.lstm2 = LstmParams.init(2 * d_h, d_h, rng)
        else:
            self.lstm = LstmParams.init(d_h, d_h, rng)
        if self.has_attention:
            self.attn = AttentionParams.init(d_h, d_h, rng)
        self.w_p = parameter(glorot(rng, d_h, vocab_size))

    @property
    def has_attention(self) -> bool:
        return self.variant in (
            Variant.VISUAL_ATTENTION,
            Variant.CONCEPT_ATTENTION,
            Variant.VISUAL_REGIONAL,
        )

    def named_parameters(self, prefix: str = "dec.") -> dict[str, Tensor]:
        out = {f"{prefix}embed": self.embed}
        if self.variant is Variant.VISUAL_REGIONAL:
            out.update(self.lstm.named_parameters(f"{prefix}lstm1."))
            out.update(self.lstm2.named_parameters(f"{prefix}lstm2."))
        else:
            out.update(self.lstm.named_parameters(f"{prefix}lstm."))
        if self.attn is not None:
            out.update(self.attn.named_parameters(f"{prefix}att."))
        out[f"{prefix}w_p"] = self.w_p
        return out

    def attention_source(self, inputs: DecoderInputs) -> Tensor | None:
        if self.variant is Variant.CONCEPT_ATTENTION:
            return inputs.concepts
        if self.variant in (Variant.VISUAL_ATTENTION, Variant.VISUAL_REGIONAL):
            return inputs.visual
        return None

    def prepare(self, visual: Tensor, concepts: Tensor) -> DecoderInputs:
        inputs = DecoderInputs(visual, concepts, mean_rows(visual), mean_rows(concepts))
        src = self.attention_source(inputs)
        if src is not None:
            inputs.attn_proj = matmul(src, self.attn.w_feat)
        return inputs

    def init_state(self) -> DecoderState:
        second = LstmState.zeros(self.d_h) if self.variant is Variant.VISUAL_REGIONAL else None
        return DecoderState(LstmState.zeros(self.d_h), second, 0)

    def word(self, token: int) -> Tensor:
        return embedding_lookup(self.embed, [token])

    def step(self, state: DecoderState, prev_token: int, inputs: DecoderInputs):
        return _STEPS[self.variant](self, state, prev_token, inputs)

    def sequence_logits(self, inputs: DecoderInputs, caption_ids: Sequence[int]) -> tuple[Tensor, list[int]]:
        """Teacher-forced logits for ``BOS + caption`` against ``caption + EOS``."""
        state = self.init_state()
        tokens = [BOS_ID, *caption_ids]
        rows = []
        for tok in tokens:
            state, logits = self.step(state, tok, inputs)
            rows.append(logits)
        return concat_rows(rows), [*caption_ids, EOS_ID]


def _check(model: CaptionDecoder, variant: Variant) -> None:
    if model.variant is not variant:
        raise VariantError(f"{variant.value} step called on a {model.variant.value} decoder")


def step_visual_attention(model, state: DecoderState, prev_token: int, inputs: DecoderInputs):
    _check(model, Variant.VISUAL_ATTENTION)
    x = add(model.word(prev_token), inputs.visual_mean)
    lstm = lstm_step(model.lstm, x, state.lstm)
    ctx, alpha = additive_attend(lstm.h, inputs.visual, model.attn, inputs.attn_proj)
    logits = matmul(add(lstm.h, ctx), model.w_p)
    return DecoderState(lstm, None, state.t + 1, alpha), logits


def step_concept_attention(model, state: DecoderState, prev_token: int, inputs: DecoderInputs):
    _check(model, Variant.CONCEPT_ATTENTION)
    if state.t == 0:
        x = inputs.visual_mean
    else:
        x = add(model.word(prev_token), inputs.concept_mean)
    lstm = lstm_step(model.lstm, x, state.lstm)
    ctx, alpha = additive_attend(lstm.h, inputs.concepts, model.attn, inputs.attn_proj)
    logits = matmul(add(lstm.h, ctx), model.w_p)
    return DecoderState(lstm, None, state.t + 1, alpha), logits


def _condition_step(model, state, prev_token, first: Tensor, later: Tensor):
    x = first if state.t == 0 else add(model.word(prev_token), later)
    lstm = lstm_step(model.lstm, x, state.lstm)
    return DecoderState(lstm, None, state.t + 1), matmul(lstm.h, model.w_p)


def step_visual_condition(model, state: DecoderState, prev_token: int, inputs: DecoderInputs):
    _check(model, Variant.VISUAL_CONDITION)
    return _condition_step(model, state, prev_token, inputs.concept_mean, inputs.visual_mean)


def step_concept_condition(model, state: DecoderState, prev_token: int, inputs: DecoderInputs):
    _check(model, Variant.CONCEPT_CONDITION)
    return _condition_step(model, state, prev_token, inputs.visual_mean, inputs.concept_mean)


def step_visual_regional(model, state: DecoderState, prev_token: int, inputs: DecoderInputs):
    _check(model, Variant.VISUAL_REGIONAL)
    x1 = concat_cols([model.word(prev_token), inputs.visual_mean])
    s1 = lstm_step(model.lstm, x1, state.lstm)
    ctx, alpha = additive_attend(s1.h, inputs.visual, model.attn, inputs.attn_proj)
    s2 = lstm_step(model.lstm2, concat_cols([s1.h, ctx]), state.lstm2)
    return DecoderState(s1, s2, state.t + 1, alpha), matmul(s2.h, model.w_p)


_STEPS = {
    Variant.VISUAL_ATTENTION: step_visual_attention,
    Variant.CONCEPT_ATTENTION: step_concept_attention,
    Variant.VISUAL_CONDITION: step_visual_condition,
    Variant.CONCEPT_CONDITION: step_concept_condition,
    Variant.VISUAL_REGIONAL: step_visual_regional,
}


class MissingMiaOutput(ValueError):
    """A MIA feature source was requested without MIA outputs."""


def integrate_mia(
    source: FeatureSource | str,
    visual: Tensor,
    concepts: Tensor,
    mia_out: MiaOutput | None = None,
) -> tuple[Tensor, Tensor]:
    """Pick the (visual, concept) matrices a decoder should see."""
    source = FeatureSource(source)
    if source is FeatureSource.ORIGINAL:
        return visual, concepts
    if mia_out is None:
        raise MissingMiaOutput(f"feature source {source.value!r} needs MIA outputs")
    if source is FeatureSource.MIA_FUSED:
        return mia_out.fused, mia_out.fused
    if source is FeatureSource.MIA_VISUAL:
        return mia_out.visual, concepts
    return visual, mia_out.textual


def greedy_decode(model: CaptionDecoder, inputs: DecoderInputs, max_len: int = 20) -> list[int]:
    """Argmax decoding from BOS until EOS or ``max_len`` tokens."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    state = model.init_state()
    token = BOS_ID
    out: list[int] = []
    for _ in range(max_len):
        state, logits = model.step(state, token, inputs)
        token = int(np.argmax(logits.data))
        if token == EOS_ID:
            break
        out.append(token)
    return out
