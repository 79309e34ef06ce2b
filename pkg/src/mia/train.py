"""Teacher-forced training and evaluation of captioners, optionally behind MIA.

MIA parameters, when present, are trained jointly with the decoder by the
captioning loss alone; no alignment supervision is used.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .data import FeatureBundle
from .decoders import (
    CaptionDecoder,
    DecoderInputs,
    FeatureSource,
    Variant,
    greedy_decode,
    integrate_mia,
)
from .metrics import bleu
from .mia import MiaConfig, MiaOutput, MiaParams, mia_refine
from .tensor import (
    AdamState,
    NonFiniteError,
    Tape,
    Tensor,
    adam_step,
    check_finite,
    cross_entropy,
    make_rng,
)
from .vocab import Vocabulary

log = logging.getLogger(__name__)


class VocabMismatchError(ValueError):
    """Dataset tokens do not match the checkpoint's vocabulary."""


class EmptyDatasetError(ValueError):
    pass


@dataclass
class TrainConfig:
    variant: Variant = Variant.VISUAL_ATTENTION
    feature_source: FeatureSource = FeatureSource.ORIGINAL
    mia: MiaConfig = field(default_factory=lambda: MiaConfig(d_h=16, k=8, n_iter=2))
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 1
    seed: int = 0
    shuffle: bool = True
    max_decode_len: int = 20

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.feature_source = FeatureSource(self.feature_source)
        if isinstance(self.mia, dict):
            self.mia = MiaConfig.from_dict(self.mia)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def d_h(self) -> int:
        return self.mia.d_h

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "feature_source": self.feature_source.value,
            "mia": self.mia.to_dict(),
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "shuffle": self.shuffle,
            "max_decode_len": self.max_decode_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class CaptionModel:
    """A decoder plus, for MIA feature sources, the shared MIA parameters."""

    def __init__(self, cfg: TrainConfig, vocab: Vocabulary, rng: np.random.Generator):
        self.cfg = cfg
        self.vocab = vocab
        self.decoder = CaptionDecoder(cfg.variant, len(vocab), cfg.d_h, rng)
        self.mia = MiaParams.init(cfg.mia, rng) if cfg.feature_source.uses_mia else None

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.decoder.named_parameters()
        if self.mia is not None:
            out.update(self.mia.named_parameters())
        return out

    def mia_parameter_names(self) -> list[str]:
        return list(self.mia.named_parameters()) if self.mia is not None else []

    def load_state(self, params: dict[str, np.ndarray]) -> None:
        own = self.named_parameters()
        if set(own) != set(params):
            missing = sorted(set(own) - set(params))
            extra = sorted(set(params) - set(own))
            raise ValueError(f"parameter mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, t in own.items():
            if t.shape != params[name].shape:
                raise ValueError(f"shape mismatch for {name}: {t.shape} vs {params[name].shape}")
            t.data = np.array(params[name], dtype=np.float64)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def encode(
        self, bundle: FeatureBundle, train: bool = False, rng: np.random.Generator | None = None
    ) -> tuple[DecoderInputs, MiaOutput | None]:
        if bundle.d_h != self.cfg.d_h:
            raise ValueError(f"bundle width {bundle.d_h} != model width {self.cfg.d_h}")
        visual, concepts = Tensor(bundle.visual), Tensor(bundle.concepts)
        mia_out = None
        if self.mia is not None:
            mia_out = mia_refine(visual, concepts, self.mia, self.cfg.mia, rng, train)
        v, c = integrate_mia(self.cfg.feature_source, visual, concepts, mia_out)
        return self.decoder.prepare(v, c), mia_out

    def caption_loss(
        self, bundle: FeatureBundle, caption: Sequence[str], train: bool = False, rng=None
    ) -> tuple[Tensor, Tensor, list[int]]:
        inputs, _ = self.encode(bundle, train, rng)
        logits, targets = self.decoder.sequence_logits(inputs, self.vocab.encode(caption))
        return cross_entropy(logits, targets), logits, targets

    def decode(self, bundle: FeatureBundle, max_len: int | None = None) -> list[str]:
        inputs, _ = self.encode(bundle)
        ids = greedy_decode(self.decoder, inputs, max_len or self.cfg.max_decode_len)
        return self.vocab.decode(ids)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "CaptionModel":
        cfg = TrainConfig.from_dict(ckpt.config)
        model = cls(cfg, Vocabulary(list(ckpt.vocab)), make_rng(cfg.seed))
        model.load_state(ckpt.params)
        return model


def _rng_pair(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_rng, train_rng = make_rng(seed).spawn(2)
    return init_rng, train_rng


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.Generator(np.random.Philox(0))
    rng.bit_generator.state = state
    return rng


def check_vocab(vocab: Vocabulary, dataset: Sequence[FeatureBundle]) -> None:
    for b in dataset:
        for cap in b.captions:
            unknown = [w for w in cap if w not in vocab]
            if unknown:
                raise VocabMismatchError(f"image {b.image_id}: tokens {unknown[:5]} not in vocabulary")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[float]
    mia_grad_live: list[bool] = field(default_factory=list)

    @property
    def model(self) -> CaptionModel:
        return CaptionModel.from_checkpoint(self.checkpoint)


def _diagnose_non_finite(model: CaptionModel, what: str) -> NonFiniteError:
    try:
        check_finite(model.named_parameters())
    except NonFiniteError as exc:
        return NonFiniteError(f"{what}: {exc}")
    return NonFiniteError(f"{what}: loss is non-finite while all parameters are finite")


def train(
    cfg: TrainConfig,
    dataset: Sequence[FeatureBundle],
    vocab: Vocabulary,
    resume: Checkpoint | None = None,
    on_epoch: Callable[[int, float, CaptionModel], bool | None] | None = None,
) -> TrainResult:
    """Teacher-forced cross-entropy training with Adam.

    Each example is one (bundle, caption) pair; the per-example loss is the
    summed token cross-entropy over ``BOS + caption -> caption + EOS``. The
    logged value per epoch is the mean loss per target token. ``on_epoch``
    may return True to stop early.
    """
    if not dataset:
        raise EmptyDatasetError("training needs at least one scene")
    widths = {b.d_h for b in dataset}
    if widths != {cfg.d_h}:
        raise ValueError(f"dataset widths {sorted(widths)} do not match d_h={cfg.d_h}")
    check_vocab(vocab, dataset)

    init_rng, rng = _rng_pair(cfg.seed)
    model = CaptionModel(cfg, vocab, init_rng)
    adam = AdamState()
    losses: list[float] = []
    start = 0
    if resume is not None:
        if resume.vocab != vocab.tokens:
            raise VocabMismatchError("checkpoint vocabulary differs from dataset vocabulary")
        model.load_state(resume.params)
        adam = AdamState(resume.adam.step, dict(resume.adam.m), dict(resume.adam.v))
        rng = _restore_rng(resume.rng_state)
        losses = list(resume.loss_log)
        start = resume.epoch

    params = model.named_parameters()
    mia_names = model.mia_parameter_names()
    examples = [(bi, ci) for bi, b in enumerate(dataset) for ci in range(len(b.captions))]
    mia_live: list[bool] = []
    epoch = start
    for epoch in range(start, cfg.epochs):
        order = rng.permutation(len(examples)) if cfg.shuffle else np.arange(len(examples))
        total, tokens = 0.0, 0
        for batch_start in range(0, len(order), cfg.batch_size):
            for t in params.values():
                t.zero_grad()
            for idx in order[batch_start : batch_start + cfg.batch_size]:
                bi, ci = examples[idx]
                with Tape() as tape:
                    try:
                        loss, _, targets = model.caption_loss(dataset[bi], dataset[bi].captions[ci], True, rng)
                    except NonFiniteError as exc:
                        raise _diagnose_non_finite(model, f"epoch {epoch + 1}") from exc
                if not np.isfinite(loss.data):
                    raise _diagnose_non_finite(model, f"epoch {epoch + 1}")
                tape.backward(loss)
                total += float(loss.data)
                tokens += len(targets)
            grads = {k: t.grad for k, t in params.items()}
            if epoch == start and mia_names:
                mia_live.append(any(grads[k] is not None and np.any(grads[k] != 0) for k in mia_names))
            adam_step(params, grads, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        for t in params.values():
            t.zero_grad()
        mean = total / tokens
        losses.append(mean)
        log.info("epoch %d loss %.6f", epoch + 1, mean)
        if on_epoch is not None and on_epoch(epoch + 1, mean, model):
            epoch += 1
            break
    else:
        epoch = max(start, cfg.epochs)

    ckpt = Checkpoint(
        config=cfg.to_dict(),
        vocab=list(vocab.tokens),
        params=model.state(),
        adam=AdamState(adam.step, {k: v.copy() for k, v in adam.m.items()}, {k: v.copy() for k, v in adam.v.items()}),
        rng_state=rng.bit_generator.state,
        epoch=epoch,
        loss_log=losses,
    )
    return TrainResult(ckpt, losses, mia_live)


def token_accuracy(model: CaptionModel, dataset: Sequence[FeatureBundle]) -> float:
    """Teacher-forced argmax accuracy over all target tokens (eval mode)."""
    hit = total = 0
    for b in dataset:
        inputs, _ = model.encode(b)
        for cap in b.captions:
            logits, targets = model.decoder.sequence_logits(inputs, model.vocab.encode(cap))
            pred = logits.data.argmax(axis=1)
            hit += int(np.sum(pred == np.asarray(targets)))
            total += len(targets)
    return hit / total if total else 0.0


def eval_run(
    model: CaptionModel | Checkpoint,
    dataset: Sequence[FeatureBundle],
    vocab: Vocabulary | None = None,
) -> dict:
    """Greedy-decode every scene and score it against its captions."""
    if isinstance(model, Checkpoint):
        model = CaptionModel.from_checkpoint(model)
    if not dataset:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    if vocab is not None and vocab.tokens != model.vocab.tokens:
        raise VocabMismatchError("dataset vocabulary differs from the checkpoint vocabulary")
    check_vocab(model.vocab, dataset)
    scores = np.zeros(4)
    exact = 0
    for b in dataset:
        hyp = model.decode(b)
        scores += [bleu(b.captions, hyp, n) for n in range(1, 5)]
        exact += any(hyp == list(c) for c in b.captions)
    scores /= len(dataset)
    return {
        "bleu1": float(scores[0]),
        "bleu2": float(scores[1]),
        "bleu3": float(scores[2]),
        "bleu4": float(scores[3]),
        "token_accuracy": token_accuracy(model, dataset),
        "exact_match": exact / len(dataset),
        "scenes": len(dataset),
    }
