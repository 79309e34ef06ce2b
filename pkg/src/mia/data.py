"""Synthetic scenes with planted visual/concept alignment, and their file format.

Each scene places a handful of objects. Every visual row is a noisy copy of
one object's latent vector; every concept row is a noisy copy of the word
embedding for one object name. The planted feature -> object map is stored
for generator validation only and never used as training signal.

File layout (all integers little-endian)::

    magic   4s   b"MIAF"
    version u16
    n       u32  rows per matrix
    d_h     u32  row width
    payload      I then T, row-major float32, 2*n*d_h*4 bytes
    json_len u32
    json         UTF-8 metadata: image_id, concept_tokens, captions,
                 planted_assignment
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import make_rng
from .vocab import Vocabulary

MAGIC = b"MIAF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHII")
_LEN = struct.Struct("<I")

OBJECT_WORDS = (
    "dog", "cat", "bike", "car", "man", "woman",
    "tree", "ball", "horse", "table", "bird", "boat",
)
ATTRIBUTE_WORDS = ("young", "black", "white", "red", "small", "big", "old", "green")
RELATION_WORDS = ("sitting", "holding", "near", "riding", "on", "under")


class FeatureFileError(ValueError):
    """Base class for unreadable feature files."""


class BadMagicError(FeatureFileError):
    pass


class VersionError(FeatureFileError):
    pass


class TruncatedError(FeatureFileError):
    pass


class MetadataError(FeatureFileError):
    pass


@dataclass
class SceneConfig:
    n_features: int = 49
    n_objects: int | tuple[int, int] = (2, 6)
    d_h: int = 16
    visual_noise_sigma: float = 0.1
    concept_noise_sigma: float = 0.1
    objects: Sequence[str] = OBJECT_WORDS
    attributes: Sequence[str] = ATTRIBUTE_WORDS
    relations: Sequence[str] = RELATION_WORDS
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.object_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad n_objects {self.n_objects}")
        if hi > self.n_features:
            raise ValueError("n_objects cannot exceed n_features")
        if self.visual_noise_sigma < 0 or self.concept_noise_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")
        if self.d_h < 1 or self.n_features < 1:
            raise ValueError("d_h and n_features must be positive")

    @property
    def object_range(self) -> tuple[int, int]:
        if isinstance(self.n_objects, int):
            return self.n_objects, self.n_objects
        lo, hi = self.n_objects
        return int(lo), int(hi)


@dataclass
class FeatureBundle:
    image_id: int
    visual: np.ndarray  # n x d_h
    concepts: np.ndarray  # n x d_h
    concept_tokens: list[str]
    captions: list[list[str]]
    planted_assignment: list[int] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.visual.ndim != 2 or self.visual.shape != self.concepts.shape:
            raise ValueError(
                f"visual {self.visual.shape} and concept {self.concepts.shape} matrices must match"
            )
        if len(self.concept_tokens) != self.visual.shape[0]:
            raise ValueError("need one concept token per row")
        if not self.captions:
            raise ValueError("bundle needs at least one caption")

    @property
    def n(self) -> int:
        return self.visual.shape[0]

    @property
    def d_h(self) -> int:
        return self.visual.shape[1]


def word_embedding(word: str, d_h: int, seed: int) -> np.ndarray:
    """Deterministic per-word vector, shared by every scene of one dataset."""
    digest = hashlib.sha256(f"{seed}:{word}".encode()).digest()
    return make_rng(int.from_bytes(digest[:8], "little")).normal(size=d_h)


def generate_scene(cfg: SceneConfig, rng: np.random.Generator, image_id: int = 0) -> FeatureBundle:
    lo, hi = cfg.object_range
    k = int(rng.integers(lo, hi + 1))
    if k > len(cfg.objects):
        raise ValueError(f"vocabulary has {len(cfg.objects)} object words, scene needs {k}")
    n, d = cfg.n_features, cfg.d_h

    names = [cfg.objects[i] for i in rng.choice(len(cfg.objects), size=k, replace=False)]
    attrs = [cfg.attributes[i] for i in rng.integers(0, len(cfg.attributes), size=k)]
    relation = cfg.relations[int(rng.integers(0, len(cfg.relations)))]
    latents = rng.normal(size=(k, d))

    # every object owns at least one region
    assignment = np.concatenate([np.arange(k), rng.integers(0, k, size=n - k)])
    assignment = assignment[rng.permutation(n)]
    visual = latents[assignment] + cfg.visual_noise_sigma * rng.normal(size=(n, d))

    counts = np.bincount(assignment, minlength=k)
    order = sorted(range(k), key=lambda j: (-counts[j], j))
    top = [names[j] for j in order]
    tokens = [top[i % k] for i in range(n)]
    emb = {w: word_embedding(w, d, cfg.seed) for w in top}
    concepts = np.stack([emb[w] for w in tokens]) + cfg.concept_noise_sigma * rng.normal(size=(n, d))

    first, second = order[0], order[1] if k > 1 else order[0]
    caption = ["a", attrs[first], names[first], relation, "a", names[second]]
    return FeatureBundle(
        image_id=image_id,
        visual=visual,
        concepts=concepts,
        concept_tokens=tokens,
        captions=[caption],
        planted_assignment=[int(a) for a in assignment],
        meta={"objects": names},
    )


def scene_seed(base: int, image_id: int) -> int:
    return (int(base) ^ int(image_id)) & 0xFFFFFFFFFFFFFFFF


def generate_dataset(cfg: SceneConfig, count: int) -> list[FeatureBundle]:
    return [generate_scene(cfg, make_rng(scene_seed(cfg.seed, i)), i) for i in range(count)]


def build_vocab(bundles: Iterable[FeatureBundle]) -> Vocabulary:
    words: set[str] = set()
    for b in bundles:
        words.update(b.concept_tokens)
        for cap in b.captions:
            words.update(cap)
    return Vocabulary.from_words(words)


# ---------------------------------------------------------------------------
# Binary container
# ---------------------------------------------------------------------------


def encode_bundle(bundle: FeatureBundle) -> bytes:
    meta = {
        "image_id": int(bundle.image_id),
        "concept_tokens": list(bundle.concept_tokens),
        "captions": [list(c) for c in bundle.captions],
        "planted_assignment": bundle.planted_assignment,
    }
    if bundle.meta:
        meta["extra"] = bundle.meta
    blob = json.dumps(meta, ensure_ascii=False, sort_keys=True).encode("utf-8")
    payload = (
        np.ascontiguousarray(bundle.visual, dtype="<f4").tobytes()
        + np.ascontiguousarray(bundle.concepts, dtype="<f4").tobytes()
    )
    return _HEADER.pack(MAGIC, FORMAT_VERSION, bundle.n, bundle.d_h) + payload + _LEN.pack(len(blob)) + blob


def decode_bundle(data: bytes) -> FeatureBundle:
    if len(data) < _HEADER.size:
        raise TruncatedError(f"file too short for header ({len(data)} bytes)")
    magic, version, n, d_h = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    if n == 0 or d_h == 0:
        raise MetadataError(f"empty matrix dimensions n={n}, d_h={d_h}")
    payload = 2 * n * d_h * 4
    start = _HEADER.size
    if len(data) < start + payload + _LEN.size:
        raise TruncatedError(f"payload needs {payload} bytes after header, file has {len(data) - start}")
    mats = np.frombuffer(data, dtype="<f4", count=2 * n * d_h, offset=start).astype(np.float64)
    (json_len,) = _LEN.unpack_from(data, start + payload)
    json_start = start + payload + _LEN.size
    if len(data) < json_start + json_len:
        raise TruncatedError("metadata block truncated")
    if len(data) > json_start + json_len:
        raise MetadataError(f"{len(data) - json_start - json_len} unexpected trailing bytes")
    try:
        meta = json.loads(data[json_start : json_start + json_len].decode("utf-8"))
        tokens = [str(t) for t in meta["concept_tokens"]]
        captions = [[str(w) for w in c] for c in meta["captions"]]
        assignment = meta.get("planted_assignment")
        image_id = int(meta["image_id"])
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise MetadataError(f"unreadable metadata: {exc}") from exc
    if len(tokens) != n:
        raise MetadataError(f"{len(tokens)} concept tokens for {n} rows")
    if assignment is not None and len(assignment) != n:
        raise MetadataError("planted assignment length differs from n")
    if not captions:
        raise MetadataError("no captions")
    mats = mats.reshape(2, n, d_h)
    return FeatureBundle(
        image_id=image_id,
        visual=mats[0].copy(),
        concepts=mats[1].copy(),
        concept_tokens=tokens,
        captions=captions,
        planted_assignment=None if assignment is None else [int(a) for a in assignment],
        meta=meta.get("extra", {}),
    )


def write_bundle(path: str | Path, bundle: FeatureBundle) -> None:
    Path(path).write_bytes(encode_bundle(bundle))


def read_bundle(path: str | Path) -> FeatureBundle:
    return decode_bundle(Path(path).read_bytes())


def bundle_filename(image_id: int) -> str:
    return f"scene_{image_id:06d}.miaf"


def write_dataset(out_dir: str | Path, bundles: Sequence[FeatureBundle]) -> Vocabulary:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for b in bundles:
        write_bundle(out / bundle_filename(b.image_id), b)
    vocab = build_vocab(bundles)
    vocab.save(out / "vocab.json")
    return vocab


def load_dataset(data_dir: str | Path) -> tuple[list[FeatureBundle], Vocabulary]:
    root = Path(data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} not found")
    bundles = [read_bundle(p) for p in sorted(root.glob("*.miaf"))]
    vocab_path = root / "vocab.json"
    vocab = Vocabulary.load(vocab_path) if vocab_path.exists() else build_vocab(bundles)
    return bundles, vocab
