from __future__ import annotations

from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .data import FeatureBundle
from .mia import AttentionTrace, accumulate_trace, mia_refine
from .tensor import Tensor

BRANCHES = ("visual", "textual")


class NoMiaError(ValueError):
    """The checkpoint was trained without MIA, so there is nothing to trace."""


def write_csv(path: Path, matrix: np.ndarray) -> None:
    lines = [",".join(f"{v:.9g}" for v in row) for row in np.atleast_2d(matrix)]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def read_csv(path: Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def heatmap_bytes(matrix: np.ndarray) -> np.ndarray:
    """Row-normalize to the row maximum; 0 is no weight (white), 255 full (black)."""
    m = np.clip(np.atleast_2d(np.asarray(matrix, dtype=np.float64)), 0.0, None)
    peak = m.max(axis=1, keepdims=True)
    scaled = np.divide(m, peak, out=np.zeros_like(m), where=peak > 0)
    return np.rint(scaled * 255).astype(np.uint8)


def write_pgm(path: Path, matrix: np.ndarray) -> None:
    pix = heatmap_bytes(matrix)
    h, w = pix.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def write_trace(trace: AttentionTrace, out_dir: str | Path) -> list[Path]:
    """Write raw and accumulated maps per iteration and branch as CSV and PGM."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for branch in BRANCHES:
        raw = getattr(trace, branch)
        for kind, maps in (("raw", raw), ("accum", accumulate_trace(raw))):
            for t, m in enumerate(maps, start=1):
                stem = out / f"iter{t}_{branch}_{kind}"
                write_csv(stem.with_suffix(".csv"), m)
                write_pgm(stem.with_suffix(".pgm"), m)
                written += [stem.with_suffix(".csv"), stem.with_suffix(".pgm")]
    return sorted(written)


def export_trace(checkpoint: Checkpoint, bundle: FeatureBundle, out_dir: str | Path) -> list[Path]:
    from .train import CaptionModel

    model = CaptionModel.from_checkpoint(checkpoint)
    if model.mia is None:
        raise NoMiaError("checkpoint has no MIA parameters")
    result = mia_refine(
        Tensor(bundle.visual), Tensor(bundle.concepts), model.mia, model.cfg.mia, None, train=False
    )
    return write_trace(result.trace, out_dir)
