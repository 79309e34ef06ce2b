"""Command-line front end.

Every command prints exactly one JSON document on stdout; logs go to stderr.
Exit codes: 0 success, 2 bad arguments or configuration, 3 I/O or file
format failure, 4 training aborted on non-finite values.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .checkpoint import Checkpoint, CheckpointError
from .data import FeatureFileError, SceneConfig, generate_dataset, load_dataset, read_bundle, write_dataset
from .decoders import FeatureSource, Variant
from .gradcheck import run_suite_report
from .mia import MiaConfig
from .tensor import NonFiniteError
from .train import (
    EmptyDatasetError,
    TrainConfig,
    VocabMismatchError,
    eval_run,
    token_accuracy,
    train,
)
from .visualize import NoMiaError, export_trace

log = logging.getLogger("mia")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NONFINITE = 0, 2, 3, 4

VARIANTS = {
    "visual-attn": Variant.VISUAL_ATTENTION,
    "concept-attn": Variant.CONCEPT_ATTENTION,
    "visual-cond": Variant.VISUAL_CONDITION,
    "concept-cond": Variant.CONCEPT_CONDITION,
    "regional-attn": Variant.VISUAL_REGIONAL,
}
FEATURES = {
    "original": FeatureSource.ORIGINAL,
    "mia": FeatureSource.MIA_FUSED,
    "mia-visual": FeatureSource.MIA_VISUAL,
    "mia-textual": FeatureSource.MIA_TEXTUAL,
}

DEFAULTS = {
    "gen-data": {
        "scenes": 8,
        "n_features": 49,
        "d_h": 16,
        "seed": 0,
        "noise_visual": 0.1,
        "noise_concept": 0.1,
        "min_objects": 2,
        "max_objects": 6,
    },
    "train": {
        "variant": "visual-attn",
        "features": "mia",
        "heads": 8,
        "iters": 2,
        "d_ff": None,
        "dropout": 0.1,
        "guiding": "concepts-first",
        "self_attn_ablation": False,
        "no_anchor": False,
        "lr": 1e-3,
        "epochs": 50,
        "batch_size": 1,
        "seed": 0,
        "resume": None,
        "target_accuracy": None,
    },
    "eval": {},
    "attend": {},
    "grad-check": {"seed": 0, "full": False},
}
DEFAULTS["sweep-iters"] = {**DEFAULTS["train"], "iters": "1..5", "parallel": False}


REQUIRED = {"gen-data": ("out",), "train": ("data", "out"), "sweep-iters": ("data", "out")}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route through the JSON error path with exit 2
        raise UsageError(message)


def _add_train_options(p: argparse.ArgumentParser, sweep: bool = False) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--data", type=Path, default=S)
    p.add_argument("--out", type=Path, default=S)
    p.add_argument("--variant", choices=sorted(VARIANTS), default=S)
    p.add_argument("--features", choices=sorted(FEATURES), default=S)
    p.add_argument("--heads", type=int, default=S)
    if sweep:
        p.add_argument("--iters", default=S, help="range like 1..5")
        p.add_argument("--parallel", action="store_true", default=S)
    else:
        p.add_argument("--iters", type=int, default=S)
        p.add_argument("--resume", type=Path, default=S)
    p.add_argument("--d-ff", type=int, default=S)
    p.add_argument("--dropout", type=float, default=S)
    p.add_argument("--guiding", choices=["concepts-first", "visual-first"], default=S)
    p.add_argument("--self-attn-ablation", action="store_true", default=S)
    p.add_argument("--no-anchor", action="store_true", default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--target-accuracy", type=float, default=S,
                   help="stop early once teacher-forced token accuracy reaches this value")
    p.add_argument("--config", type=Path)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = _Parser(prog="mia", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mia {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write synthetic feature files")
    g.add_argument("--out", type=Path, default=S)
    g.add_argument("--scenes", type=int, default=S)
    g.add_argument("--n-features", type=int, default=S)
    g.add_argument("--d-h", type=int, default=S)
    g.add_argument("--seed", type=int, default=S)
    g.add_argument("--noise-visual", type=float, default=S)
    g.add_argument("--noise-concept", type=float, default=S)
    g.add_argument("--min-objects", type=int, default=S)
    g.add_argument("--max-objects", type=int, default=S)
    g.add_argument("--config", type=Path)

    _add_train_options(sub.add_parser("train", help="train a captioner"))
    _add_train_options(sub.add_parser("sweep-iters", help="train once per iteration count"), sweep=True)

    e = sub.add_parser("eval", help="greedy-decode and score a dataset")
    e.add_argument("--ckpt", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path)

    a = sub.add_parser("attend", help="export attention traces")
    a.add_argument("--ckpt", required=True, type=Path)
    a.add_argument("--bundle", required=True, type=Path)
    a.add_argument("--out", required=True, type=Path)

    gc = sub.add_parser("grad-check", help="finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=S)
    gc.add_argument("--full", action="store_true", default=S, help="probe every entry, not a sample")
    return parser


def resolve_config(command: str, ns: argparse.Namespace) -> dict:
    """Merge defaults < config file < explicit flags; MIA_SEED backs up --seed."""
    cfg = dict(DEFAULTS.get(command, {}))
    path = getattr(ns, "config", None)
    file_cfg: dict = {}
    if path is not None:
        try:
            file_cfg = json.loads(Path(path).read_text(encoding="utf-8"))
        except ValueError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        if "config" in file_cfg and isinstance(file_cfg["config"], dict):
            file_cfg = file_cfg["config"]  # a run manifest
    env_seed = os.environ.get("MIA_SEED")
    if "seed" in cfg and env_seed is not None and "seed" not in file_cfg:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError as exc:
            raise UsageError(f"MIA_SEED must be an integer, got {env_seed!r}") from exc
    cfg.update({k: v for k, v in file_cfg.items() if k in cfg or k in ("data", "out")})
    for k, v in vars(ns).items():
        if k in ("command", "verbose", "config"):
            continue
        cfg[k] = str(v) if isinstance(v, Path) else v
    missing = [k for k in REQUIRED.get(command, ()) if cfg.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s) " + ", ".join(f"--{m}" for m in missing))
    return cfg


def _write_manifest(run_dir: Path, command: str, config: dict, started: str) -> None:
    manifest = {
        "command": command,
        "config": config,
        "tool_version": __version__,
        "seed": config.get("seed"),
        "started": started,
        "finished": _now(),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def train_config_from(cfg: dict, d_h: int, n_iter: int | None = None) -> TrainConfig:
    try:
        mia = MiaConfig(
            d_h=d_h,
            k=int(cfg["heads"]),
            n_iter=int(n_iter if n_iter is not None else cfg["iters"]),
            d_ff=cfg["d_ff"],
            dropout_p=float(cfg["dropout"]),
            guiding_order="visual_first" if cfg["guiding"] == "visual-first" else "concepts_first",
            attention_mode="self_ablation" if cfg["self_attn_ablation"] else "mutual",
            anchor=not cfg["no_anchor"],
        )
        return TrainConfig(
            variant=VARIANTS[cfg["variant"]],
            feature_source=FEATURES[cfg["features"]],
            mia=mia,
            lr=float(cfg["lr"]),
            epochs=int(cfg["epochs"]),
            batch_size=int(cfg["batch_size"]),
            seed=int(cfg["seed"]),
        )
    except KeyError as exc:
        raise UsageError(f"unknown choice {exc}") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _dataset(path: str | Path):
    bundles, vocab = load_dataset(path)
    if not bundles:
        raise UsageError(f"no feature files in {path}")
    return bundles, vocab


def _early_stop(target: float | None, dataset, every: int = 10):
    if target is None:
        return None

    def hook(epoch, loss, model):
        if epoch % every:
            return False
        acc = token_accuracy(model, dataset)
        log.info("epoch %d token accuracy %.4f", epoch, acc)
        return acc >= target

    return hook


def _train_run(cfg: dict, run_dir: Path, n_iter: int | None = None) -> dict:
    bundles, vocab = _dataset(cfg["data"])
    tcfg = train_config_from(cfg, bundles[0].d_h, n_iter)
    resume = Checkpoint.load(cfg["resume"]) if cfg.get("resume") else None
    result = train(tcfg, bundles, vocab, resume, _early_stop(cfg.get("target_accuracy"), bundles))
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = run_dir / "checkpoint.miac"
    result.checkpoint.save(ckpt_path)
    with open(run_dir / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(result.losses, start=1):
            w.writerow([i, repr(loss)])
    return {
        "checkpoint": str(ckpt_path),
        "epochs": result.checkpoint.epoch,
        "final_loss": result.losses[-1] if result.losses else None,
        "parameters": result.checkpoint.num_parameters(),
        "mia_parameters": result.checkpoint.num_parameters("mia."),
        "n_iter": tcfg.mia.n_iter,
    }


def cmd_gen_data(cfg: dict) -> dict:
    out = Path(cfg["out"])
    try:
        scene_cfg = SceneConfig(
            n_features=int(cfg["n_features"]),
            n_objects=(int(cfg["min_objects"]), int(cfg["max_objects"])),
            d_h=int(cfg["d_h"]),
            visual_noise_sigma=float(cfg["noise_visual"]),
            concept_noise_sigma=float(cfg["noise_concept"]),
            seed=int(cfg["seed"]),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if int(cfg["scenes"]) < 0:
        raise UsageError("--scenes must be >= 0")
    started = _now()
    bundles = generate_dataset(scene_cfg, int(cfg["scenes"]))
    vocab = write_dataset(out, bundles)
    log.info("wrote %d scenes (vocabulary %d) to %s", len(bundles), len(vocab), out)
    _write_manifest(out, "gen-data", cfg, started)
    return {"out": str(out), "scenes": len(bundles), "vocab_size": len(vocab)}


def cmd_train(cfg: dict) -> dict:
    started = _now()
    run_dir = Path(cfg["out"])
    summary = _train_run(cfg, run_dir)
    _write_manifest(run_dir, "train", cfg, started)
    return summary


def parse_range(text) -> list[int]:
    if isinstance(text, int):
        return [text]
    if isinstance(text, list):
        return [int(x) for x in text]
    s = str(text)
    try:
        if ".." in s:
            lo, hi = (int(x) for x in s.split(".."))
            vals = list(range(lo, hi + 1))
        else:
            vals = [int(x) for x in s.split(",")]
    except ValueError as exc:
        raise UsageError(f"bad iteration range {text!r}") from exc
    if not vals or min(vals) < 1:
        raise UsageError(f"iteration range {text!r} must list counts >= 1")
    return vals


def _sweep_one(args: tuple[dict, int]) -> dict:
    cfg, n_iter = args
    run_dir = Path(cfg["out"]) / f"iters_{n_iter}"
    summary = _train_run(cfg, run_dir, n_iter)
    bundles, vocab = _dataset(cfg["data"])
    metrics = eval_run(Checkpoint.load(summary["checkpoint"]), bundles, vocab)
    return {"n_iter": n_iter, **metrics, "final_loss": summary["final_loss"],
            "mia_parameters": summary["mia_parameters"]}


def cmd_sweep_iters(cfg: dict) -> dict:
    started = _now()
    values = parse_range(cfg["iters"])
    if FEATURES.get(cfg["features"]) is FeatureSource.ORIGINAL:
        raise UsageError("sweep-iters needs an MIA feature source")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, n) for n in values]
    if cfg.get("parallel"):
        with ProcessPoolExecutor() as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    fields = ["n_iter", "bleu1", "bleu2", "bleu3", "bleu4", "token_accuracy", "exact_match",
              "final_loss", "mia_parameters"]
    csv_path = out / "sweep.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    _write_manifest(out, "sweep-iters", cfg, started)
    return {"csv": str(csv_path), "rows": rows}


def cmd_eval(cfg: dict) -> dict:
    ckpt = Checkpoint.load(cfg["ckpt"])
    bundles, vocab = _dataset(cfg["data"])
    try:
        return eval_run(ckpt, bundles, vocab)
    except VocabMismatchError as exc:
        raise UsageError(str(exc)) from exc


def cmd_attend(cfg: dict) -> dict:
    started = _now()
    ckpt = Checkpoint.load(cfg["ckpt"])
    bundle = read_bundle(cfg["bundle"])
    try:
        files = export_trace(ckpt, bundle, cfg["out"])
    except NoMiaError as exc:
        raise UsageError(str(exc)) from exc
    _write_manifest(Path(cfg["out"]), "attend", cfg, started)
    return {"out": str(cfg["out"]), "files": [p.name for p in files]}


def cmd_grad_check(cfg: dict) -> dict:
    report = run_suite_report(int(cfg["seed"]), max_entries=None if cfg["full"] else 12)
    return report


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sweep-iters": cmd_sweep_iters,
    "eval": cmd_eval,
    "attend": cmd_attend,
    "grad-check": cmd_grad_check,
}


def _emit(doc: dict) -> None:
    sys.stdout.write(json.dumps(doc, sort_keys=True) + "\n")
    sys.stdout.flush()


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except UsageError as exc:
        _emit({"error": str(exc), "exit_code": EXIT_USAGE})
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if ns.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        cfg = resolve_config(ns.command, ns)
        doc = COMMANDS[ns.command](cfg)
    except (UsageError, VocabMismatchError, EmptyDatasetError) as exc:
        log.error("%s", exc)
        _emit({"error": str(exc), "exit_code": EXIT_USAGE})
        return EXIT_USAGE
    except NonFiniteError as exc:
        log.error("training aborted: %s", exc)
        _emit({"error": str(exc), "exit_code": EXIT_NONFINITE})
        return EXIT_NONFINITE
    except (OSError, FeatureFileError, CheckpointError) as exc:
        log.error("%s", exc)
        _emit({"error": str(exc), "exit_code": EXIT_IO})
        return EXIT_IO
    if ns.command == "grad-check" and not doc["passed"]:
        _emit(doc)
        return 1
    _emit(doc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
