import csv
import json
import struct
import subprocess
import sys
import time

import pytest

from mia.checkpoint import Checkpoint
from mia.cli import main, parse_range

HEADER = struct.calcsize("<4sHII")


def run(capsys, *args):
    code = main([str(a) for a in args])
    out = capsys.readouterr().out
    return code, json.loads(out)  # exactly one JSON document, or this raises


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(out), "--scenes", "2", "--n-features", "6", "--d-h", "8",
                 "--min-objects", "2", "--max-objects", "3", "--seed", "4"]) == 0
    return out


def train_args(data, out, *extra):
    return ["train", "--data", data, "--out", out, "--heads", "2", "--epochs", "2", "--d-ff", "16", *extra]


class TestGenData:
    def test_zero_scenes(self, capsys, tmp_path):
        code, doc = run(capsys, "gen-data", "--out", tmp_path, "--scenes", "0")
        assert code == 0 and doc["scenes"] == 0 and doc["vocab_size"] == 4
        assert json.loads((tmp_path / "vocab.json").read_text())["tokens"] == ["<pad>", "<bos>", "<eos>", "<unk>"]
        assert not list(tmp_path.glob("*.miaf"))
        assert (tmp_path / "manifest.json").exists()

    def test_same_seed_same_files(self, capsys, tmp_path):
        for name in ("a", "b"):
            run(capsys, "gen-data", "--out", tmp_path / name, "--scenes", "3", "--seed", "9")
        a = {p.name: p.read_bytes() for p in (tmp_path / "a").iterdir() if p.name != "manifest.json"}
        b = {p.name: p.read_bytes() for p in (tmp_path / "b").iterdir() if p.name != "manifest.json"}
        assert a == b and len(a) == 4
        ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
        mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
        for m in (ma, mb):
            for key in ("started", "finished"):
                m.pop(key)
            m["config"].pop("out")
        assert ma == mb

    def test_payload_size(self, capsys, tmp_path):
        run(capsys, "gen-data", "--out", tmp_path, "--scenes", "1", "--n-features", "49", "--d-h", "16")
        blob = (tmp_path / "scene_000000.miaf").read_bytes()
        n, d = struct.unpack_from("<II", blob, 6)
        assert (n, d) == (49, 16)
        (json_len,) = struct.unpack_from("<I", blob, HEADER + 6272)
        assert len(blob) == HEADER + 6272 + 4 + json_len

    def test_region_feature_count(self, capsys, tmp_path):
        code, _ = run(capsys, "gen-data", "--out", tmp_path, "--scenes", "1", "--n-features", "36")
        assert code == 0

    def test_invalid_arguments_exit_2(self, capsys, tmp_path):
        assert run(capsys, "gen-data", "--out", tmp_path, "--scenes", "-1")[0] == 2
        assert run(capsys, "gen-data", "--out", tmp_path, "--n-features", "x")[0] == 2
        assert run(capsys, "gen-data")[0] == 2

    def test_unwritable_output_exit_3(self, capsys, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert run(capsys, "gen-data", "--out", blocker / "sub", "--scenes", "1")[0] == 3

    def test_seed_from_environment(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv("MIA_SEED", "9")
        run(capsys, "gen-data", "--out", tmp_path / "env", "--scenes", "1")
        monkeypatch.delenv("MIA_SEED")
        run(capsys, "gen-data", "--out", tmp_path / "flag", "--scenes", "1", "--seed", "9")
        name = "scene_000000.miaf"
        assert (tmp_path / "env" / name).read_bytes() == (tmp_path / "flag" / name).read_bytes()


class TestTrain:
    def test_minimal_run_is_fast(self, capsys, tmp_path, tiny_data):
        start = time.perf_counter()
        code, doc = run(capsys, *train_args(tiny_data, tmp_path / "r"))
        assert code == 0 and time.perf_counter() - start < 60
        assert doc["epochs"] == 2 and doc["mia_parameters"] > 0
        assert (tmp_path / "r" / "checkpoint.miac").exists()
        rows = list(csv.reader(open(tmp_path / "r" / "loss.csv")))
        assert rows[0] == ["epoch", "loss"] and len(rows) == 3
        manifest = json.loads((tmp_path / "r" / "manifest.json").read_text())
        assert manifest["command"] == "train" and manifest["seed"] == 0 and "tool_version" in manifest

    def test_original_features_have_no_mia_parameters(self, capsys, tmp_path, tiny_data):
        run(capsys, *train_args(tiny_data, tmp_path, "--features", "original", "--variant", "visual-attn"))
        ckpt = Checkpoint.load(tmp_path / "checkpoint.miac")
        assert ckpt.num_parameters("mia.") == 0 and ckpt.num_parameters() > 0

    def test_iteration_count_does_not_change_parameter_count(self, capsys, tmp_path, tiny_data):
        counts = []
        for n in (2, 5):
            _, doc = run(capsys, *train_args(tiny_data, tmp_path / str(n), "--iters", n, "--epochs", 0))
            counts.append(doc["parameters"])
        assert counts[0] == counts[1]

    @pytest.mark.parametrize("variant", ["visual-attn", "concept-attn", "visual-cond", "concept-cond", "regional-attn"])
    def test_every_variant_runs(self, capsys, tmp_path, tiny_data, variant):
        assert run(capsys, *train_args(tiny_data, tmp_path, "--variant", variant, "--epochs", 1))[0] == 0

    def test_ablation_flags(self, capsys, tmp_path, tiny_data):
        code, _ = run(capsys, *train_args(tiny_data, tmp_path, "--guiding", "visual-first",
                                          "--self-attn-ablation", "--no-anchor", "--features", "mia-textual"))
        assert code == 0

    def test_rerun_from_manifest(self, capsys, tmp_path, tiny_data):
        run(capsys, *train_args(tiny_data, tmp_path / "a", "--seed", 3))
        code, _ = run(capsys, "train", "--config", tmp_path / "a" / "manifest.json", "--out", tmp_path / "b")
        assert code == 0
        assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()

    def test_flags_override_config_file(self, capsys, tmp_path, tiny_data):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"epochs": 5, "heads": 2, "d_ff": 16, "data": str(tiny_data)}))
        _, doc = run(capsys, "train", "--config", cfg, "--out", tmp_path / "r", "--epochs", 1)
        assert doc["epochs"] == 1
        _, doc = run(capsys, "train", "--config", cfg, "--out", tmp_path / "r2")
        assert doc["epochs"] == 5

    def test_bad_config_exit_2(self, capsys, tmp_path, tiny_data):
        assert run(capsys, *train_args(tiny_data, tmp_path, "--heads", 3))[0] == 2
        assert run(capsys, *train_args(tiny_data, tmp_path, "--variant", "nope"))[0] == 2
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert run(capsys, "train", "--config", bad)[0] == 2

    def test_missing_data_exit_3(self, capsys, tmp_path):
        assert run(capsys, *train_args(tmp_path / "nope", tmp_path / "r"))[0] == 3

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_exit_4(self, capsys, tmp_path, tiny_data):
        code, _ = run(capsys, *train_args(tiny_data, tmp_path / "a", "--epochs", 0))
        ckpt = Checkpoint.load(tmp_path / "a" / "checkpoint.miac")
        ckpt.params["dec.embed"][:] = float("inf")
        ckpt.save(tmp_path / "bad.miac")
        code, doc = run(capsys, *train_args(tiny_data, tmp_path / "b", "--resume", tmp_path / "bad.miac"))
        assert code == 4 and "dec.embed" in doc["error"]

    def test_corrupt_feature_file_exit_3(self, capsys, tmp_path, tiny_data):
        data = tmp_path / "data"
        data.mkdir()
        for p in tiny_data.glob("*.miaf"):
            (data / p.name).write_bytes(p.read_bytes()[:20])
        assert run(capsys, *train_args(data, tmp_path / "r"))[0] == 3


class TestOtherCommands:
    @pytest.fixture
    def run_dir(self, capsys, tmp_path, tiny_data):
        run(capsys, *train_args(tiny_data, tmp_path / "r", "--iters", 1))
        return tmp_path / "r"

    def test_eval(self, capsys, run_dir, tiny_data):
        code, doc = run(capsys, "eval", "--ckpt", run_dir / "checkpoint.miac", "--data", tiny_data)
        assert code == 0
        assert set(doc) >= {"bleu1", "bleu2", "bleu3", "bleu4", "token_accuracy"}

    def test_eval_vocabulary_mismatch_exit_2(self, capsys, tmp_path, run_dir):
        other = tmp_path / "other"
        run(capsys, "gen-data", "--out", other, "--scenes", "6", "--n-features", "6", "--d-h", "8", "--seed", "50")
        code, doc = run(capsys, "eval", "--ckpt", run_dir / "checkpoint.miac", "--data", other)
        assert code == 2 and "vocabulary" in doc["error"]

    def test_eval_corrupt_checkpoint_exit_3(self, capsys, tmp_path, tiny_data):
        (tmp_path / "x.miac").write_bytes(b"junk")
        assert run(capsys, "eval", "--ckpt", tmp_path / "x.miac", "--data", tiny_data)[0] == 3

    def test_attend(self, capsys, tmp_path, run_dir, tiny_data):
        code, doc = run(capsys, "attend", "--ckpt", run_dir / "checkpoint.miac",
                        "--bundle", tiny_data / "scene_000000.miaf", "--out", tmp_path / "t")
        assert code == 0 and len(doc["files"]) == 8
        assert (tmp_path / "t" / "manifest.json").exists()

    def test_attend_without_mia_exit_2(self, capsys, tmp_path, tiny_data):
        run(capsys, *train_args(tiny_data, tmp_path / "o", "--features", "original", "--epochs", 0))
        code, _ = run(capsys, "attend", "--ckpt", tmp_path / "o" / "checkpoint.miac",
                      "--bundle", tiny_data / "scene_000000.miaf", "--out", tmp_path / "t")
        assert code == 2

    def test_sweep_three_rows(self, capsys, tmp_path, tiny_data):
        code, doc = run(capsys, "sweep-iters", "--data", tiny_data, "--out", tmp_path, "--iters", "1..3",
                        "--heads", "2", "--d-ff", "16", "--epochs", "1")
        assert code == 0 and [r["n_iter"] for r in doc["rows"]] == [1, 2, 3]
        rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
        assert len(rows) == 3
        assert len({r["mia_parameters"] for r in rows}) == 1
        assert all((tmp_path / f"iters_{n}" / "checkpoint.miac").exists() for n in (1, 2, 3))

    def test_parallel_sweep_matches_sequential(self, capsys, tmp_path, tiny_data):
        common = ["--data", tiny_data, "--iters", "1,2", "--heads", "2", "--d-ff", "16", "--epochs", "1"]
        _, seq = run(capsys, "sweep-iters", "--out", tmp_path / "s", *common)
        _, par = run(capsys, "sweep-iters", "--out", tmp_path / "p", "--parallel", *common)
        assert seq["rows"] == par["rows"]

    def test_parse_range(self):
        assert parse_range("1..5") == [1, 2, 3, 4, 5]
        assert parse_range("2,4") == [2, 4]
        with pytest.raises(Exception):
            parse_range("0..2")

    def test_grad_check_exit_0(self, capsys):
        code, doc = run(capsys, "grad-check")
        assert code == 0 and doc["passed"]
        assert doc["seconds"] < 120

    def test_unknown_command_exit_2(self, capsys):
        assert run(capsys, "frobnicate")[0] == 2


def test_console_script_stdout_is_json(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "mia.cli", "-v", "gen-data", "--out", str(tmp_path), "--scenes", "1"],
        capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["scenes"] == 1
    assert proc.stderr  # logs go to stderr, never stdout
