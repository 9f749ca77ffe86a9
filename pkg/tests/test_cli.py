import json

import numpy as np
import pytest

from umamba2.cli import main
from umamba2.data_io import read_volume


def run(*argv):
    return main([str(a) for a in argv])


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        run("--version")
    assert exc.value.code == 0
    assert "checkpoint format" in capsys.readouterr().out


def test_selftest_passes(capsys):
    assert run("selftest") == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 3 and "FAIL" not in out


def test_usage_errors(capsys):
    assert run() == 1
    assert run("infer", "--input", "x", "--output", "y") == 1
    assert "usage" in capsys.readouterr().err
    assert run("no-such-command") == 1
    assert run("--threads", "0", "selftest") == 1


def test_data_errors(tmp_path, capsys):
    assert run("train", "--data-dir", tmp_path, "--out", tmp_path / "m") == 2
    bad = tmp_path / "cfg.json"
    bad.write_text(json.dumps({"training": {"nope": 1}}))
    assert run("--config", bad, "selftest") == 2
    assert "unknown keys" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path):
    assert run("gen-phantoms", "--count", 1, "--out-dir", tmp_path / "d") == 0
    cfg = tmp_path / "cfg.json"
    # two steps at an absurd learning rate overflow the float32 weights
    cfg.write_text(json.dumps({"training": {"epochs": 2, "iters_per_epoch": 2, "batch_size": 1, "lr": 1e30,
                                            "grad_clip": 0, "poly_exponent": 0.0}}))
    assert run("--config", cfg, "train", "--data-dir", tmp_path / "d", "--out", tmp_path / "m") == 3


def test_benchmark_json(tmp_path, capsys):
    assert run("benchmark-ssd", "--lengths", "16,32", "--chunk-len", 8, "--repeats", 1,
               "--out", tmp_path / "b.json") == 0
    rows = json.loads((tmp_path / "b.json").read_text())
    assert {"form", "T", "N", "P", "Q", "seconds"} <= set(rows[0]) and len(rows) == 6


def test_gen_phantoms_deterministic(tmp_path):
    for d in ("a", "b"):
        assert run("gen-phantoms", "--count", 2, "--seed", 7, "--out-dir", tmp_path / d) == 0
    for f in sorted((tmp_path / "a").glob("case_*")):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    other = json.loads((tmp_path / "b" / "manifest.json").read_text())
    for m in (manifest, other):
        m["provenance"]["flags"].pop("out_dir")
    assert manifest == other
    assert manifest["cases"] == ["case_000", "case_001"] and "config" in manifest["provenance"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-phantoms -> pretrain -> train -> infer -> compute-thresholds -> postprocess -> evaluate."""
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({
        "seed": 1,
        "arch": {"num_stages": 2, "base_channels": 4, "kernel_sizes": [3, 3], "strides": [2],
                 "patch_size": [32, 32, 32], "ssd": {"state_dim": 4, "num_heads": 2}},
        "training": {"epochs": 2, "iters_per_epoch": 1, "batch_size": 1},
        "dae": {"epochs": 1, "iters_per_epoch": 1, "batch_size": 1},
        "inference": {"tta_axes": [[2]]},
    }))
    data = root / "data"
    steps = [
        ("gen-phantoms", "--count", 2, "--seed", 3, "--out-dir", data),
        ("pretrain", "--data-dir", data, "--out", root / "dae"),
        ("train", "--data-dir", data, "--out", root / "model", "--pretrained", root / "dae.json",
         "--log", root / "train.jsonl"),
        ("infer", "--checkpoint", root / "model.json", "--input", data, "--output", root / "pred",
         "--timing-report", root / "timing.json", "--tile-step", 0.9),
        ("compute-thresholds", "--data-dir", data, "--out", root / "thr.json"),
        ("postprocess", "--input", root / "pred", "--thresholds", root / "thr.json", "--output", root / "post"),
        ("evaluate", "--pred", root / "post", "--gt", data, "--out", root / "metrics.json"),
    ]
    codes = [run("--config", cfg, *s) for s in steps]
    return root, cfg, steps, codes


def test_pipeline_completes(pipeline):
    root, _, _, codes = pipeline
    assert codes == [0] * len(codes)
    metrics = json.loads((root / "metrics.json").read_text())
    assert 0 <= metrics["mean"]["dice"] <= 1 and len(metrics["per_class"]) == 11
    assert metrics["provenance"]["config"]["seed"] == 1
    timing = json.loads((root / "timing.json").read_text())
    assert timing["passes"] == 4 and timing["windows"] == 4
    log = [json.loads(l) for l in (root / "train.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [0, 1] and "config" in log[0]
    manifest = json.loads((root / "model.json").read_text())
    assert manifest["extra"]["provenance"]["config"]["training"]["epochs"] == 2
    pred = read_volume(root / "post" / "case_000_pred.json")
    assert pred.data.shape == (32, 32, 32) and pred.data.dtype == np.uint8


def test_pipeline_repeat_is_bit_identical(pipeline, tmp_path):
    root, cfg, steps, _ = pipeline
    # rerun train + infer into a fresh directory and compare artifacts byte for byte
    again = tmp_path
    assert run("--config", cfg, "train", "--data-dir", root / "data", "--out", again / "model",
               "--pretrained", root / "dae.json") == 0
    assert (again / "model.bin").read_bytes() == (root / "model.bin").read_bytes()
    assert run("--config", cfg, "infer", "--checkpoint", root / "model.json", "--input", root / "data",
               "--output", again / "pred", "--tile-step", 0.9) == 0
    for f in (root / "pred").glob("*.raw"):
        assert f.read_bytes() == (again / "pred" / f.name).read_bytes()
