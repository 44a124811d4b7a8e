import csv
import json
import math
import subprocess
import sys
from pathlib import Path

import pytest

from storefront.cli import build_parser, main
from storefront.config import ConfigError, RunConfig, default_config, load_config

SMALL = [
    "data.num_streets=20", "data.pano_width_px=416", "data.pano_height_px=208",
    "data.test_fraction=0.3", "data.val_fraction=0.2",
    "priors.n=12", "model.grid=16", "model.hidden=32",
    "train.steps=150", "train.batch_size=16",
    "postclassifier.grid=16", "postclassifier.hidden=16", "postclassifier.epochs=3",
]


def run(command, out, *extra, threads=1):
    argv = [command, "--out", str(out), "--threads", str(threads)]
    for s in SMALL + list(extra):
        argv += ["--set", s]
    return main(argv)


def chain(out, *extra, threads=1):
    codes = [run(c, out, *extra, threads=threads)
             for c in ("gen-data", "make-priors", "train", "detect", "eval", "geocluster", "bench")]
    assert codes == [0] * 7
    return out


def file_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    return chain(tmp_path_factory.mktemp("a"), "pipeline.postclassify=true")


def test_defaults_file_matches_dataclasses():
    assert default_config() == RunConfig()
    assert RunConfig.from_dict(RunConfig().to_dict()) == RunConfig()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"stepz": 3}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"trian": {}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"crop_plan": {"scales": [], "extra": 1}})
    with pytest.raises(ConfigError):
        load_config(None, ["train.nope=1"])


def test_overrides_and_type_checks(tmp_path):
    cfg = load_config(None, ["train.steps=7", "pipeline.postclassify=true", "eval.budgets=[5, 10]"])
    assert cfg.train.steps == 7 and cfg.pipeline.postclassify and cfg.eval.budgets == (5, 10)
    with pytest.raises(ConfigError):
        load_config(None, ["train.steps=1.5"])
    with pytest.raises(ConfigError):
        load_config(None, ["pipeline.postclassify=1"])
    with pytest.raises(ConfigError):
        load_config(None, ["train.steps=0"])
    with pytest.raises(ConfigError):
        load_config(None, ["train.steps"])
    (tmp_path / "c.json").write_text(json.dumps({"loss": {"alpha": 0.5}}))
    assert load_config(tmp_path / "c.json").loss.alpha == 0.5
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_help_lists_flags():
    text = build_parser().format_help()
    for flag in ("--config", "--set", "--threads", "--out"):
        assert flag in text


def test_exit_codes_and_error_json(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--set", "train.bogus=1"]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == 1 and err["error"] == "ConfigError"
    # missing inputs are validation errors
    assert main(["detect", "--out", str(tmp_path)]) == 1
    err = json.loads(capsys.readouterr().err)
    assert "not found" in err["message"]
    assert main(["nonsense"]) == 1
    capsys.readouterr()
    # a corrupt dataset fails while running
    (tmp_path / "data").mkdir()
    (tmp_path / "data" / "manifest.json").write_text('{"ids": ["a"], "split": {"a": "train"}}')
    assert main(["make-priors", "--out", str(tmp_path)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == 2


def test_show_config(capsys):
    assert main(["show-config", "--set", "train.steps=3"]) == 0
    assert json.loads(capsys.readouterr().out)["train"]["steps"] == 3


def test_console_script_entry_point():
    res = subprocess.run([sys.executable, "-m", "storefront.cli", "show-config"], capture_output=True, text=True)
    assert res.returncode == 0 and "crop_plan" in res.stdout


def test_smoke_chain_outputs(smoke):
    report = json.loads((smoke / "eval" / "eval_report.json").read_text())
    assert math.isfinite(report["average_precision"])
    assert (smoke / "model" / "detector.ckpt").exists()
    assert (smoke / "model" / "postclassifier.ckpt").exists()
    trace = list(csv.reader((smoke / "model" / "loss_trace.csv").open()))
    assert trace[0] == ["step", "loss"] and len(trace) == 151
    cost = json.loads((smoke / "detections" / "cost_report.json").read_text())
    for c in cost["per_panorama"].values():
        assert c["network_evals_total"] == c["crops_evaluated"] + c["proposals_postclassified"]
    geo = json.loads((smoke / "geo" / "end_to_end_report.json").read_text())
    assert geo["detections_confirmed"] >= geo["false_positives"]
    rows = list(csv.DictReader((smoke / "bench.csv").open()))
    crops = [int(r["crops"]) for r in rows]
    assert len(rows) == 3 and crops[0] < crops[1] < crops[2]


def test_reruns_are_byte_identical(smoke, tmp_path):
    again = chain(tmp_path / "b", "pipeline.postclassify=true")
    assert file_bytes(again) == file_bytes(smoke)


def test_threads_do_not_change_outputs(smoke, tmp_path):
    threaded = chain(tmp_path / "c", "pipeline.postclassify=true", threads=3)
    assert file_bytes(threaded) == file_bytes(smoke)


def test_detect_full_frame_single_crop(tmp_path, capsys):
    square = ["data.pano_width_px=208", "crop_plan.scales=[{\"side\": 1.0, \"band_top\": 0.0, \"band_bottom\": 1.0}]"]
    for c in ("gen-data", "make-priors", "train", "detect"):
        assert run(c, tmp_path, *square) == 0
    cost = json.loads((tmp_path / "detections" / "cost_report.json").read_text())
    assert all(c["crops_evaluated"] == 1 for c in cost["per_panorama"].values())
