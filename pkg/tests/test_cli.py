import csv
import json

import pytest

from invpt.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, build_parser, main
from invpt.verify import complexity_report

SMALL = {
    "model": {"image_size": [32, 32], "c0": 32, "cd": 32,
              "encoder": {"patch_size": 8, "embed_dim": 32, "depth": 3, "tap_layers": [1, 2, 3]}},
    "data": {"num_samples": 10},
    "train": {"ckpt_every": 25, "vis_samples": 1},
    "bench": {"repeats": 1},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train", "--help"])
    text = capsys.readouterr().out
    for flag in ("--config", "--out", "--seed", "--iters", "--jobs", "--set", "--resume"):
        assert flag in text


def test_train_smoke_and_resume(tmp_path, config):
    out = tmp_path / "run"
    assert main(["train", "--config", config, "--out", str(out), "--iters", "50"]) == EXIT_OK
    assert (out / "checkpoint" / "manifest.json").exists()
    assert len(rows(out / "train_log.csv")) == 50
    assert (out / "predictions" / "val_0_semseg.pgm").exists()
    assert (out / "predictions" / "val_0_image.ppm").exists()
    resolved = json.loads((out / "config.resolved").read_text())
    assert resolved["train"]["iters"] == 50 and resolved["model"]["c0"] == 32

    assert main(["train", "--config", config, "--out", str(out), "--iters", "60", "--resume"]) == EXIT_OK
    log = rows(out / "train_log.csv")
    assert len(log) == 60 and log[-1]["iter"] == "59"
    manifest = json.loads((out / "checkpoint" / "manifest.json").read_text())
    assert manifest["iteration"] == 60


def test_train_reproducible(tmp_path, config):
    finals = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--config", config, "--out", str(out), "--iters", "5", "--seed", "3"]) == EXIT_OK
        finals.append(rows(out / "train_log.csv")[-1]["loss_total"])
    assert finals[0] == finals[1]


def test_eval_self_baseline(tmp_path, config, capsys):
    out = tmp_path / "run"
    main(["train", "--config", config, "--out", str(out), "--iters", "2"])
    ckpt = str(out / "checkpoint")
    assert main(["eval", "--config", config, "--out", str(out), "--baseline", ckpt]) == EXIT_OK
    report = rows(out / "eval_report.csv")
    keys = {(r["task"], r["metric"]) for r in report}
    assert keys == {("semseg", "miou"), ("depth", "rmse"), ("boundary", "odsf"), ("all", "delta_m")}
    assert float(next(r["value"] for r in report if r["metric"] == "delta_m")) == 0.0
    assert "delta_m=0" in capsys.readouterr().out


def test_eval_report_file_baseline_and_jobs(tmp_path, config):
    out = tmp_path / "run"
    more = ["--set", "data.num_samples=40"]
    main(["train", "--config", config, "--out", str(out), "--iters", "2"])
    assert main(["eval", "--config", config, "--out", str(out)] + more) == EXIT_OK
    base = tmp_path / "base.csv"
    base.write_text((out / "eval_report.csv").read_text())
    args = ["eval", "--config", config, "--out", str(out), "--baseline", str(base), "--jobs", "2"]
    assert main(args + more) == EXIT_OK
    report = rows(out / "eval_report.csv")
    assert float(report[-1]["value"]) == 0.0


def test_eval_missing_checkpoint(tmp_path, config):
    code = main(["eval", "--config", config, "--out", str(tmp_path), "--checkpoint", str(tmp_path / "nope")])
    assert code == EXIT_USAGE


def test_verify_shapes(tmp_path, capsys):
    assert main(["verify", "shapes", "--out", str(tmp_path)]) == EXIT_OK
    assert "shapes: PASS" in capsys.readouterr().out
    assert (tmp_path / "verify_shapes.csv").exists()


def test_verify_complexity_and_oracle(tmp_path):
    assert main(["verify", "complexity", "--out", str(tmp_path)]) == EXIT_OK
    assert main(["verify", "oracle", "--out", str(tmp_path)]) == EXIT_OK


def test_verify_unknown_suite(tmp_path):
    assert main(["verify", "everything", "--out", str(tmp_path)]) == EXIT_USAGE


def test_bench_rows(tmp_path, config):
    assert main(["bench", "--config", config, "--out", str(tmp_path)]) == EXIT_OK
    table = rows(tmp_path / "bench.csv")
    assert [r["num_stages"] for r in table] == ["1", "2", "3"]
    for r in table:
        assert float(r["forward_seconds"]) > 0
        rep = complexity_report(3, 4, 4, 32, int(r["num_stages"]))
        assert int(r["attn_elements"]) == sum(s["elements"] for s in rep.stages)
        assert int(r["vanilla_elements"]) == sum(s["vanilla"] for s in rep.stages)


def test_export_data(tmp_path, config):
    assert main(["export-data", "--config", config, "--out", str(tmp_path)]) == EXIT_OK
    files = sorted(p.name for p in (tmp_path / "data").iterdir())
    assert len(files) == 50 and "train_0_image.ppm" in files and "val_9_depth.pgm" in files


def test_overrides_win(tmp_path, config):
    out = tmp_path / "o"
    args = ["export-data", "--config", config, "--out", str(out), "--seed", "4", "--set", "data.num_samples=5",
            "--set", "seed=6"]
    assert main(args) == EXIT_OK
    resolved = json.loads((out / "config.resolved").read_text())
    assert resolved["seed"] == 6 and resolved["data"]["num_samples"] == 5


@pytest.mark.parametrize("bad", [["--set", "model.heads=4"], ["--set", "nokey"], ["--set", "model.tasks.7.channels=3"]])
def test_unknown_keys_rejected(tmp_path, bad):
    assert main(["export-data", "--out", str(tmp_path)] + bad) == EXIT_USAGE


def test_unknown_config_file_key(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"model": {"c0": 32, "width": 3}}))
    assert main(["export-data", "--config", str(path), "--out", str(tmp_path)]) == EXIT_USAGE


def test_invalid_config_value(tmp_path):
    assert main(["export-data", "--out", str(tmp_path), "--set", "model.c0=30"]) == EXIT_USAGE


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_exit(tmp_path, config):
    code = main(["train", "--config", config, "--out", str(tmp_path), "--iters", "5",
                 "--set", "model.optim.lr=1e30"])
    assert code == EXIT_NUMERIC


def test_depth_override_derives_taps(tmp_path):
    args = ["export-data", "--out", str(tmp_path), "--set", "model.encoder.depth=4", "--set", "data.num_samples=2"]
    assert main(args) == EXIT_OK
