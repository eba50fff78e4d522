import json
import subprocess
import sys

import pytest

from fastsearch.arch import ArchParams, one_hot_from
from fastsearch.cli import main
from fastsearch.genotype import Genotype

TINY = {
    "space": {"version": 1, "layers": 3},
    "task": {"height": 32, "width": 64, "n_train": 8, "n_val": 4, "seed": 3},
    "search": {"pretrain_epochs": 1, "search_epochs": 1, "batch_size": 4, "keep_fraction": 1.0,
               "scratch_epochs": 1},
    "select_epochs": 0,
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def _run(argv, capsys):
    rc = main(argv)
    out, err = capsys.readouterr()
    return rc, out, err


def test_profile_with_given_deltas(tmp_path, capsys):
    rc, out, _ = _run(["profile", "--out", str(tmp_path / "p"), "--deltas", "10.42,0.01,5.54"], capsys)
    assert rc == 0
    assert json.loads(out)["rounded"] == [0.001, 0.997, 0.002]
    manifest = json.loads((tmp_path / "p" / "manifest.json").read_text())
    assert {"lut.csv", "sensitivity.json", "weights.json", "config.json"} <= set(manifest["artifacts"])


def test_bad_input_gives_error_json_and_code_2(tmp_path, capsys):
    rc, _, err = _run(["profile", "--out", str(tmp_path / "p"), "--deltas", "1,2"], capsys)
    assert rc == 2 and json.loads(err)["error"] == "CliError"
    rc, _, err = _run(["train", "--out", str(tmp_path / "t"), "--genotype", str(tmp_path / "none.json")], capsys)
    assert rc == 2 and "cannot read input" in json.loads(err)["message"]
    rc, _, err = _run(["search", "--out", str(tmp_path / "s"), "--preset", "nope"], capsys)
    assert rc == 2


def test_derive_one_hot_fixture(tmp_path, capsys, space, fasterseg):
    ck = one_hot_from(fasterseg, space).save(tmp_path / "arch.json")
    out = tmp_path / "d"
    rc, _, _ = _run(["derive", "--out", str(out), "--checkpoint", str(ck), "--epochs", "0"], capsys)
    assert rc == 0
    tag = "-".join(map(str, fasterseg.head_rates))
    assert Genotype.load(out / f"genotype_{tag}.json") == fasterseg
    assert set(json.loads((out / "targets.json").read_text())["candidates"]) == {"8-16", "8-32", "16-32"}


def test_search_zero_epochs_writes_header_only(tmp_path, capsys, tiny_config):
    out = tmp_path / "s"
    rc, _, _ = _run(["search", "--out", str(out), "--config", tiny_config, "--epochs", "0"], capsys)
    assert rc == 0
    assert (out / "trajectory.csv").read_text() == "step,phase,L_seg,latency_ms,total,val_mIoU\n"
    assert (out / "supernet" / "state.json").exists()


def test_search_report_and_train(tmp_path, capsys, tiny_config):
    run = tmp_path / "s"
    rc, out, _ = _run(["search", "--out", str(run), "--config", tiny_config, "--mode", "naive", "--seed", "1"],
                      capsys)
    assert rc == 0 and json.loads(out)["mode"] == "naive"
    assert json.loads((run / "config.json").read_text())["search"]["seed"] == 1
    rc, out, _ = _run(["report", "--run", str(run)], capsys)
    assert rc == 0
    for name in ("trajectory.svg", "architecture.svg"):
        assert (run / name).read_text().startswith("<svg")
    rc, _, _ = _run(["derive", "--out", str(tmp_path / "d"), "--config", tiny_config,
                     "--checkpoint", str(run / "arch.json")], capsys)
    assert rc == 0
    geno = str(tmp_path / "d" / "genotype.json")
    rc, out, _ = _run(["train", "--out", str(tmp_path / "t"), "--config", tiny_config,
                       "--genotype", geno, "--teacher", geno], capsys)
    assert rc == 0
    metrics = json.loads(out)
    assert 0 <= metrics["val_mIoU"] <= 1 and metrics["teacher_val_mIoU"] is not None
    assert (tmp_path / "t" / "teacher_trajectory.csv").exists()


def test_cosearch_report_compares_latency(tmp_path, capsys, tiny_config):
    run = tmp_path / "c"
    assert _run(["cosearch", "--out", str(run), "--config", tiny_config], capsys)[0] == 0
    ArchParams.load(run / "arch_teacher.json")
    rc, out, _ = _run(["report", "--run", str(run), "--out", str(tmp_path / "r")], capsys)
    assert rc == 0 and "student_not_slower" in json.loads(out)


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "fastsearch.cli", "profile", "--out", str(tmp_path),
                          "--deltas", "1,1,1"], capture_output=True, text=True, check=False)
    assert res.returncode == 0
    assert json.loads(res.stdout)["rounded"] == [0.333, 0.333, 0.333]
