import numpy as np
import pytest
from PIL import Image

from pvssd import cli
from pvssd.autodiff import load_checkpoint
from pvssd.dataset import Calibration, GTDatabase, parse_label_row


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text("preset: toy\nseed: 3\ndata:\n  synthetic_frames: 2\n")
    return str(path)


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def rows(out):
    return [ln.split("\t") for ln in out.strip().splitlines()]


def test_gradcheck_command(capsys, tmp_path):
    code, out, _ = run(capsys, "gradcheck", "--out", tmp_path)
    table = rows(out)
    assert code == 0
    assert table[0] == ["block", "max_rel_error", "tolerance", "status"]
    assert len(table) == 1 + 16 and all(r[3] == "pass" for r in table[1:])
    assert (tmp_path / "gradcheck.tsv").read_text().count("\n") == 17


def test_gradcheck_failure_exit_code(capsys, monkeypatch):
    monkeypatch.setattr(cli, "run_gradchecks", lambda seed: [("vfe", 1e-6, 1e-4), ("head", 0.3, 1e-4)])
    code, out, _ = run(capsys, "gradcheck")
    assert code == 1 and "head\t3.000e-01\t1e-04\tFAIL" in out


def test_preprocess_is_byte_identical(capsys, tmp_path, small_config):
    for name in ("a", "b"):
        code, out, _ = run(capsys, "preprocess", "--config", small_config, "--out", tmp_path / name)
        assert code == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == ["000000.bev.npz", "000000.vox.npz", "000001.bev.npz", "000001.vox.npz"]
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_preprocess_default_cache_dir_and_frames_file(capsys, tmp_path, small_config, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "ids.txt").write_text("000001\n")
    code, out, _ = run(capsys, "preprocess", "--config", small_config, "--frames", "@ids.txt")
    assert code == 0
    table = rows(out)
    assert [r[0] for r in table[1:]] == ["000001"]
    assert table[1][4].startswith("cache/")


def test_render_bev(capsys, tmp_path, small_config):
    code, out, _ = run(capsys, "render-bev", "--config", small_config, "--frames", "000000", "--out",
                       tmp_path / "bev.png")
    assert code == 0
    img = Image.open(tmp_path / "bev.png")
    assert img.size == (128, 128) and img.mode == "RGB"
    assert int(rows(out)[1][2]) == int((np.asarray(img).sum(axis=2) > 0).sum())


def test_build_gtdb(capsys, tmp_path, small_config):
    code, out, _ = run(capsys, "build-gtdb", "--config", small_config, "--out", tmp_path / "db")
    db = GTDatabase.load(tmp_path / "db")
    counts = {r[0]: int(r[1]) for r in rows(out)[1:]}
    assert code == 0 and sum(counts.values()) == len(db) > 0


def test_train_zero_steps_writes_initial_checkpoint_only(capsys, tmp_path, small_config):
    code, _, _ = run(capsys, "train-toy", "--config", small_config, "--steps", 0, "--out", tmp_path)
    assert code == 0
    assert (tmp_path / "loss.tsv").read_text() == cli.LOG_HEADER + "\n"
    assert sorted(p.name for p in tmp_path.iterdir() if p.name.startswith("checkpoint")) == ["checkpoint"]
    model = cli.build_model(cli.load_config(small_config))
    state = load_checkpoint(tmp_path / "checkpoint")
    for name, p in model.named_parameters():
        assert np.array_equal(state[name], p.data)


def test_train_eval_infer_round(capsys, tmp_path, small_config):
    runs = []
    for name in ("r1", "r2"):
        code, _, _ = run(capsys, "train-toy", "--config", small_config, "--steps", 2, "--out", tmp_path / name)
        assert code == 0
        runs.append((tmp_path / name / "loss.tsv").read_bytes())
    assert runs[0] == runs[1] and runs[0].count(b"\n") == 3
    assert (tmp_path / "r1" / "loss_curve.png").read_bytes()[:4] == b"\x89PNG"

    ckpt = tmp_path / "r1" / "checkpoint"
    code, out, _ = run(capsys, "eval", "--checkpoint", ckpt, "--out", tmp_path / "ev")
    assert code == 0
    kv = (tmp_path / "ev" / "metrics.kv").read_text().splitlines()
    assert len(kv) == 2 * 2 * 3 and kv[0].startswith("ap_r40.Car.bev.easy=")
    assert (tmp_path / "ev" / "pr_curve.png").exists() and (tmp_path / "ev" / "metrics.txt").exists()
    assert len(rows(out)) == 1 + 4

    code, out, _ = run(capsys, "infer", "--checkpoint", ckpt, "--out", tmp_path / "inf", "--frames", "000000")
    assert code == 0
    text = (tmp_path / "inf" / "000000.txt").read_text()
    for line in text.splitlines():
        assert parse_label_row(line, Calibration.kitti_like()).score is not None


@pytest.mark.parametrize("argv,code,needle", [
    (["eval"], 1, "--checkpoint is required"),
    (["preprocess", "--frames", "424242"], 1, "no frame(s) 424242"),
    (["preprocess", "--config", "missing.yaml"], 1, "kind=FileNotFoundError"),
])
def test_structured_errors(capsys, tmp_path, monkeypatch, argv, code, needle):
    monkeypatch.chdir(tmp_path)
    got, out, err = run(capsys, *argv)
    assert got == code and needle in err and err.startswith("pvssd: error command=")
    assert out == ""


def test_config_error_exit_two(capsys, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("preset: toy\nvoxel:\n  max_pts: 3\n")
    code, _, err = run(capsys, "preprocess", "--config", bad)
    assert code == 2 and "kind=config" in err and "max_pts" in err
