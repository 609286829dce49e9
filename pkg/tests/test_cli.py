import csv
import subprocess
import sys

import pytest

from spikeir.cli import main
from spikeir.data import load_image

TINY = "levels = 4\nchannels = 2,4,4,4\nblocks_per_level = 1\npatch_size = 16\npatches_per_image = 2\nepochs = 2\n"


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["make-data", "--out", str(root), "--train-images", "4", "--val-images", "2", "--size", "24"]) == 0
    cfg = root / "run.cfg"
    cfg.write_text(cfg.read_text() + TINY + f"out = {root}\n")
    assert main(["train-teacher", "--config", str(cfg)]) == 0
    return root, cfg


def read_rows(path):
    return list(csv.DictReader(open(path)))


def test_train_student_outputs_and_rerun_identical(work, tmp_path):
    root, cfg = work
    args = ["train-student", "--config", str(cfg), "--teacher", str(root / "teacher.ckpt")]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("student_run.csv", "student.ckpt", "student_vmem.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = read_rows(tmp_path / "a" / "student_run.csv")
    assert [r["epoch"] for r in rows] == ["0", "1"] and float(rows[0]["loss_kd"]) > 0


def test_missing_teacher_exits_2(work, tmp_path, capsys):
    _, cfg = work
    code = main(["train-student", "--config", str(cfg), "--teacher", str(tmp_path / "none.ckpt"),
                 "--out", str(tmp_path)])
    assert code == 2 and "does not exist" in capsys.readouterr().err


def test_bad_flag_value_exits_2(work, capsys):
    _, cfg = work
    assert main(["train-student", "--config", str(cfg), "--kd", "9"]) == 2


def test_eval_clean_against_clean(work, tmp_path):
    root, cfg = work
    val = root / "val.txt"
    assert main(["eval", "--config", str(cfg), "--pred", str(val), "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "eval.csv")
    assert rows[-1]["image"] == "mean"
    assert all(float(r["psnr"]) == 99.0 and float(r["ssim"]) == 1.0 for r in rows)


def test_eval_profile_denoise_with_checkpoint(work, tmp_path):
    root, cfg = work
    assert main(["train-student", "--config", str(cfg), "--kd", "none", "--epochs", "1", "--out", str(tmp_path)]) == 0
    ck = str(tmp_path / "student.ckpt")
    assert main(["eval", "--config", str(cfg), "--checkpoint", ck, "--out", str(tmp_path)]) == 0
    assert len(read_rows(tmp_path / "eval.csv")) == 3
    assert main(["profile", "--config", str(cfg), "--checkpoint", ck, "--out", str(tmp_path)]) == 0
    assert "E_MAC = 4.6 pJ" in (tmp_path / "energy_snn.txt").read_text()
    assert (tmp_path / "energy_ann.csv").is_file() and (tmp_path / "energy.json").is_file()
    src = (root / "val.txt").read_text().split()[0]
    src = src if src.startswith("/") else root / src
    dst = tmp_path / "den.pgm"
    assert main(["denoise", "--config", str(cfg), "--checkpoint", ck, "--input", str(src), "--output", str(dst)]) == 0
    assert load_image(dst).values.shape == load_image(src).values.shape


def test_sweep_table_shape(work, tmp_path):
    _, cfg = work
    assert main(["sweep-stages", "--config", str(cfg), "--epochs", "1", "--seeds", "1", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "sweep_table.txt").read_text().splitlines()
    assert len(lines) == 2 + 4
    assert [c.strip() for c in lines[0].split("|")] == ["stages", "sigma=15 PSNR/SSIM", "sigma=25 PSNR/SSIM",
                                                        "sigma=50 PSNR/SSIM"]
    assert [l.split("|")[0].strip() for l in lines[2:]] == ["1->7", "3->5", "4->7", "none"]
    assert len(read_rows(tmp_path / "sweep.csv")) == 12
    report = (tmp_path / "sweep_report.txt").read_text()
    assert "speed-up ratio" in report and "membrane density" in report
    assert len(list(tmp_path.glob("vmem_*.csv"))) == 6


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "spikeir.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "sweep-stages" in r.stdout
