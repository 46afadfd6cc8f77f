import pytest

from attnfd.__main__ import main
from attnfd.version import __version__

SMALL_CONFIG = """\
# tiny run for command-line tests
data.canvas = 16
data.train_count = 4
data.val_count = 2
augment.crop = 16
net.teacher_widths = 8,16,16
net.student_widths = 4,8,8
net.reduction = 4
train.epochs = 1
train.calibration_epochs = 1
train.batch_size = 2
distill.epochs = 1
"""


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    config = root / "small.cfg"
    config.write_text(SMALL_CONFIG)
    assert main(["train-teacher", "--config", str(config), "--out", str(root / "teacher")]) == 0
    teacher = root / "teacher" / "teacher.afd"
    for seed in (0, 1):
        argv = ["distill", "--config", str(config), "--seed", str(seed), "--teacher", str(teacher)]
        assert main(argv + ["--out", str(root / f"student{seed}")]) == 0
    return root


def _error_line(capsys):
    return capsys.readouterr().err.strip().splitlines()[-1]


def test_version(capsys):
    assert main(["--version"]) == 0
    assert capsys.readouterr().out.startswith(f"attnfd {__version__}")


def test_no_command_prints_help(capsys):
    assert main([]) == 0
    assert "gen-data" in capsys.readouterr().out


def test_missing_config(tmp_path, capsys):
    code = main(["train-teacher", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path / "out")])
    assert code == 4
    assert _error_line(capsys).startswith("error category=missing-file code=4 message=")


def test_unknown_config_key(tmp_path, capsys):
    config = tmp_path / "bad.cfg"
    config.write_text("seed=1\nlearning_rate=0.1\n")
    assert main(["gen-data", "--config", str(config), "--out", str(tmp_path / "out")]) == 3
    line = _error_line(capsys)
    assert line.startswith("error category=config code=3")
    assert "bad.cfg:2" in line


def test_gen_data_is_reproducible(tmp_path):
    config = tmp_path / "small.cfg"
    config.write_text(SMALL_CONFIG)
    for name in ("a", "b"):
        assert main(["gen-data", "--config", str(config), "--out", str(tmp_path / name)]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len([f for f in files if f.suffix == ".ppm"]) == 6
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    assert len((tmp_path / "a" / "train.txt").read_text().splitlines()) == 4


def test_gen_data_empty_split(tmp_path):
    out = tmp_path / "empty"
    assert main(["gen-data", "--train-count", "0", "--val-count", "1", "--out", str(out)]) == 0
    assert (out / "train.txt").read_text() == ""
    assert len((out / "val.txt").read_text().splitlines()) == 1


def test_run_directories(runs):
    for name in ("teacher", "student0"):
        run = runs / name
        for artifact in ("config.txt", "epochs.tsv", "metrics.txt", "report.txt"):
            assert (run / artifact).is_file()
    assert (runs / "student0" / "student.afd").is_file()


def test_eval_reproduces_recorded_metrics(runs, tmp_path):
    config = runs / "small.cfg"
    out = tmp_path / "eval"
    ckpt = str(runs / "student0" / "student.afd")
    assert main(["eval", ckpt, "--config", str(config), "--batch-size", "2", "--out", str(out)]) == 0
    assert (out / "metrics.txt").read_text() == (runs / "student0" / "metrics.txt").read_text()

    data = tmp_path / "data"
    assert main(["gen-data", "--config", str(config), "--out", str(data)]) == 0
    manifest_out = tmp_path / "eval_manifest"
    argv = ["eval", ckpt, "--manifest", str(data / "val.txt")]
    assert main(argv + ["--batch-size", "2", "--out", str(manifest_out)]) == 0
    assert (manifest_out / "metrics.txt").read_text() == (out / "metrics.txt").read_text()


def test_eval_refuses_config_mismatch(runs, tmp_path, capsys):
    other = tmp_path / "other.cfg"
    other.write_text(SMALL_CONFIG + "train.lr0 = 0.01\n")
    ckpt = str(runs / "teacher" / "teacher.afd")
    assert main(["eval", ckpt, "--config", str(other)]) == 7
    assert _error_line(capsys).startswith("error category=checkpoint code=7")
    assert main(["eval", ckpt, "--config", str(other), "--force"]) == 0


def test_eval_missing_checkpoint(tmp_path, capsys):
    assert main(["eval", str(tmp_path / "none.afd")]) == 4
    assert "category=missing-file" in _error_line(capsys)


def test_viz_attn_is_deterministic(runs, tmp_path):
    data = tmp_path / "data"
    assert main(["gen-data", "--config", str(runs / "small.cfg"), "--out", str(data)]) == 0
    image = data / "val" / "00004.ppm"
    for name in ("a", "b"):
        argv = ["viz-attn", str(runs / "teacher" / "teacher.afd"), str(image), "--out", str(tmp_path / name)]
        assert main(argv) == 0
    written = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(written) == 12
    assert "00004_B_spatial.pgm" in written
    for name in written:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_viz_attn_student(runs, tmp_path):
    data = tmp_path / "data"
    assert main(["gen-data", "--config", str(runs / "small.cfg"), "--out", str(data)]) == 0
    argv = ["viz-attn", str(runs / "student1" / "student.afd"), str(data / "train" / "00000.ppm")]
    assert main(argv + ["--out", str(tmp_path / "viz")]) == 0
    written = sorted(p.name for p in (tmp_path / "viz").glob("*.pgm"))
    assert len(written) == 15
    assert "00000_B_raw.pgm" in written and "00000_B_projected.pgm" in written


def test_viz_attn_rejects_attention_transfer_student(runs, tmp_path, capsys):
    config = tmp_path / "at.cfg"
    config.write_text(SMALL_CONFIG + "method = at\n")
    teacher = str(runs / "teacher" / "teacher.afd")
    argv = ["distill", "--config", str(config), "--teacher", teacher, "--out", str(tmp_path / "at")]
    assert main(argv) == 0
    data = tmp_path / "data"
    assert main(["gen-data", "--config", str(config), "--out", str(data)]) == 0
    argv = ["viz-attn", str(tmp_path / "at" / "student.afd"), str(data / "train" / "00000.ppm")]
    assert main(argv + ["--out", str(tmp_path / "viz")]) == 3
    assert _error_line(capsys).startswith("error category=config code=3")


def test_aggregate(runs, tmp_path, capsys):
    out = tmp_path / "aggregate.txt"
    assert main(["aggregate", str(runs / "student0"), str(runs / "student1"), "--out", str(out)]) == 0
    assert "(2 seeds)" in capsys.readouterr().out
    assert "seeds=2" in out.read_text().splitlines()
