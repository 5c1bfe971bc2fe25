import os

import numpy as np
import pytest

from enmloc import cli, evalio


def run_quiet(capsys, argv):
    code = cli.run(argv)
    return code, capsys.readouterr()


SIM_ARGS = ["simulate", "--world", "square", "--frames", "12", "--beams", "61"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One small end-to-end run shared by the smoke tests below."""
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    assert cli.run(SIM_ARGS + ["--out", str(data_dir), "--seed", "4"]) == 0
    ckpt = root / "map.ckpt"
    assert cli.run([
        "train", "--data", str(data_dir / "scans.txt"), "--out", str(ckpt),
        "--iters", "40", "--batch", "64", "--grid-res", "0.25", "--seed", "1",
    ]) == 0
    traj = root / "traj.txt"
    assert cli.run([
        "localize", "--data", str(data_dir / "scans.txt"), "--map", str(ckpt),
        "--out", str(traj), "--n-init", "500", "--n-track", "100",
        "--known-start", "--seed", "2",
    ]) == 0
    return root, data_dir, ckpt, traj


class TestPipeline:
    def test_simulate_outputs(self, pipeline):
        _, data_dir, _, _ = pipeline
        scans = evalio.read_dataset(data_dir / "scans.txt")
        assert len(scans) == 12
        assert scans[0].n_beams == 61
        assert (data_dir / "floorplan.txt").exists()

    def test_train_outputs(self, pipeline):
        root, _, ckpt, _ = pipeline
        model = evalio.load_checkpoint(ckpt)
        assert os.path.getsize(ckpt) == evalio.checkpoint_size(model)
        log = (str(ckpt) + ".log")
        assert os.path.exists(log)

    def test_localize_output_schema(self, pipeline):
        _, _, _, traj = pipeline
        lines = traj.read_text().strip().splitlines()
        assert len(lines) == 12
        assert all(len(line.split(",")) == 8 for line in lines)

    def test_eval_prints_metrics(self, pipeline, capsys):
        _, data_dir, _, traj = pipeline
        code, out = run_quiet(capsys, [
            "eval", "--est", str(traj), "--gt", str(data_dir / "scans.txt"),
        ])
        assert code == 0
        assert "loc_rmse_cm," in out.out
        assert "yaw_rmse_deg," in out.out
        assert "n_matched," in out.out
        assert "success," in out.out

    def test_render_writes_pgm_pair(self, pipeline):
        root, _, ckpt, _ = pipeline
        img = root / "field.pgm"
        assert cli.run(["render", "--map", str(ckpt), "--out", str(img), "--ppm", "5"]) == 0
        assert img.read_bytes().startswith(b"P5\n")
        assert (root / "field.pgm.contour.pgm").exists()


class TestDeterminism:
    def test_simulate_byte_identical(self, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.run(SIM_ARGS + ["--out", str(a), "--seed", "7"]) == 0
        assert cli.run(SIM_ARGS + ["--out", str(b), "--seed", "7"]) == 0
        capsys.readouterr()
        assert (a / "scans.txt").read_bytes() == (b / "scans.txt").read_bytes()
        assert (a / "floorplan.txt").read_bytes() == (b / "floorplan.txt").read_bytes()

    def test_different_seed_differs(self, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        cli.run(SIM_ARGS + ["--out", str(a), "--seed", "7"])
        cli.run(SIM_ARGS + ["--out", str(b), "--seed", "8"])
        capsys.readouterr()
        assert (a / "scans.txt").read_bytes() != (b / "scans.txt").read_bytes()

    def test_train_byte_identical(self, tmp_path, capsys):
        data = tmp_path / "data"
        cli.run(SIM_ARGS + ["--out", str(data), "--seed", "0"])
        args = ["train", "--data", str(data / "scans.txt"),
                "--iters", "25", "--batch", "32", "--grid-res", "0.25", "--seed", "3"]
        cli.run(args + ["--out", str(tmp_path / "a.ckpt")])
        cli.run(args + ["--out", str(tmp_path / "b.ckpt")])
        capsys.readouterr()
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


class TestConfigEcho:
    def test_defaults_are_printed(self, tmp_path, capsys):
        cli.run(SIM_ARGS + ["--out", str(tmp_path / "d"), "--seed", "0"])
        out = capsys.readouterr().out
        assert "command: simulate" in out
        assert "seed = 0" in out
        assert "range_noise = 0.01" in out  # default, not passed on the command line
        assert "dt = 0.1" in out


class TestExitCodes:
    def test_missing_data_file(self, capsys):
        code, _ = run_quiet(capsys, [
            "train", "--data", "/nonexistent/scans.txt", "--out", "/tmp/x.ckpt",
        ])
        assert code == 3

    def test_malformed_dataset(self, tmp_path, capsys):
        bad = tmp_path / "bad.txt"
        bad.write_text("this is not a scan line\n")
        code, captured = run_quiet(capsys, [
            "train", "--data", str(bad), "--out", str(tmp_path / "x.ckpt"),
        ])
        assert code == 4
        assert "error:" in captured.err

    def test_corrupt_checkpoint(self, tmp_path, capsys):
        data = tmp_path / "data"
        cli.run(SIM_ARGS + ["--out", str(data), "--seed", "0"])
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint")
        code, _ = run_quiet(capsys, [
            "localize", "--data", str(data / "scans.txt"), "--map", str(bad),
            "--out", str(tmp_path / "t.txt"),
        ])
        assert code == 4

    def test_unknown_world_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.run(["simulate", "--world", "atrium", "--out", "/tmp/x"])
        assert exc.value.code == 2
        capsys.readouterr()

    def test_missing_subcommand(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.run([])
        assert exc.value.code == 2
        capsys.readouterr()
