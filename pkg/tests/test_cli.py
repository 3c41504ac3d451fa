import csv

import pytest

from dsobench.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main


def test_usage_errors(capsys, tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["bogus"]) == EXIT_USAGE
    assert main(["run", "--dataset", str(tmp_path)]) == EXIT_USAGE          # missing --mode/--out
    assert main(["run", "--dataset", str(tmp_path), "--mode", "rgbd", "--out", "x"]) == EXIT_USAGE
    assert "usage error" in capsys.readouterr().err


def test_config_errors_exit_usage(tmp_path):
    assert main(["report", "--in", str(tmp_path / "nope"), "--out", str(tmp_path / "s.csv")]) == EXIT_USAGE
    bad = tmp_path / "scene.txt"
    bad.write_text("no equals sign here\n")
    assert main(["generate", "--scene", str(bad), "--out", str(tmp_path / "d")]) == EXIT_USAGE


def test_missing_dataset_is_runtime_error(tmp_path, capsys):
    code = main(["run", "--dataset", str(tmp_path / "missing"), "--mode", "stereo", "--out", str(tmp_path / "o")])
    assert code == EXIT_RUNTIME
    assert "calib.txt" in capsys.readouterr().err


@pytest.mark.slow
def test_end_to_end_commands(tmp_path):
    traj = tmp_path / "traj.txt"
    traj.write_text("max_frames = 4\n")
    data, run, rep = tmp_path / "data", tmp_path / "run", tmp_path / "rep"
    assert main(["generate", "--traj", str(traj), "--out", str(data)]) == EXIT_OK
    assert main(["fuse-gt", "--dataset", str(data), "--stride", "4", "--out", str(tmp_path / "gt.pcd")]) == EXIT_OK
    assert main(["run", "--dataset", str(data), "--mode", "stereo", "--out", str(run)]) == EXIT_OK
    for name in ("map.pcd", "map.ply", "keyframes.csv", "tracking.csv", "trajectory.csv", "run.txt"):
        assert (run / name).exists()
    assert main(["evaluate", "--map", str(run / "map.pcd"), "--gt", str(tmp_path / "gt.pcd"),
                 "--dataset", str(data), "--out", str(rep), "--max-iter", "50"]) == EXIT_OK
    assert (rep / "accuracy.csv").exists()
    summary = tmp_path / "summary.csv"
    assert main(["report", "--in", str(rep), "--out", str(summary)]) == EXIT_OK
    rows = list(csv.DictReader(open(summary)))
    assert len(rows) == 1
