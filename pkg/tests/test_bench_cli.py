import csv
import subprocess
import sys
import time

import numpy as np
import pytest

from rodservo import bench, cli, fileio, latent
from rodservo.errors import ConfigError, Unreachable
from rodservo.rodsim import RodParams

SMALL = ["--n-points", "20"]


def run_cli(*argv):
    t0 = time.perf_counter()
    code = cli.main([str(a) for a in argv])
    return code, time.perf_counter() - t0


def write_config(path, **kv):
    path.write_text("".join(f"{k} = {v}\n" for k, v in kv.items()))
    return path


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def dataset_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds")
    code, _ = run_cli("gen-dataset", "--seed", 1, "--out-dir", d, "--n-samples", 600, *SMALL)
    assert code == 0
    return d / "dataset.txt"


# --- smoke tests, one per experiment kind ------------------------------------

def test_gen_dataset_deterministic(tmp_path):
    for sub in ("a", "b"):
        code, dt = run_cli("gen-dataset", "--seed", 1, "--out-dir", tmp_path / sub,
                           "--n-samples", 100, *SMALL)
        assert code == 0 and dt < 60
    a, b = (tmp_path / s / "dataset.txt" for s in ("a", "b"))
    assert a.read_bytes() == b.read_bytes()
    R, C = fileio.load_dataset(a)
    assert R.shape == (100, 2) and C.shape == (100, 40)


def test_train_dae_and_eval_features(tmp_path, dataset_file):
    cfg = write_config(tmp_path / "dae.cfg", epochs=3, batch_size=100, hidden="16,8")
    code, dt = run_cli("train-dae", "--config", cfg, "--out-dir", tmp_path,
                       "--dataset", dataset_file, "--p", 2)
    assert code == 0 and dt < 60
    model = fileio.load_model(tmp_path / "dae.txt")
    assert model.p == 2 and model.N == 20
    code, dt = run_cli("eval-features", "--out-dir", tmp_path, "--dataset", dataset_file,
                       "--models", tmp_path / "dae.txt", "--pca", "2,4", "--plotdata")
    assert code == 0 and dt < 60
    rows = read_csv(tmp_path / "features.csv")
    assert [r["method"] for r in rows] == ["DAE", "PCA", "PCA"]
    assert all(r["seed"] == "0" and len(r["config_hash"]) == 12 for r in rows)
    assert float(rows[2]["mean_error"]) <= float(rows[1]["mean_error"])
    dat = (tmp_path / "features.dat").read_text().splitlines()
    assert dat[0] == "# method dim mean_error" and len(dat[2].split()) == 3


def test_extract_centerline_synthetic(tmp_path):
    code, dt = run_cli("extract-centerline", "--out-dir", tmp_path, "--seed", 2)
    assert code == 0 and dt < 60
    pts = np.loadtxt(tmp_path / "centerline.txt")
    assert pts.shape == (50, 2)
    assert (tmp_path / "mask.pgm").read_text().startswith("P2")


def test_extract_centerline_from_mask_file(tmp_path):
    run_cli("extract-centerline", "--out-dir", tmp_path / "a", "--seed", 2)
    code, _ = run_cli("extract-centerline", "--out-dir", tmp_path / "b",
                      "--mask", tmp_path / "a" / "mask.pgm", "--neurons", 30)
    assert code == 0
    assert np.loadtxt(tmp_path / "b" / "centerline.txt").shape == (30, 2)


def test_validate_jacobian(tmp_path):
    cfg = write_config(tmp_path / "j.cfg", n_steps=24, pca_samples=120, n_points=20)
    code, dt = run_cli("validate-jacobian", "--config", cfg, "--out-dir", tmp_path, "--plotdata")
    assert code == 0 and dt < 60
    rows = read_csv(tmp_path / "jacobian.csv")
    assert len(rows) == 4 * 24
    assert {r["method"] for r in rows} == {"R1", "SR1", "DFP", "BFGS"}
    assert all(np.isfinite(float(r["T1"])) for r in rows)
    assert (tmp_path / "jacobian_BFGS.dat").read_text().startswith("# step T1 T2")


def test_servo(tmp_path):
    cfg = write_config(tmp_path / "s.cfg", pca_samples=120, n_points=20, max_steps=40,
                       target_command="0.38,0.43")
    code, dt = run_cli("servo", "--config", cfg, "--method", "bfgs", "--out-dir", tmp_path,
                       "--plotdata")
    assert code == 0 and dt < 60
    rows = read_csv(tmp_path / "trace.csv")
    assert rows[0]["step"] == "0" and set(rows[0]) >= {"T3", "feature_error_norm", "u_1", "u_2"}
    lines = (tmp_path / "trace_BFGS.dat").read_text().splitlines()
    assert lines[0] == "# step T3" and len(lines[2].split()) == 2


def test_servo_target_file(tmp_path):
    target = bench.RodPlant(RodParams(), (0.4, 0.4), N=20).measure()
    path = tmp_path / "target.txt"
    path.write_text(fileio.format_points(target.points))
    cfg = write_config(tmp_path / "s.cfg", pca_samples=120, n_points=20, max_steps=5)
    code, _ = run_cli("servo", "--config", cfg, "--method", "r1", "--target", path,
                      "--out-dir", tmp_path)
    assert code == 0


def test_stability_check(tmp_path):
    code, dt = run_cli("stability-check", "--out-dir", tmp_path, "--plotdata")
    assert code == 0 and dt < 60
    data = np.loadtxt(tmp_path / "stability.dat", usecols=(0, 1))
    assert data.shape == (101, 2) and np.all(np.diff(data[:, 1]) < 0)


# --- determinism and traceability -----------------------------------------------

def test_report_tables_bit_exact():
    spec = bench.ExperimentSpec("stability-check", {"p": "4", "q": "3"}, seed=5)
    a, b = bench.run(spec), bench.run(spec)
    assert a.tables["stability"].rows == b.tables["stability"].rows
    other = bench.ExperimentSpec("stability-check", {"p": "4", "q": "2"}, seed=5)
    assert other.hash != spec.hash
    assert all(r[-1] == spec.hash and r[-2] == 5 for r in a.tables["stability"].rows)


# --- configuration errors -------------------------------------------------------

@pytest.mark.parametrize("text", ["no equals sign\n", "a = 1\na = 2\n", " = 3\n"])
def test_parse_config_errors(text):
    with pytest.raises(ConfigError):
        bench.parse_config(text)


def test_parse_config_comments():
    assert bench.parse_config("# c\nn-samples = 10  # inline\n\nbox_lo = 0.2, 0.2\n") == \
        {"n_samples": "10", "box_lo": "0.2, 0.2"}


def test_flag_and_config_conflict(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.cfg", n_samples=10)
    code, _ = run_cli("gen-dataset", "--config", cfg, "--n-samples", 20, "--out-dir", tmp_path)
    assert code == 1
    assert "both" in capsys.readouterr().err


def test_missing_required_key(tmp_path, capsys):
    code, _ = run_cli("train-dae", "--out-dir", tmp_path)
    assert code == 1 and "dataset" in capsys.readouterr().err


def test_unknown_method(tmp_path):
    code, _ = run_cli("servo", "--method", "newton", "--out-dir", tmp_path)
    assert code == 1


def test_bad_kind():
    with pytest.raises(ConfigError):
        bench.ExperimentSpec("plot")


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "rodservo.cli", "stability-check",
                          "--out-dir", str(tmp_path)], capture_output=True, text=True)
    assert out.returncode == 0 and "config" in out.stdout


# --- protocol pieces ---------------------------------------------------------------

def test_circle_trajectory_closes():
    poses = bench.circle_trajectory((0.4, 0.4), 0.05, 360)
    assert poses.shape == (361, 2)
    assert np.max(np.abs(poses[-1] - poses[0])) <= 1e-9
    # counterclockwise: positive signed area
    x, y = poses[:-1].T
    assert 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y) > 0


def test_circle_trajectory_zero_radius():
    assert np.all(np.diff(bench.circle_trajectory((0.4, 0.4), 0.0, 10), axis=0) == 0)


def test_circle_trajectory_unreachable():
    with pytest.raises(Unreachable):
        bench.circle_trajectory((0.4, 0.4), 0.5, 10)


def test_emit_plotdata_empty_report(tmp_path):
    rep = bench.Report("servo", 0, "abc")
    with pytest.raises(ValueError):
        bench.emit_plotdata(rep, tmp_path)
    assert list(tmp_path.iterdir()) == []


def test_emit_plotdata_trace_two_columns(tmp_path):
    rep = bench.Report("servo", 3, "abc")
    rep.add("trace", ["step", "T3", "feature_error_norm", "u_1", "method"],
            [[0, 1.0, 0.5, 0.0, "BFGS"], [1, 0.5, 0.2, 0.01, "BFGS"]])
    (path,) = bench.emit_plotdata(rep, tmp_path)
    assert path.endswith("trace_BFGS.dat")
    assert np.loadtxt(path).tolist() == [[0, 1.0], [1, 0.5]]
