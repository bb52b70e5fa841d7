import hashlib
import json
import os

import numpy as np
import pytest

from koopctl.cli import main
from koopctl.clf import QuadraticCLF
from koopctl.errors import ConfigurationError, DependencyError, DesignFailureError, ParseError
from koopctl.lifting import BilinearModel
from koopctl.pipeline import (
    RunConfig,
    cmd_design,
    cmd_identify,
    cmd_report,
    cmd_simulate,
    convergence_time,
    count_v_increases,
    load_config,
    read_trajectory_csv,
    run_all,
)


def small_pendulum(out, **overrides):
    raw = {
        "system": {"name": "pendulum"},
        "data": {"sampling": "scatter", "M": 3000, "dt": 0.01, "seed": 0},
        "dictionary": {"D": 3},
        "clf": {"c_min": 0.1, "c_max": 0.15},
        "simulate": {"count": 2, "seed": 1, "T": 1.0, "dt": 0.01, "lqr": {"Q": [[1, 0], [0, 0]], "R": 1}},
        "output": str(out),
    }
    for key, value in overrides.items():
        raw[key] = value
    return raw


def write_config(tmp_path, raw, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return str(path)


def digest_dir(path):
    out = {}
    for name in sorted(os.listdir(path)):
        out[name] = hashlib.sha256((path / name).read_bytes()).hexdigest()
    return out


# config -------------------------------------------------------------------


def test_config_defaults(tmp_path):
    cfg = RunConfig.from_dict({"system": {"name": "vanderpol"}})
    assert cfg.section("data")["dt"] == 1e-4
    assert cfg.section("data")["T_final"] == 10.0
    assert cfg.section("dictionary")["D"] == 5
    assert cfg.section("clf")["gamma"] == 2.0
    assert cfg.section("clf")["gamma_schedule"] == [2.0, 4.0, 1.0, 8.0, 0.5, 16.0, 0.25, 32.0]
    assert RunConfig.from_dict({"system": {"name": "lorenz"}}).section("data")["dt"] == 1e-3


@pytest.mark.parametrize("raw", [
    {"system": {"name": "pendulum"}, "extra": 1},
    {"system": {"name": "pendulum"}, "data": {"bogus": 1}},
    {"system": {"name": "pendulum"}, "clf": {"gain": "ten"}},
    {"system": {"name": "pendulum"}, "clf": {"controller": "pid"}},
    {"system": {"name": "pendulum"}, "clf": {"c_min": 2.0, "c_max": 1.0}},
    {"system": {"name": "pendulum"}, "data": {"box": [[-1, 1]]}},
    {"system": {"name": "pendulum"}, "data": {"sampling": "scatter"}},
    {"system": {"name": "pendulum"}, "simulate": {"initial_conditions": [[1, 2, 3]]}},
    {"system": {"name": "pendulum"}, "simulate": {"lqr": {"Q": [[1]], "R": 1}}},
    {"system": {"name": "pendulum"}, "simulate": {"lqr": {"S": 1}}},
    {"system": {"name": "pendulum"}, "dictionary": {"D": True}},
    {"system": {"name": "nope"}},
    {"data": {}},
    [],
])
def test_config_rejects(raw):
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict(raw)


def test_config_malformed_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{")
    with pytest.raises(ParseError):
        load_config(path)


def test_config_hash_ignores_output(tmp_path):
    a = RunConfig.from_dict(small_pendulum("a"))
    b = RunConfig.from_dict(small_pendulum("b"))
    assert a.digest == b.digest
    c = RunConfig.from_dict(small_pendulum("a", dictionary={"D": 4}))
    assert a.digest != c.digest


# helpers ------------------------------------------------------------------


def test_convergence_time():
    t = np.arange(6.0)
    X = np.array([[1.0], [0.01], [0.2], [0.01], [0.0], [0.0]])
    assert convergence_time(t, X) == 3.0
    assert convergence_time(t, np.ones((6, 1))) is None
    assert convergence_time(t, np.zeros((6, 1))) == 0.0


def test_count_v_increases():
    assert count_v_increases([3.0, 2.0, 1.0, 1.0]) == 0
    assert count_v_increases([1.0, 1.0 + 1e-7, 2.0, 1.0]) == 1


# stages -------------------------------------------------------------------


def test_identify_scalar_linear_benchmark(tmp_path):
    raw = {
        "system": {"name": "linear", "params": {"A": [[-1.0]], "g": [1.0]}},
        "data": {"sampling": "scatter", "M": 500, "dt": 0.1, "box": [[-2, 2]]},
        "dictionary": {"D": 2},
        "output": str(tmp_path),
    }
    model = cmd_identify(RunConfig.from_dict(raw))
    lam = np.diag(model.A)
    assert np.min(np.abs(lam + 1.0)) <= 1e-4
    assert model.span_residual == 0.0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["stages"]["identify"]["B_path"] == "exact"


def test_identify_pendulum_dimension(tmp_path):
    model = cmd_identify(RunConfig.from_dict(small_pendulum(tmp_path, dictionary={"D": 5})))
    assert model.N <= 20
    data = json.loads((tmp_path / "model.json").read_text())
    assert data["dictionary"] == {"n": 2, "D": 5}
    assert len(data["eigenvalues"]) == 21


def test_identify_lsq_path(tmp_path):
    cfg = RunConfig.from_dict(small_pendulum(tmp_path, lifting={"B_method": "lsq"}))
    model = cmd_identify(cfg)
    assert model.span_residual <= 1e-8
    assert json.loads((tmp_path / "manifest.json").read_text())["stages"]["identify"]["B_path"] == "lsq"


def test_design_toy_model_file(tmp_path):
    BilinearModel(-np.eye(3), np.eye(3), None).save(tmp_path / "model.json")
    raw = {"system": {"name": "pendulum"}, "clf": {"c_min": 0.1, "c_max": 10.0}, "output": str(tmp_path)}
    clf = cmd_design(RunConfig.from_dict(raw))
    np.testing.assert_allclose(clf.P, 10 * np.eye(3), atol=1e-5)
    assert clf.diagnostics["certificate"] == "sampled"
    assert QuadraticCLF.load(tmp_path / "clf.json").t_opt == clf.t_opt


def test_design_failure_lists_witnesses(tmp_path):
    BilinearModel(np.diag([1.0, -1.0]), np.zeros((2, 2)), None).save(tmp_path / "model.json")
    raw = {"system": {"name": "pendulum"}, "clf": {"n_samples": 100}, "output": str(tmp_path)}
    with pytest.raises(DesignFailureError) as info:
        cmd_design(RunConfig.from_dict(raw))
    assert len(info.value.witnesses) == 8
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["stages"]["design"]["status"] == "failed"


def test_design_malformed_model(tmp_path):
    (tmp_path / "model.json").write_text(json.dumps({"A": [[1.0]], "B": [[1.0, 2.0]]}))
    raw = {"system": {"name": "pendulum"}, "output": str(tmp_path)}
    with pytest.raises(ParseError) as info:
        cmd_design(RunConfig.from_dict(raw))
    assert info.value.field == "B"


@pytest.mark.parametrize("stage", [cmd_design, cmd_simulate])
def test_stage_dependencies(tmp_path, stage):
    with pytest.raises(DependencyError):
        stage(RunConfig.from_dict({"system": {"name": "pendulum"}, "output": str(tmp_path)}))


def test_report_on_empty_directory(tmp_path):
    with pytest.raises(DependencyError):
        cmd_report(RunConfig.from_dict({"system": {"name": "pendulum"}, "output": str(tmp_path)}))
    with pytest.raises(DependencyError):
        cmd_report(RunConfig.from_dict({"system": {"name": "pendulum"}, "output": str(tmp_path / "none")}))


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = RunConfig.from_dict(small_pendulum(out))
    run_all(cfg)
    return out


def test_run_artifacts(finished_run):
    names = set(os.listdir(finished_run))
    assert {"model.json", "koopman.json", "clf.json", "simulation.json", "summary.json",
            "manifest.json", "trajectories", "overlays"} <= names
    traj = sorted(os.listdir(finished_run / "trajectories"))
    assert traj == ["closed_000.csv", "closed_001.csv", "lqr_000.csv", "lqr_001.csv",
                    "open_000.csv", "open_001.csv"]
    manifest = json.loads((finished_run / "manifest.json").read_text())
    assert set(manifest["stages"]) == {"identify", "design", "simulate", "report"}
    assert len(manifest["config_hash"]) == 64


def test_trajectory_csv_format(finished_run):
    path = finished_run / "trajectories" / "closed_000.csv"
    text = path.read_text()
    assert "\r" not in text
    header, data = read_trajectory_csv(path)
    assert header == ["t", "x_1", "x_2", "u", "V"]
    assert data.shape == (101, 5)
    first = text.splitlines()[2].split(",")
    assert float(first[0]) == 0.01
    # 17 significant digits round-trip every value exactly
    for field in text.splitlines()[5].split(","):
        assert float(f"{float(field):.17g}") == float(field)
    assert np.all(data[:, 4] >= 0)


def test_open_loop_companion_has_zero_input(finished_run):
    _, data = read_trajectory_csv(finished_run / "trajectories" / "open_000.csv")
    assert not data[:, 3].any()


def test_report_summary(finished_run):
    summary = json.loads((finished_run / "summary.json").read_text())
    assert set(summary["groups"]) == {"closed", "open", "lqr"}
    assert "lqr_comparison" in summary
    overlay = (finished_run / "overlays" / "ic_000.csv").read_text().splitlines()
    assert overlay[0] == "t,norm_closed,norm_open,norm_lqr"


def test_simulation_is_byte_reproducible(finished_run, tmp_path):
    cfg = RunConfig.from_dict(small_pendulum(tmp_path))
    run_all(cfg)
    assert digest_dir(tmp_path / "trajectories") == digest_dir(finished_run / "trajectories")


def test_thread_cap_does_not_change_output(finished_run, tmp_path, monkeypatch):
    monkeypatch.setenv("KOOPCTL_THREADS", "1")
    cfg = RunConfig.from_dict(small_pendulum(tmp_path))
    run_all(cfg)
    assert digest_dir(tmp_path / "trajectories") == digest_dir(finished_run / "trajectories")


def test_stage_rerun_uses_persisted_artifacts(finished_run):
    cfg = RunConfig.from_dict(small_pendulum(finished_run))
    before = digest_dir(finished_run / "trajectories")
    cmd_simulate(cfg)
    assert digest_dir(finished_run / "trajectories") == before


# CLI ----------------------------------------------------------------------


def diverging(out):
    return {
        "system": {"name": "linear", "params": {"A": [[2.0]], "g": [1.0]}},
        "data": {"sampling": "scatter", "M": 300, "dt": 0.05, "box": [[-1, 1]]},
        "dictionary": {"D": 2},
        "clf": {"gain": 1e-9},
        "simulate": {"initial_conditions": [[0.5], [0.0]], "T": 5.0, "dt": 0.01, "blowup": 10.0},
        "output": str(out),
    }


def test_cli_full_run(tmp_path, capsys):
    path = write_config(tmp_path, small_pendulum(tmp_path / "cfg_out"))
    out = tmp_path / "override"
    for cmd in ("identify", "design", "simulate", "report"):
        assert main([cmd, "--config", path, "--out", str(out)]) == 0
    assert (out / "summary.json").exists()
    assert not (tmp_path / "cfg_out").exists()


def test_cli_validation_exit_code(tmp_path, capsys):
    path = write_config(tmp_path, {"system": {"name": "pendulum"}, "surprise": True})
    assert main(["identify", "--config", path]) == 2
    assert "surprise" in capsys.readouterr().err
    assert main(["identify", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["frobnicate", "--config", path]) == 2


def test_cli_dependency_exit_code(tmp_path):
    path = write_config(tmp_path, small_pendulum(tmp_path / "empty"))
    assert main(["simulate", "--config", path]) == 2
    assert main(["report", "--config", path]) == 2


def test_cli_design_failure_exit_code(tmp_path):
    BilinearModel(np.diag([1.0, -1.0]), np.zeros((2, 2)), None).save(tmp_path / "model.json")
    path = write_config(tmp_path, {"system": {"name": "pendulum"}, "clf": {"n_samples": 50},
                                   "output": str(tmp_path)})
    assert main(["design", "--config", path]) == 3


def test_cli_divergence_exit_codes(tmp_path, capsys):
    path = write_config(tmp_path, diverging(tmp_path / "run"))
    assert main(["identify", "--config", path]) == 0
    assert main(["design", "--config", path]) == 0
    assert main(["simulate", "--config", path]) == 4
    assert "closed_000" in capsys.readouterr().err
    assert main(["simulate", "--config", path, "--lenient"]) == 0
    assert main(["report", "--config", path]) == 0
    summary = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert summary["groups"]["closed"]["diverged"] == ["closed_000"]
    assert summary["warnings"]


def test_cli_bad_thread_setting(tmp_path, monkeypatch):
    path = write_config(tmp_path, diverging(tmp_path / "run"))
    assert main(["identify", "--config", path]) == 0
    assert main(["design", "--config", path]) == 0
    monkeypatch.setenv("KOOPCTL_THREADS", "zero")
    assert main(["simulate", "--config", path]) == 2
