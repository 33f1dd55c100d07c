import csv
import json

import numpy as np
import pytest

from qpballistic import MANIFEST_NAME, ExitCode
from qpballistic.cli import build_parser, main

FREE_ROTATION = {
    "potential": {},
    "energies": {"e_min": 0.5, "e_max": 4.0, "spacing": 0.1},
    "rotation": {"T": 50.0, "h": 0.05},
}

FREE_TRANSPORT = {
    "potential": {},
    "grid": {"half_length": 100.0, "n_points": 1024, "dt": 0.01, "T": 10.0},
    "energies": {"e_min": 0.09, "e_max": 12.25, "spacing": 0.01, "uniform_in": "rho"},
    "rotation": {"T": 50.0, "h": 0.05},
    "transform": {"cutoff_rho_c": 10.0, "max_spacing": 0.1, "diagonalization_time": 1.0},
}


def _write_config(tmp_path, data, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data, indent=2), encoding="utf-8")
    return str(path)


def _manifest(directory):
    return json.loads((directory / MANIFEST_NAME).read_text(encoding="utf-8"))


def _rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def test_parser_requires_config():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["rotation"])


def test_rotation_of_free_operator(tmp_path):
    out = tmp_path / "out"
    config = _write_config(tmp_path, FREE_ROTATION)
    assert main(["rotation", "--config", config, "--out", str(out)]) == ExitCode.ok

    rows = _rows(out / "rotation" / "rotation.csv")
    energies = np.array([float(r["E"]) for r in rows])
    rho = np.array([float(r["rho"]) for r in rows])
    np.testing.assert_allclose(rho, np.sqrt(energies), atol=1e-6)
    assert {r["class"] for r in rows} == {"spectrum"}
    assert {r["gap_k"] for r in rows} == {""}
    with open(out / "rotation" / "rotation.csv", newline="", encoding="utf-8") as f:
        assert next(csv.reader(f)) == ["E", "rho", "drho", "lyapunov", "class", "gap_k"]

    manifest = _manifest(out / "rotation")
    assert manifest["stages"] == {"rotation": "complete"}
    assert manifest["metrics"]["n_gaps"] == 0
    assert set(manifest["files"]) == {"rotation.csv", "gaps.csv", "rotation.dat", "rotation.svg"}


def test_unchanged_config_is_not_rerun(tmp_path):
    out = tmp_path / "out"
    config = _write_config(tmp_path, FREE_ROTATION)
    args = ["rotation", "--config", config, "--out", str(out)]
    assert main(args) == ExitCode.ok
    (out / "rotation" / "rotation.csv").unlink()

    assert main(args) == ExitCode.ok
    assert not (out / "rotation" / "rotation.csv").exists()

    assert main(args + ["--force"]) == ExitCode.ok
    assert (out / "rotation" / "rotation.csv").exists()


def test_missing_potential_file_exits_with_validation_code(tmp_path):
    config = _write_config(tmp_path, {"potential_file": "missing.json"})
    code = main(["rotation", "--config", config, "--out", str(tmp_path / "out")])
    assert code == ExitCode.validation


def test_report_finds_no_orphans(tmp_path):
    out = tmp_path / "out"
    config = _write_config(tmp_path, FREE_ROTATION)
    assert main(["rotation", "--config", config, "--out", str(out)]) == ExitCode.ok
    assert main(["report", "--out", str(out)]) == ExitCode.ok

    assert _rows(out / "report" / "orphans.csv") == []
    summary = _rows(out / "report" / "summary.csv")
    assert {"rotation"} == {r["command"] for r in summary}
    assert _manifest(out / "report")["metrics"]["n_orphans"] == 0


def test_report_flags_stray_files(tmp_path):
    out = tmp_path / "out"
    config = _write_config(tmp_path, FREE_ROTATION)
    main(["rotation", "--config", config, "--out", str(out)])
    (out / "rotation" / "stray.txt").write_text("left over", encoding="utf-8")
    assert main(["report", "--out", str(out)]) == ExitCode.ok
    assert [r["path"] for r in _rows(out / "report" / "orphans.csv")] == ["rotation/stray.txt"]


def test_report_without_outputs_exits_with_io_code(tmp_path):
    assert main(["report", "--out", str(tmp_path / "nowhere")]) == ExitCode.io


def test_reduce_of_free_operator(tmp_path):
    out = tmp_path / "out"
    config = _write_config(tmp_path, FREE_ROTATION)
    assert main(["reduce", "--config", config, "--out", str(out)]) == ExitCode.ok
    rows = _rows(out / "reduce" / "reduce.csv")
    assert {r["status"] for r in rows} == {"converged"}
    manifest = _manifest(out / "reduce")
    assert manifest["metrics"]["converged_fraction"] == 1.0
    reports = json.loads((out / "reduce" / "reductions.json").read_text(encoding="utf-8"))
    assert reports[0]["beta0"][0]["m"] == [0, 0]


def test_transport_of_free_packet(tmp_path):
    out = tmp_path / "out"
    config = _write_config(tmp_path, FREE_TRANSPORT)
    assert main(["transport", "--config", config, "--out", str(out), "--threads", "2"]) == ExitCode.ok

    metrics = _manifest(out / "transport")["metrics"]
    assert metrics["ratio"] == pytest.approx(1.0, abs=0.1)
    assert metrics["C"] == pytest.approx(2 * np.sqrt(4.0 + 1 / 8), rel=0.02)
    assert metrics["isometry"] == pytest.approx(1.0, abs=0.05)
    assert metrics["diagonalization_error"] <= 1e-6
    assert metrics["sandwich_lower"] == metrics["sandwich_upper"] == metrics["C"]
    for name in ("norms.csv", "frame.csv", "transform.csv", "diffusion.dat", "diffusion.svg"):
        assert (out / "transport" / name).exists()


def test_transport_without_late_window_fails(tmp_path):
    out = tmp_path / "out"
    data = dict(FREE_TRANSPORT, grid=dict(FREE_TRANSPORT["grid"], T=0.0))
    config = _write_config(tmp_path, data)
    assert main(["transport", "--config", config, "--out", str(out)]) == ExitCode.numerical
    manifest = _manifest(out / "transport")
    assert manifest["stages"]["slope"] == "failed"
    assert manifest["metrics"]["ratio"] is None

    assert main(["transport", "--config", config, "--out", str(out)]) == ExitCode.numerical
    assert _manifest(out / "transport")["stages"]["slope"] == "failed"


def test_integrals_of_free_operator(tmp_path):
    out = tmp_path / "out"
    data = {
        "potential": {},
        "energies": {"e_min": 0.01, "e_max": 1.0, "spacing": 0.01, "uniform_in": "rho"},
        "rotation": {"T": 50.0, "h": 0.05},
        "integrals": {"Ms": [2.0, 5.0, 10.0, 20.0]},
    }
    config = _write_config(tmp_path, data)
    assert main(["integrals", "--config", config, "--out", str(out)]) == ExitCode.ok

    rows = _rows(out / "integrals" / "integrals.csv")
    assert len(rows) == 3 * 3 * 4
    constant = [r for r in rows if r["f_kind"] == "const_one" and r["k"] == "0"]
    for row in constant:
        M = float(row["M"])
        assert float(row["value"]) == pytest.approx(np.sin(M) / M, abs=1e-9)
    assert len(_rows(out / "integrals" / "exponents.csv")) == 9
    assert _manifest(out / "integrals")["stages"]["integrals"] == "complete"


def _two_cosine(eps0):
    amplitude = eps0 / (2 * np.exp(0.5))
    return {
        "cosines": [
            {"k": [1, 0], "amplitude": amplitude},
            {"k": [0, 1], "amplitude": amplitude},
        ]
    }


def test_gap_labels_are_joined_with_semicolons(tmp_path):
    out = tmp_path / "out"
    data = {
        "potential": {"cosines": [{"k": [1, 0], "amplitude": 0.3}, {"k": [0, 1], "amplitude": 0.3}]},
        "energies": {"e_min": 9.5, "e_max": 10.5, "spacing": 0.02},
        "rotation": {"T": 500.0, "h": 0.02},
    }
    config = _write_config(tmp_path, data)
    assert main(["rotation", "--config", config, "--out", str(out)]) == ExitCode.ok
    assert [r["k"] for r in _rows(out / "rotation" / "gaps.csv")] == ["1;0"]
    rows = _rows(out / "rotation" / "rotation.csv")
    assert {r["gap_k"] for r in rows} == {"", "1;0"}
    assert all(r["class"] == "gap" for r in rows if r["gap_k"])


def test_containment_exits_with_numerical_code(tmp_path):
    out = tmp_path / "out"
    data = dict(
        FREE_TRANSPORT,
        grid={"half_length": 20.0, "n_points": 256, "dt": 0.01, "T": 10.0, "sample_stride": 5},
        packet={"width": 1.0, "momentum": 4.0},
        transform=dict(FREE_TRANSPORT["transform"], max_spacing=0.2),
    )
    config = _write_config(tmp_path, data)
    assert main(["transport", "--config", config, "--out", str(out)]) == ExitCode.numerical
    manifest = _manifest(out / "transport")
    assert manifest["stages"]["evolve"] == "flagged"
    assert (out / "transport" / "norms.csv").exists()


def test_unconverged_reduction_exits_with_numerical_code(tmp_path):
    out = tmp_path / "out"
    data = {
        "potential": _two_cosine(1e-3),
        "energies": {"e_min": 2.0, "e_max": 2.5, "spacing": 0.1},
        "rotation": {"T": 50.0, "h": 0.05},
        "schedule": {"max_steps": 1, "residual_target": 1e-30},
    }
    config = _write_config(tmp_path, data)
    assert main(["reduce", "--config", config, "--out", str(out)]) == ExitCode.numerical
    manifest = _manifest(out / "reduce")
    assert manifest["stages"]["reduce"] == "flagged"
    assert manifest["metrics"]["converged_fraction"] < 0.95
    assert (out / "reduce" / "reduce.csv").exists()


@pytest.mark.parametrize("eps0", [1e-3, 1e-2])
def test_transport_of_weak_potential(tmp_path, eps0):
    out = tmp_path / "out"
    config = _write_config(tmp_path, dict(FREE_TRANSPORT, potential=_two_cosine(eps0)))
    assert main(["transport", "--config", config, "--out", str(out), "--threads", "2"]) == ExitCode.ok

    metrics = _manifest(out / "transport")["metrics"]
    assert 0.9 <= metrics["ratio"] <= 1.1
    assert metrics["diagonalization_error"] <= 1e-3
    if eps0 == 1e-3:
        assert metrics["isometry"] == pytest.approx(1.0, abs=0.05)
        D = metrics["diffusion_norm"]
        assert abs(metrics["diffusion_transform"] - D) <= 0.05 * D + 0.05


def test_integrals_of_weak_potential_decay(tmp_path):
    out = tmp_path / "out"
    data = {
        "potential": _two_cosine(1e-3),
        "energies": {"e_min": 0.01, "e_max": 9.0, "spacing": 0.005, "uniform_in": "rho"},
        "rotation": {"T": 50.0, "h": 0.05},
        "transform": {"cutoff_rho_c": 10.0},
    }
    config = _write_config(tmp_path, data)
    assert main(["integrals", "--config", config, "--out", str(out), "--threads", "2"]) == ExitCode.ok
    exponents = _rows(out / "integrals" / "exponents.csv")
    assert len(exponents) == 9
    assert min(float(r["exponent"]) for r in exponents) >= 1.0
    assert _manifest(out / "integrals")["metrics"]["min_exponent"] >= 1.0


def test_integrals_on_default_energies(tmp_path):
    out = tmp_path / "out"
    config = _write_config(tmp_path, {"potential": {}, "rotation": {"T": 50.0, "h": 0.05}})
    assert main(["integrals", "--config", config, "--out", str(out)]) == ExitCode.ok
    assert _manifest(out / "integrals")["stages"]["integrals"] == "complete"
