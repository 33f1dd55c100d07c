import json

import numpy as np
import pytest

from qpballistic import (
    ConfigError,
    EnergyGridSpec,
    PotentialSpec,
    ScheduleSpec,
    analytic_norm,
    config_hash,
    load_config,
)


def _write(path, data):
    path.write_text(json.dumps(data, indent=2), encoding="utf-8")
    return path


def test_loads_valid_config(tmp_path):
    path = _write(
        tmp_path / "run.json",
        {
            "potential": {"cosines": [{"k": [1, 0], "amplitude": 0.1}]},
            "grid": {"n_points": 1024, "T": 5.0},
        },
    )
    config = load_config(path)
    assert config.grid.n_points == 1024
    assert config.grid.dt == 0.005
    assert analytic_norm(config.potential.to_potential()) == pytest.approx(0.1 * np.exp(0.5))


def test_unknown_key_raises_exception_with_line(tmp_path):
    path = tmp_path / "run.json"
    path.write_text('{\n  "potential": {},\n  "bogus": 1\n}\n', encoding="utf-8")
    with pytest.raises(ConfigError) as error:
        load_config(path)
    assert "line 3" in error.value.messages[0]
    assert "bogus" in error.value.messages[0]


def test_syntax_error_reports_line(tmp_path):
    path = tmp_path / "run.json"
    path.write_text('{\n  "potential": {},\n  oops\n}\n', encoding="utf-8")
    with pytest.raises(ConfigError) as error:
        load_config(path)
    assert "line 3" in str(error.value)


def test_loads_potential_file(tmp_path):
    _write(tmp_path / "V.json", {"cosines": [{"k": [0, 1], "amplitude": 0.2}]})
    config = load_config(_write(tmp_path / "run.json", {"potential_file": "V.json"}))
    assert config.potential.cosines[0].amplitude == 0.2


def test_missing_potential_file_raises_exception(tmp_path):
    path = _write(tmp_path / "run.json", {"potential_file": "missing.json"})
    with pytest.raises(ConfigError) as error:
        load_config(path)
    assert "does not exist" in str(error.value)
    assert "line 2" in str(error.value)


def test_both_potentials_raise_exception(tmp_path):
    _write(tmp_path / "V.json", {})
    path = _write(tmp_path / "run.json", {"potential": {}, "potential_file": "V.json"})
    with pytest.raises(ConfigError):
        load_config(path)


@pytest.mark.parametrize(
    "data",
    [
        {"potential": {}, "integrals": {"Ms": [0.5, 10.0]}},
        {"potential": {}, "grid": {"n_points": 1000}},
        {"potential": {"cosines": [{"k": [1], "amplitude": 0.1}]}},
        {"potential": {}, "energies": {"e_min": 2.0, "e_max": 1.0}},
    ],
)
def test_invalid_values_raise_exception(tmp_path, data):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path / "run.json", data))


def test_config_hash_follows_content_and_seed(tmp_path):
    first = load_config(_write(tmp_path / "a.json", {"potential": {}}))
    second = load_config(_write(tmp_path / "b.json", {"potential": {}}))
    changed = load_config(_write(tmp_path / "c.json", {"potential": {}, "grid": {"T": 1.0}}))
    assert config_hash(first) == config_hash(second)
    assert config_hash(first) != config_hash(changed)
    assert config_hash(first, seed=1) != config_hash(first)


def test_energy_grid_uniform_in_rho():
    spec = EnergyGridSpec(e_min=0.25, e_max=4.0, spacing=0.5, uniform_in="rho")
    np.testing.assert_allclose(spec.energies(), [0.25, 1.0, 2.25, 4.0])


def test_energy_grid_refines_near_edges():
    spec = EnergyGridSpec(e_min=0.0, e_max=1.0, spacing=0.5, refinement=0.01, refine_width=0.05)
    energies = spec.energies([0.5])
    assert energies.size > 3
    assert np.all(np.diff(energies) > 0)
    assert np.any(np.isclose(energies, 0.47))
    assert spec.energies().tolist() == [0.0, 0.5, 1.0]


def test_energy_grid_refines_by_default():
    spec = EnergyGridSpec(e_min=0.0, e_max=1.0, spacing=0.5)
    assert spec.refinement == 1e-3
    energies = spec.energies([0.5])
    assert np.min(np.diff(energies)) == pytest.approx(1e-3, abs=1e-9)
    assert EnergyGridSpec(refinement=None).energies([0.5]).size == EnergyGridSpec().energies().size


def test_schedule_uses_potential_norm():
    weak = PotentialSpec(cosines=[{"k": [1, 0], "amplitude": 0.01}]).to_potential()
    assert ScheduleSpec().to_schedule(weak).eps0 == pytest.approx(analytic_norm(weak))
    free = PotentialSpec().to_potential()
    assert ScheduleSpec().to_schedule(free).eps0 == 0.5


def test_strong_potential_raises_exception():
    strong = PotentialSpec(cosines=[{"k": [1, 0], "amplitude": 2.0}]).to_potential()
    with pytest.raises(ConfigError):
        ScheduleSpec().to_schedule(strong)
