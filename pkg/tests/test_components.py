import numpy as np
import pytest
from pydantic import ValidationError

from qpballistic import FourierSeries, FrequencyVector, GapLabel
from qpballistic.components import Component, ComplexArray, RealArray
from qpballistic.validators import (
    validate_shape,
    validate_strictly_increasing,
    validate_traceless,
    validator,
)


class Sample(Component):
    values: RealArray
    spectrum: ComplexArray

    _validate_values = validator("values", validate_strictly_increasing)


def test_builds_arrays_as_lists():
    assert Sample(values=[1, 2, 3], spectrum=[1 + 2j]).build() == {
        "values": [1.0, 2.0, 3.0],
        "spectrum": {"re": [1.0], "im": [2.0]},
    }


def test_builds_nested_components():
    assert GapLabel(e_min=1.0, e_max=1.5, k=[0, 1], level=1.94, deviation=0.0).build() == {
        "e_min": 1.0,
        "e_max": 1.5,
        "k": [0, 1],
        "level": 1.94,
        "deviation": 0.0,
    }


def test_arrays_are_read_only():
    sample = Sample(values=[1, 2], spectrum=[0j])
    with pytest.raises(ValueError):
        sample.values[0] = 5.0


def test_copies_input_arrays():
    source = np.array([1.0, 2.0])
    sample = Sample(values=source, spectrum=[0j])
    source[0] = 10.0
    assert sample.values[0] == 1.0


def test_real_array_rejects_complex_values():
    with pytest.raises(ValidationError):
        Sample(values=[1 + 1j, 2], spectrum=[0j])


def test_validator_raises_exception():
    with pytest.raises(ValidationError):
        Sample(values=[2, 1], spectrum=[0j])


def test_components_are_frozen():
    sample = Sample(values=[1, 2], spectrum=[0j])
    with pytest.raises(ValidationError):
        sample.values = np.array([3.0])


def test_validate_shape_allows_wildcards():
    assert validate_shape(np.zeros((4, 2)), shape=(None, 2)).shape == (4, 2)
    with pytest.raises(ValueError):
        validate_shape(np.zeros((4, 3)), shape=(None, 2))


def test_validate_traceless_raises_exception():
    validate_traceless(np.array([[1.0, 2.0], [3.0, -1.0]]))
    with pytest.raises(ValueError):
        validate_traceless(np.array([[1.0, 0.0], [0.0, 1.0]]))


def test_series_grid_round_trip_keeps_modes():
    freq = FrequencyVector(omega=[1.0, np.sqrt(2.0)])
    series = FourierSeries(freq=freq, modes=[[0, 0], [1, -2], [-1, 2]], coeffs=[0.5, 0.25j, -0.25j])
    restored = FourierSeries.from_grid(series.to_grid(16), freq, n_trunc=7, prune=1e-12)
    assert restored.modes.tolist() == [[-1, 2], [0, 0], [1, -2]]
    np.testing.assert_allclose(restored.coefficient([1, -2]), 0.25j, atol=1e-15)


def test_series_derivative_follows_half_frequencies():
    freq = FrequencyVector(omega=[2.0])
    series = FourierSeries(freq=freq, modes=[[3]], coeffs=[1.0])
    x = np.linspace(0, 5, 11)
    np.testing.assert_allclose(series.derivative().at_x(x), 3j * np.exp(3j * x), atol=1e-12)


def test_series_conjugate_and_shift():
    freq = FrequencyVector(omega=[1.0])
    series = FourierSeries(freq=freq, modes=[[1], [2]], coeffs=[1.0, 2j])
    x = np.array([0.3, 1.1])
    np.testing.assert_allclose(series.conjugate().at_x(x), np.conj(series.at_x(x)))
    np.testing.assert_allclose(series.shifted([1]).at_x(x), series.at_x(x) * np.exp(-0.5j * x))
