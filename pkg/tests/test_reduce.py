import numpy as np
import pytest
from pydantic import ValidationError
from scipy.stats import qmc

from qpballistic import (
    FourierSeries,
    FrequencyVector,
    HyperbolicInput,
    KamSchedule,
    KamState,
    NotConverged,
    QuasiPeriodicPotential,
    ReductionStatus,
    analytic_norm,
    bloch_from_reduction,
    bloch_residual,
    contraction_exponents,
    conjugation_residual,
    homological_solve,
    kam_step,
    reduce_cocycle,
    reduce_energies,
    schrodinger_matrix,
)

GOLDEN = FrequencyVector.golden(2)
CENTER = GOLDEN.omega[1] / 2  # √E at the center of the k=(0,1) gap


def _weak_potential(amplitude=1e-3):
    return QuasiPeriodicPotential.from_cosines(GOLDEN, {(0, 1): amplitude})


def _weak_perturbation(amplitude=1e-3):
    block = np.array([[0.0, 0.0], [amplitude / 2, 0.0]])
    return FourierSeries(freq=GOLDEN, modes=[[0, -2], [0, 2]], coeffs=[block, block])


def _schedule(V):
    return KamSchedule(eps0=analytic_norm(V))


@pytest.fixture(scope="module")
def weak():
    return _weak_potential()


@pytest.fixture(scope="module")
def converged(weak):
    return reduce_cocycle(2.0, weak, _schedule(weak))


def test_schedule_truncation_is_clipped():
    schedule = KamSchedule(eps0=0.5)
    assert schedule.truncation(0) == 12
    assert schedule.truncation(schedule.max_steps - 1) == schedule.grid_size // 4
    assert schedule.eps_j[1] == pytest.approx(0.5**1.02)


@pytest.mark.parametrize("kwargs", [{"eps0": 1.0}, {"eps0": 0.5, "grid_size": 100}])
def test_schedule_raises_exception(kwargs):
    with pytest.raises(ValidationError):
        KamSchedule(**kwargs)


def test_homological_solve_of_zero_is_zero():
    empty = FourierSeries(freq=GOLDEN, modes=np.zeros((0, 2)), coeffs=np.zeros((0, 2, 2)))
    Y, removed = homological_solve(schrodinger_matrix(2.0), empty, GOLDEN, 12, 1e-6)
    assert Y.modes.shape == (0, 2)
    assert removed == []


def test_homological_solve_satisfies_mode_equation():
    A = schrodinger_matrix(2.0)
    F = _weak_perturbation()
    Y, removed = homological_solve(A, F, GOLDEN, 12, 1e-6)
    assert removed == []
    for m, Ym in zip(Y.modes, Y.coeffs):
        nu = m @ GOLDEN.omega / 2
        defect = 1j * nu * Ym - (A @ Ym - Ym @ A) - F.coefficient(m)
        assert np.max(np.abs(defect)) < 1e-12


def test_homological_solve_diverts_resonant_modes():
    freq = FrequencyVector.golden(1)
    alpha = freq.omega[0] / 2
    block = np.array([[0.0, 0.0], [1e-3, 0.0]])
    F = FourierSeries(freq=freq, modes=[[-2], [2]], coeffs=[block, block])
    _, removed = homological_solve(schrodinger_matrix(alpha**2), F, freq, 12, 1e-6)
    assert [2] in removed


def test_homological_solve_raises_exception_on_hyperbolic_matrix():
    with pytest.raises(HyperbolicInput):
        homological_solve(schrodinger_matrix(-1.0), _weak_perturbation(), GOLDEN, 12, 1e-6)


def test_kam_step_keeps_free_cocycle():
    empty = FourierSeries(freq=GOLDEN, modes=np.zeros((0, 2)), coeffs=np.zeros((0, 2, 2)))
    step = kam_step(KamState(A=schrodinger_matrix(2.0), F=empty), KamSchedule(eps0=0.5), 0)
    np.testing.assert_array_equal(step.A, schrodinger_matrix(2.0))
    assert step.f_next_norm == 0.0


def test_kam_step_contracts_quadratically():
    state = KamState(A=schrodinger_matrix(2.0), F=_weak_perturbation())
    step = kam_step(state, KamSchedule(eps0=1e-3), 0)
    assert step.resonance is None
    assert step.f_norm == pytest.approx(1e-3)
    assert step.f_next_norm <= step.f_norm**1.4


def test_kam_step_detects_resonance():
    state = KamState(A=schrodinger_matrix((CENTER + 5e-4) ** 2), F=_weak_perturbation())
    step = kam_step(state, KamSchedule(eps0=1e-3), 0)
    assert step.resonance == [0, 1]
    assert np.linalg.det(step.A) > 0


def test_gap_center_is_skipped(weak):
    result = reduce_cocycle(CENTER**2, weak, _schedule(weak))
    assert result.status == ReductionStatus.resonant_skipped
    assert result.resonances[0][1] == [0, 1]


def test_free_reduction_is_exact():
    V = QuasiPeriodicPotential.zero(GOLDEN)
    result = reduce_cocycle(3.0, V, KamSchedule(eps0=0.5))
    assert result.status == ReductionStatus.converged
    assert result.steps == 0
    assert result.residual < 1e-14
    assert result.alpha == pytest.approx(np.sqrt(3.0))


@pytest.mark.parametrize("E", [-1.0, 0.0])
def test_free_reduction_skips_energies_below_spectrum(E):
    V = QuasiPeriodicPotential.zero(GOLDEN)
    result = reduce_cocycle(E, V, KamSchedule(eps0=0.5))
    assert result.status == ReductionStatus.resonant_skipped
    assert result.alpha == 0.0


def test_weak_potential_converges(converged, weak):
    assert converged.status == ReductionStatus.converged
    assert converged.residual < 1e-8
    assert 1 <= converged.steps <= 4
    assert converged.alpha == pytest.approx(np.sqrt(2.0), abs=1e-4)
    assert conjugation_residual(converged.Y, converged.B, 2.0, weak) == converged.residual


def test_residual_of_identity_is_potential_size(weak):
    A0 = schrodinger_matrix(2.0)
    phi = 2 * np.pi * qmc.Halton(d=2, scramble=False).random(256)
    expected = np.max(np.abs(1e-3 * np.cos(2 * phi[:, 1])))
    residual = conjugation_residual(FourierSeries.identity(GOLDEN), A0, 2.0, weak)
    assert residual == pytest.approx(expected, rel=1e-12)


def test_contraction_exponents_exceed_one(converged):
    exponents = contraction_exponents(converged)
    assert exponents.size >= 1
    assert exponents[0] >= 1.3


def test_reduce_energies_keeps_order(weak):
    results = reduce_energies([2.0, 3.0], weak, _schedule(weak))
    assert [r.E for r in results] == [2.0, 3.0]


def test_free_bloch_coefficients_are_trivial():
    V = QuasiPeriodicPotential.zero(GOLDEN)
    bloch = bloch_from_reduction(reduce_cocycle(4.0, V, KamSchedule(eps0=0.5)), rho=2.0)
    x = np.linspace(0, 10, 21)
    beta0, beta1 = bloch.values(x)
    np.testing.assert_allclose(beta0, 1.0, atol=1e-14)
    np.testing.assert_allclose(beta1, 0.0, atol=1e-14)
    assert bloch.rho == 2.0


def test_bloch_wave_solves_equation(converged, weak):
    bloch = bloch_from_reduction(converged, rho=np.sqrt(2.0))
    x = np.linspace(0, 100, 2001)
    assert bloch_residual(bloch, weak, x) < 1e-6
    beta0, beta1 = bloch.values(x)
    assert np.max(np.abs(beta0 - 1)) <= 0.1
    assert np.max(np.abs(beta1)) <= 0.1
    assert not bloch.smoothing_applied


def test_smoothing_damps_near_resonant_coefficients(converged):
    near = converged.model_copy(update={"resonances": [(0, [0, 1])], "xi": 0.01})
    bloch = bloch_from_reduction(near, rho=np.sqrt(2.0), smoothing=True)
    assert bloch.smoothing_applied
    assert np.max(np.abs(bloch.beta0.coeffs)) <= 1e-15
    assert not bloch_from_reduction(near, rho=np.sqrt(2.0)).smoothing_applied


def test_bloch_raises_exception_when_not_converged(converged):
    diverged = converged.model_copy(update={"status": ReductionStatus.diverged})
    with pytest.raises(NotConverged):
        bloch_from_reduction(diverged, rho=np.sqrt(2.0))


def test_reduced_matrix_eigenvector(converged):
    B, alpha = converged.B, converged.alpha
    v = np.array([B[0, 1], 1j * alpha - B[0, 0]])
    np.testing.assert_allclose(B @ v, 1j * alpha * v, atol=1e-12)
    assert alpha > 0


def test_weak_two_cosine_potential_converges_quickly():
    amplitude = 1e-3 / (2 * np.exp(0.5))
    V = QuasiPeriodicPotential.from_cosines(GOLDEN, {(1, 0): amplitude, (0, 1): amplitude})
    assert analytic_norm(V) == pytest.approx(1e-3)
    results = reduce_energies(np.linspace(2.2, 3.3, 30), V, _schedule(V))
    clean = [r for r in results if not r.near_resonant]
    assert len(clean) >= 20
    fast = [
        r
        for r in clean
        if r.status == ReductionStatus.converged and r.steps <= 3 and r.residual < 1e-8
    ]
    assert len(fast) >= 0.95 * len(clean)
