import json

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_fourier, random_spline, random_system
from magsens.fidelity import Gate, StateTransfer
from magsens.magnus import TimeGrid, expm_skew, propagate
from magsens.model import (
    ControlSystem,
    SplineField,
    constant_field,
    custom_drift_structure,
    preset_spin_ring,
    random_skew_hermitian,
    uncertainty_structure,
)
from magsens.sensitivity import (
    WrongKindError,
    coupling_coefficients,
    dexpm,
    dgamma_control,
    dgamma_drift,
    fd_oracle,
    fidelity_sensitivity,
    gate_sensitivity,
    infidelity_sensitivity,
    perturbation_derivatives,
    sensitivity_report,
    state_sensitivity,
    step_derivatives,
)

SX = np.array([[0, 1], [1, 0]], dtype=complex)
SZ = np.diag([1.0, -1.0]).astype(complex)


def quadrature_dexpm(G, dG, panels=10_000):
    s = (np.arange(panels) + 0.5) / panels
    total = np.zeros_like(dG)
    for si in s:
        total += scipy.linalg.expm((1 - si) * G) @ dG @ scipy.linalg.expm(si * G)
    return total / panels


def relerr(a, b):
    return abs(a - b) / abs(b)


class TestDgammaDrift:
    def test_constant_fields(self, rng):
        system = random_system(3, 2, rng)
        S = random_skew_hermitian(3, rng, unit=True)
        grid = TimeGrid(1.0, 5)
        fields = [constant_field(1.0, 0.4), constant_field(1.0, -1.2)]
        np.testing.assert_allclose(dgamma_drift(system, fields, 3, grid, S), grid.h * S, atol=1e-15)

    def test_commuting_structure(self, rng):
        system = ControlSystem(random_skew_hermitian(2, rng), (-1j * SZ,))
        S = -1j * SZ / np.sqrt(2)
        grid = TimeGrid(2.0, 8)
        fields = random_fourier(2.0, 1, rng)
        np.testing.assert_allclose(dgamma_drift(system, fields, 4, grid, S), grid.h * S, atol=1e-15)

    def test_spin_ring_first_step_hand_evaluated(self):
        system, _ = preset_spin_ring()
        fields = [SplineField(5.0, [1.0, -2.0, 0.5], [0.3, 1.0, 0.0, -1.0]),
                  SplineField(5.0, [-1.0, 0.5, 2.0], [-0.5, 0.0, 1.0, 0.2])]
        grid = TimeGrid(5.0, 150)
        h = grid.h
        S0 = uncertainty_structure(system, 0).matrix
        # S0 = -i H0 / sqrt(8); [S0, -i E_jj] = -[H0, E_jj] / sqrt(8)
        H0E11 = np.zeros((4, 4))
        H0E11[[1, 3], 0] = 1.0
        H0E11[0, [1, 3]] = -1.0
        H0E22 = np.zeros((4, 4))
        H0E22[[0, 2], 1] = 1.0
        H0E22[1, [0, 2]] = -1.0
        comm1 = -H0E11 / np.sqrt(8)
        comm2 = -H0E22 / np.sqrt(8)
        np.testing.assert_allclose(S0 @ system.controls[0] - system.controls[0] @ S0, comm1, atol=1e-15)
        u1, u2 = fields[0](h), fields[1](h)  # both fields vanish at t = 0
        # derivative of -h^2/12 [A_0, A_1] with both generators shifted by delta S0
        expected = h * S0 - h**2 / 12 * (u1 * comm1 + u2 * comm2)
        np.testing.assert_allclose(dgamma_drift(system, fields, 1, grid, S0), expected, atol=1e-15)

    def test_batched_agrees(self, rng):
        system = random_system(3, 2, rng)
        fields = random_spline(2.0, 2, rng)
        grid = TimeGrid(2.0, 9)
        prop = propagate(system, fields, grid)
        S = custom_drift_structure(random_skew_hermitian(3, rng))
        perts = perturbation_derivatives(system, prop, 0, S)
        for k in (1, 5, 9):
            np.testing.assert_allclose(perts.dgammas[k - 1], dgamma_drift(system, fields, k, grid, S), atol=1e-15)


class TestDgammaControl:
    def test_zero_field(self, rng):
        system = random_system(3, 2, rng)
        grid = TimeGrid(1.0, 4)
        fields = [constant_field(1.0, 0.0), constant_field(1.0, 3.0)]
        np.testing.assert_array_equal(dgamma_control(system, fields, 2, grid, 1), np.zeros((3, 3)))

    def test_constant_single_control(self, rng):
        system = random_system(3, 1, rng)
        grid = TimeGrid(1.0, 4)
        S = uncertainty_structure(system, 1).matrix
        np.testing.assert_allclose(
            dgamma_control(system, [constant_field(1.0, 0.7)], 3, grid, 1), 0.7 * grid.h * S, atol=1e-15
        )

    def test_coupling_hand_evaluated(self):
        # u1(t) = t, u2(t) = 1 gives J_(1,2) = t_{k-1} - t_k = -h on every step
        grid = TimeGrid(2.0, 8)
        fields = [SplineField(2.0, [2.0], [1.0, 1.0]), constant_field(2.0, 1.0)]
        knots = np.stack([f(grid.times) for f in fields])
        J = coupling_coefficients(knots, 1)
        np.testing.assert_allclose(J[1], -grid.h, atol=1e-15)
        np.testing.assert_allclose(J[0], 0.0, atol=1e-15)

    def test_drift_index_rejected(self, rng):
        system = random_system(2, 1, rng)
        with pytest.raises(WrongKindError):
            dgamma_control(system, [constant_field(1.0, 1.0)], 1, TimeGrid(1.0, 2), 0)

    def test_custom_structure_rejected_for_controls(self, rng):
        system = random_system(2, 1, rng)
        prop = propagate(system, [constant_field(1.0, 1.0)], TimeGrid(1.0, 2))
        with pytest.raises(WrongKindError):
            perturbation_derivatives(system, prop, 1, random_skew_hermitian(2, rng, unit=True))

    def test_batched_agrees(self, rng):
        system = random_system(3, 2, rng)
        fields = random_fourier(2.0, 2, rng)
        grid = TimeGrid(2.0, 9)
        prop = propagate(system, fields, grid)
        for mu in (1, 2):
            perts = perturbation_derivatives(system, prop, mu)
            for k in (1, 9):
                np.testing.assert_allclose(perts.dgammas[k - 1], dgamma_control(system, fields, k, grid, mu), atol=1e-15)

    def test_skew_hermitian(self, rng):
        system = random_system(4, 2, rng)
        prop = propagate(system, random_spline(3.0, 2, rng), TimeGrid(3.0, 20))
        for mu in range(3):
            dG = perturbation_derivatives(system, prop, mu).dgammas
            assert np.max(np.abs(dG + np.conj(np.swapaxes(dG, -1, -2)))) < 1e-12


class TestDexpm:
    def test_commuting(self, rng):
        G = -1j * np.diag(rng.normal(size=3))
        dG = -1j * np.diag(rng.normal(size=3))
        np.testing.assert_allclose(dexpm(G, dG), expm_skew(G) @ dG, atol=1e-14)

    def test_zero_gamma(self, rng):
        dG = random_skew_hermitian(3, rng)
        np.testing.assert_allclose(dexpm(np.zeros((3, 3)), dG), dG, atol=1e-15)

    def test_quadrature_oracle(self, rng):
        for _ in range(3):
            G = 2 * random_skew_hermitian(3, rng)
            dG = random_skew_hermitian(3, rng)
            np.testing.assert_allclose(dexpm(G, dG), quadrature_dexpm(G, dG), atol=1e-8)

    def test_degenerate_spectrum(self, rng):
        G = -1j * np.diag([1.0, 1.0, -0.5])
        dG = random_skew_hermitian(3, rng)
        np.testing.assert_allclose(dexpm(G, dG), quadrature_dexpm(G, dG, 4000), atol=1e-7)

    def test_directional_derivative(self, rng):
        G = random_skew_hermitian(4, rng)
        dG = random_skew_hermitian(4, rng)
        eps = 1e-6
        fd = (scipy.linalg.expm(G + eps * dG) - scipy.linalg.expm(G - eps * dG)) / (2 * eps)
        np.testing.assert_allclose(dexpm(G, dG), fd, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 6.0))
def test_step_generator_is_skew(seed, scale):
    rng = np.random.default_rng(seed)
    G = scale * random_skew_hermitian(3, rng)
    dG = random_skew_hermitian(3, rng)
    X = expm_skew(G).conj().T @ dexpm(G, dG)
    assert np.max(np.abs(X + X.conj().T)) < 1e-10


class TestVanishingSensitivity:
    def test_half_pulse_state_transfer(self, rng):
        system = ControlSystem(np.zeros((2, 2)), (-1j * SX,))
        t_final = 1.0
        fields = [constant_field(t_final, np.pi / (2 * t_final))]
        prop = propagate(system, fields, TimeGrid(t_final, 10))
        kind = StateTransfer([1, 0], [0, 1])
        assert kind.fidelity(prop.final) == pytest.approx(1.0, abs=1e-14)
        assert abs(state_sensitivity(prop, kind, perturbation_derivatives(system, prop, 1))) <= 1e-9
        for _ in range(10):
            S = custom_drift_structure(random_skew_hermitian(2, rng))
            assert abs(state_sensitivity(prop, kind, perturbation_derivatives(system, prop, 0, S))) <= 1e-9

    def test_drift_only_gate(self, rng):
        system = random_system(3, 1, rng)
        grid = TimeGrid(2.0, 20)
        prop = propagate(system, [constant_field(2.0, 0.0)], grid)
        kind = Gate(scipy.linalg.expm(2.0 * system.drift))
        assert kind.fidelity(prop.final) == pytest.approx(1.0, abs=1e-12)
        for mu in (0, 1):
            assert abs(gate_sensitivity(prop, kind, perturbation_derivatives(system, prop, mu))) <= 1e-10
        for _ in range(10):
            S = custom_drift_structure(random_skew_hermitian(3, rng))
            assert abs(gate_sensitivity(prop, kind, perturbation_derivatives(system, prop, 0, S))) <= 1e-10


class TestAgainstFiniteDifferences:
    @pytest.mark.parametrize("seed", range(4))
    def test_state(self, seed):
        rng = np.random.default_rng(seed)
        system = random_system(4, 2, rng)
        fields = random_spline(3.0, 2, rng)
        grid = TimeGrid(3.0, 40)
        kind = StateTransfer(np.eye(4)[0], np.eye(4)[3])
        prop = propagate(system, fields, grid)
        for mu in range(3):
            a = state_sensitivity(prop, kind, perturbation_derivatives(system, prop, mu))
            assert relerr(a, fd_oracle(system, fields, grid, kind, mu)) <= 1e-5

    @pytest.mark.parametrize("seed", range(4))
    def test_gate(self, seed):
        rng = np.random.default_rng(100 + seed)
        system = random_system(3, 2, rng)
        fields = random_fourier(2.0, 2, rng)
        grid = TimeGrid(2.0, 50)
        kind = Gate(expm_skew(random_skew_hermitian(3, rng)))
        prop = propagate(system, fields, grid)
        for mu in range(3):
            a = gate_sensitivity(prop, kind, perturbation_derivatives(system, prop, mu))
            assert relerr(a, fd_oracle(system, fields, grid, kind, mu)) <= 1e-5

    def test_custom_drift(self, rng):
        system = random_system(3, 1, rng)
        fields = random_spline(2.0, 1, rng)
        grid = TimeGrid(2.0, 30)
        kind = StateTransfer(np.eye(3)[0], np.eye(3)[2])
        S = custom_drift_structure(random_skew_hermitian(3, rng))
        prop = propagate(system, fields, grid)
        a = state_sensitivity(prop, kind, perturbation_derivatives(system, prop, 0, S))
        assert relerr(a, fd_oracle(system, fields, grid, kind, 0, structure=S)) <= 1e-5

    def test_richardson_on_spin_ring(self, rng):
        system, (psi0, psif) = preset_spin_ring()
        kind = StateTransfer(psi0, psif)
        grid = TimeGrid(5.0, 150)
        fields = random_spline(5.0, 2, rng, amp=3.0)
        prop = propagate(system, fields, grid)
        for mu in range(3):
            a = state_sensitivity(prop, kind, perturbation_derivatives(system, prop, mu))
            est = fd_oracle(system, fields, grid, kind, mu, richardson=True)
            assert abs(a - est) <= 1e-7


class TestOracle:
    def test_zero_delta(self, rng):
        system = random_system(2, 1, rng)
        kind = StateTransfer([1, 0], [0, 1])
        assert fd_oracle(system, [constant_field(1.0, 1.0)], TimeGrid(1.0, 4), kind, 0, delta=0.0) == 0.0

    def test_sign_flip(self, rng):
        system = random_system(3, 1, rng)
        fields = random_fourier(1.0, 1, rng)
        grid = TimeGrid(1.0, 20)
        kind = StateTransfer(np.eye(3)[0], np.eye(3)[1])
        S = custom_drift_structure(random_skew_hermitian(3, rng))
        plus = fd_oracle(system, fields, grid, kind, 0, structure=S)
        minus = fd_oracle(system, fields, grid, kind, 0, structure=custom_drift_structure(-S.matrix))
        assert minus == pytest.approx(-plus, rel=1e-6)


class TestSensitivityProperties:
    def test_gate_phase_invariance(self, rng):
        system = random_system(3, 2, rng)
        fields = random_fourier(2.0, 2, rng)
        prop = propagate(system, fields, TimeGrid(2.0, 30))
        target = expm_skew(random_skew_hermitian(3, rng))
        perts = perturbation_derivatives(system, prop, 1)
        a = gate_sensitivity(prop, Gate(target), perts)
        b = gate_sensitivity(prop, Gate(np.exp(1.1j) * target), perts)
        assert b == pytest.approx(a, rel=1e-12)

    def test_infidelity_negated(self, rng):
        system = random_system(3, 1, rng)
        prop = propagate(system, random_fourier(1.0, 1, rng), TimeGrid(1.0, 10))
        kind = StateTransfer(np.eye(3)[0], np.eye(3)[1])
        perts = perturbation_derivatives(system, prop, 0)
        assert infidelity_sensitivity(prop, kind, perts) == -fidelity_sensitivity(prop, kind, perts)

    def test_zero_perturbation(self, rng):
        system = random_system(3, 1, rng)
        prop = propagate(system, [constant_field(1.0, 0.0)], TimeGrid(1.0, 10))
        kind = StateTransfer(np.eye(3)[0], np.eye(3)[1])
        perts = perturbation_derivatives(system, prop, 1)
        assert state_sensitivity(prop, kind, perts) == 0.0

    def test_wrong_kind(self, rng):
        system = random_system(2, 1, rng)
        prop = propagate(system, [constant_field(1.0, 1.0)], TimeGrid(1.0, 4))
        perts = perturbation_derivatives(system, prop, 0)
        with pytest.raises(TypeError):
            state_sensitivity(prop, Gate(np.eye(2)), perts)

    def test_grid_mismatch(self, rng):
        system = random_system(2, 1, rng)
        fields = [constant_field(1.0, 1.0)]
        prop = propagate(system, fields, TimeGrid(1.0, 4))
        other = perturbation_derivatives(system, propagate(system, fields, TimeGrid(1.0, 5)), 0)
        with pytest.raises(ValueError):
            step_derivatives(prop, other)


class TestReport:
    def test_with_fd_check(self, rng):
        system = random_system(3, 2, rng)
        fields = random_fourier(2.0, 2, rng)
        kind = Gate(expm_skew(random_skew_hermitian(3, rng)))
        report = sensitivity_report(system, fields, TimeGrid(2.0, 40), kind, fd_check=True)
        assert set(report.analytic) == {0, 1, 2}
        assert max(report.discrepancy.values()) <= 1e-5
        data = json.loads(report.to_json())
        assert set(data) == {"fidelity", "delta", "analytic", "finite_difference", "discrepancy"}

    def test_without_fd_check(self, rng):
        system = random_system(2, 1, rng)
        report = sensitivity_report(system, random_fourier(1.0, 1, rng), TimeGrid(1.0, 10), StateTransfer([1, 0], [0, 1]))
        assert report.discrepancy == {}
        assert "discrepancy" not in report.to_dict()
