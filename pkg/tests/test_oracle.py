"""Tests for the dense reference implementations and closed-form benchmarks."""

import math
import pathlib

import numpy as np
import pytest

from tnmetro.channel import DephasingModel, build_dephasing_gates, channel_mpo
from tnmetro.networks import to_dense
from tnmetro.oracle import (
    BenchmarkFormulas as bf,
    DenseState,
    dephasing_derivative,
    exact_bayesian_cost,
    exact_channel,
    exact_fidelity_susceptibility,
    exact_optimal_qfi,
    exact_qfi,
    exact_sld,
    fom_value,
    load_fixture,
    sld_residual,
    xx_hamiltonian,
    xx_thermal_state,
)
from tnmetro.tensor import StructuralError

FIXTURES = pathlib.Path(__file__).parent / "fixtures"

SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
SZ = np.array([[1, 0], [0, -1]], dtype=complex)


def random_density_matrix(dim, rng, rank=None):
    a = rng.standard_normal((dim, rank or dim)) + 1j * rng.standard_normal((dim, rank or dim))
    rho = a @ a.conj().T
    return rho / np.trace(rho)


def collective_z(n):
    """H = Σ_n σ_z^[n]/2 as a diagonal dense matrix."""
    levels = np.array([0.5, -0.5])
    idx = np.indices([2] * n).reshape(n, -1).T
    return np.diag(levels[idx].sum(axis=1))


class TestDenseState:
    def test_valid_state_passes(self):
        rho = np.eye(4) / 4
        DenseState(rho, 2).validate()

    def test_from_pure_normalizes(self):
        st = DenseState.from_pure([2.0, 0.0])
        assert np.allclose(st.matrix, [[1, 0], [0, 0]])

    def test_non_hermitian_rejected(self):
        m = np.eye(2) / 2
        m[0, 1] = 0.1
        with pytest.raises(StructuralError):
            DenseState(m, 1).validate()

    def test_wrong_trace_rejected(self):
        with pytest.raises(StructuralError):
            DenseState(np.eye(2), 1).validate()

    def test_negative_eigenvalue_rejected(self):
        with pytest.raises(StructuralError):
            DenseState(np.diag([1.5, -0.5]), 1).validate()

    def test_shape_must_match_qubit_count(self):
        with pytest.raises(StructuralError):
            DenseState(np.eye(4) / 4, 1)


class TestExactChannel:
    def test_noiseless_is_identity_map(self):
        rng = np.random.default_rng(0)
        rho = DenseState(random_density_matrix(8, rng), 3)
        out = exact_channel(rho, DephasingModel(c1=0.0, c2=0.0), phi=0.0)
        assert np.allclose(out.matrix, rho.matrix, atol=1e-14)

    def test_single_qubit_off_diagonal_damping(self):
        plus = DenseState.from_pure([1, 1])
        out = exact_channel(plus, DephasingModel(c1=1.0, c2=0.0))
        assert out.matrix[0, 1] == pytest.approx(0.5 * math.exp(-0.5))
        assert out.matrix[0, 0] == pytest.approx(0.5)

    def test_three_site_ring_matches_gate_layer(self):
        rng = np.random.default_rng(3)
        model = DephasingModel(c1=1.0, c2=0.1)
        gates = build_dephasing_gates(model)
        rho = random_density_matrix(8, rng)
        for boundary in ("pbc", "obc"):
            layer = to_dense(channel_mpo(gates, 3, boundary=boundary, phi=0.3))
            # superoperator rows/columns interleave (row, col) indices per site
            vec = np.transpose(rho.reshape([2] * 6), (0, 3, 1, 4, 2, 5)).reshape(-1)
            out = layer @ vec
            expect = np.transpose(out.reshape([2] * 6), (0, 2, 4, 1, 3, 5)).reshape(8, 8)
            got = exact_channel(DenseState(rho, 3), model, phi=0.3, boundary=boundary)
            assert np.allclose(got.matrix, expect, atol=1e-10)

    def test_trace_and_positivity_preserved(self):
        rng = np.random.default_rng(7)
        model = DephasingModel(c1=0.8, c2=0.3)
        for _ in range(5):
            rho = DenseState(random_density_matrix(16, rng), 4)
            out = exact_channel(rho, model, phi=0.9)
            assert np.trace(out.matrix) == pytest.approx(1.0, abs=1e-12)
            assert np.linalg.eigvalsh(out.matrix).min() >= -1e-10
            out.validate()

    def test_dimension_guard(self):
        with pytest.raises(StructuralError):
            exact_channel(DenseState(np.eye(2**11) / 2**11, 11), DephasingModel(c1=1.0))


class TestExactSld:
    def test_maximally_mixed_qubit(self):
        l = exact_sld(np.eye(2) / 2, SX / 2)
        assert np.allclose(l, SX, atol=1e-12)

    def test_pure_state_is_twice_derivative(self):
        rng = np.random.default_rng(11)
        psi = rng.standard_normal(4) + 1j * rng.standard_normal(4)
        psi /= np.linalg.norm(psi)
        rho = np.outer(psi, psi.conj())
        h = collective_z(2)
        rho_prime = 1j * (rho @ h - h @ rho)
        l = exact_sld(rho, rho_prime)
        # on the support of a pure state, L acts as 2ρ'
        assert sld_residual(rho, rho_prime, l) <= 1e-8
        assert np.allclose(rho @ l @ rho, rho @ (2 * rho_prime) @ rho, atol=1e-10)

    def test_random_full_rank_residual(self):
        rng = np.random.default_rng(5)
        rho = random_density_matrix(4, rng)
        a = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
        rho_prime = (a + a.conj().T) / 2
        rho_prime -= np.trace(rho_prime) * np.eye(4) / 4
        l = exact_sld(rho, rho_prime)
        assert np.allclose(l, l.conj().T)
        assert sld_residual(rho, rho_prime, l) <= 1e-8

    def test_trace_pairing_is_real(self):
        rng = np.random.default_rng(13)
        rho = random_density_matrix(8, rng)
        rho_prime = dephasing_derivative(rho)
        l = exact_sld(rho, rho_prime)
        assert abs(np.trace(rho_prime @ l).imag) <= 1e-10

    def test_component_outside_support_reported_by_residual(self):
        rho = np.diag([1.0, 0.0]).astype(complex)
        rho_prime = SX / 2  # off-diagonal part straddles the kernel
        l = exact_sld(rho, rho_prime)
        assert np.all(np.isfinite(l))
        # the (1,1) corner of ρ' lives outside the support: residual is honest
        rho_prime_outside = np.diag([0.0, 1.0]).astype(complex)
        l2 = exact_sld(rho, rho_prime_outside)
        assert sld_residual(rho, rho_prime_outside, l2) == pytest.approx(1.0)


class TestExactQfi:
    def test_noiseless_ghz_reaches_heisenberg(self):
        ghz = np.zeros(8)
        ghz[0] = ghz[-1] = 1 / math.sqrt(2)
        rho = np.outer(ghz, ghz)
        rho_prime = dephasing_derivative(rho)
        assert exact_qfi(rho, rho_prime) == pytest.approx(9.0, abs=1e-8)

    def test_pure_state_variance_formula(self):
        rng = np.random.default_rng(17)
        h = collective_z(3)
        for _ in range(4):
            psi = rng.standard_normal(8) + 1j * rng.standard_normal(8)
            psi /= np.linalg.norm(psi)
            rho = np.outer(psi, psi.conj())
            rho_prime = 1j * (rho @ h - h @ rho)
            var = (psi.conj() @ h @ h @ psi - (psi.conj() @ h @ psi) ** 2).real
            assert exact_qfi(rho, rho_prime) == pytest.approx(4 * var, abs=1e-8)

    def test_single_qubit_dephased_plus_state(self):
        model = DephasingModel(c1=1.0, c2=0.0)
        rho = exact_channel(DenseState.from_pure([1, 1]), model).matrix
        rho_prime = dephasing_derivative(rho)
        assert exact_qfi(rho, rho_prime) == pytest.approx(math.exp(-1.0), abs=1e-10)

    def test_fom_never_exceeds_qfi(self):
        rng = np.random.default_rng(19)
        rho = random_density_matrix(4, rng)
        rho_prime = dephasing_derivative(rho)
        qfi = exact_qfi(rho, rho_prime)
        for _ in range(10):
            a = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
            l = (a + a.conj().T) / 2
            assert fom_value(rho, rho_prime, l) <= qfi + 1e-10


class TestExactOptimalQfi:
    def test_single_qubit_closed_form(self):
        qfi, _ = exact_optimal_qfi(DephasingModel(c1=1.0, c2=0.0), 1)
        assert qfi == pytest.approx(math.exp(-1.0), rel=1e-7)

    def test_noiseless_reaches_heisenberg_scaling(self):
        qfi, _ = exact_optimal_qfi(DephasingModel(c1=0.0, c2=0.0), 3)
        assert qfi == pytest.approx(9.0, rel=1e-7)

    def test_two_qubit_golden_fixture(self):
        fx = load_fixture(FIXTURES / "optimal_qfi_n2_c1_1.0_c2_0.2.txt")
        qfi, psi = exact_optimal_qfi(
            DephasingModel(c1=fx["c1"], c2=fx["c2"]), int(fx["n"]), boundary=fx["boundary"]
        )
        assert qfi == pytest.approx(fx["value"], abs=fx["tolerance"])
        assert np.linalg.norm(psi) == pytest.approx(1.0)

    def test_direct_state_search_agrees(self):
        # independent route: generic optimization over the probe state via
        # scipy, no SLD alternation involved
        from scipy.optimize import minimize

        model = DephasingModel(c1=1.0, c2=0.2)

        def negative_qfi(x):
            psi = x[:4] + 1j * x[4:]
            psi = psi / np.linalg.norm(psi)
            rho = exact_channel(DenseState.from_pure(psi), model).matrix
            return -exact_qfi(rho, dephasing_derivative(rho))

        rng = np.random.default_rng(23)
        best = min(
            minimize(negative_qfi, rng.standard_normal(8), method="Nelder-Mead",
                     options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000}).fun
            for _ in range(3)
        )
        qfi, _ = exact_optimal_qfi(model, 2)
        assert qfi == pytest.approx(-best, rel=1e-6)

    def test_negative_correlation_helps(self):
        up, _ = exact_optimal_qfi(DephasingModel(c1=1.0, c2=0.2), 2)
        down, _ = exact_optimal_qfi(DephasingModel(c1=1.0, c2=-0.2), 2)
        assert down > up

    def test_size_guard(self):
        with pytest.raises(StructuralError):
            exact_optimal_qfi(DephasingModel(c1=1.0), 7)


class TestExactBayesianCost:
    def test_zero_derivative_returns_prior_variance(self):
        rng = np.random.default_rng(29)
        rho_bar = random_density_matrix(4, rng)
        assert exact_bayesian_cost(rho_bar, np.zeros((4, 4)), 0.7) == pytest.approx(0.7)

    def test_commuting_diagonal_per_entry_optimization(self):
        p = np.array([0.5, 0.3, 0.2, 0.0])
        q = np.array([0.1, -0.05, -0.05, 0.0])
        expected_fom = sum(qi**2 / pi for qi, pi in zip(q, p) if pi > 0)
        cost = exact_bayesian_cost(np.diag(p), np.diag(q), 1.0)
        assert cost == pytest.approx(1.0 - expected_fom, abs=1e-10)

    def test_qubit_three_point_prior_matches_basis_search(self):
        # flat three-point prior over phases; independent route expands L in
        # the Pauli basis and solves the quadratic form directly
        model = DephasingModel(c1=0.5, c2=0.0)
        plus = DenseState.from_pure([1, 1])
        phases = np.array([-0.4, 0.0, 0.4])
        weights = np.full(3, 1 / 3)
        mean = weights @ phases
        rho_bar = sum(
            w * exact_channel(plus, model, phi=p).matrix for w, p in zip(weights, phases)
        )
        rho_bar_prime = sum(
            w * (p - mean) * exact_channel(plus, model, phi=p).matrix
            for w, p in zip(weights, phases)
        )
        prior_var = weights @ (phases - mean) ** 2

        basis = [np.eye(2, dtype=complex), SX, SY, SZ]
        v = np.array([np.trace(rho_bar_prime @ b).real for b in basis])
        m = np.array(
            [[np.trace(rho_bar @ (bi @ bj + bj @ bi)).real / 2 for bj in basis] for bi in basis]
        )
        x = np.linalg.lstsq(m, v, rcond=None)[0]
        brute_cost = prior_var - (2 * v @ x - x @ m @ x)

        cost = exact_bayesian_cost(rho_bar, rho_bar_prime, prior_var)
        assert cost == pytest.approx(brute_cost, abs=1e-10)
        assert cost < prior_var  # the measurement is informative


class TestFidelitySusceptibility:
    def test_identical_states_give_zero(self):
        rho = np.eye(4) / 4
        chi, chi_tilde = exact_fidelity_susceptibility(rho, rho, 1e-3)
        assert chi == pytest.approx(0.0, abs=1e-12)
        assert chi_tilde == pytest.approx(0.0, abs=1e-6)

    def test_pure_state_overlap_formula(self):
        rng = np.random.default_rng(31)
        h = collective_z(2)
        psi = rng.standard_normal(4) + 1j * rng.standard_normal(4)
        psi /= np.linalg.norm(psi)
        eps = 1e-5
        from scipy.linalg import expm

        psi_eps = expm(-1j * eps * h) @ psi
        dpsi = (psi_eps - psi) / eps
        overlap_chi = (dpsi.conj() @ dpsi - abs(psi.conj() @ dpsi) ** 2).real
        res = exact_fidelity_susceptibility(
            np.outer(psi, psi.conj()), np.outer(psi_eps, psi_eps.conj()), eps
        )
        assert res.chi == pytest.approx(overlap_chi, rel=1e-3)
        var = (psi.conj() @ h @ h @ psi - (psi.conj() @ h @ psi) ** 2).real
        assert res.chi == pytest.approx(var, rel=1e-3)
        # quasi-fidelity equals fidelity for pure states
        assert res.chi_tilde == pytest.approx(res.chi, rel=1e-3)

    @pytest.mark.parametrize("n", [4, 6, 8])
    @pytest.mark.parametrize("beta", [0.25, 1.0, 4.0])
    def test_xx_thermal_band(self, n, beta):
        eps = 1e-4
        rho = xx_thermal_state(n, beta, 0.0)
        rho_eps = xx_thermal_state(n, beta, eps)
        chi, chi_tilde = exact_fidelity_susceptibility(rho, rho_eps, eps)
        assert chi_tilde <= chi + 1e-6
        assert chi <= 2 * chi_tilde + 1e-6

    def test_regime_flag_trips_on_coarse_eps_only(self):
        rho = xx_thermal_state(4, 1.0, 0.0)
        res_fine = exact_fidelity_susceptibility(
            rho, xx_thermal_state(4, 1.0, 1e-4), 1e-4,
            rho_phi_half_eps=xx_thermal_state(4, 1.0, 5e-5),
        )
        assert res_fine.eps_regime_flagged is False
        res_coarse = exact_fidelity_susceptibility(
            rho, xx_thermal_state(4, 1.0, 1.0), 1.0,
            rho_phi_half_eps=xx_thermal_state(4, 1.0, 0.5),
        )
        assert res_coarse.eps_regime_flagged is True

    def test_eps_must_be_positive(self):
        rho = np.eye(2) / 2
        with pytest.raises(StructuralError):
            exact_fidelity_susceptibility(rho, rho, 0.0)


class TestXxThermalState:
    def test_infinite_temperature_is_maximally_mixed(self):
        st = xx_thermal_state(3, 0.0, 0.5)
        assert np.allclose(st.matrix, np.eye(8) / 8, atol=1e-12)

    def test_boltzmann_sum_energy(self):
        n, beta = 4, 1.0
        h = xx_hamiltonian(n, 0.3)
        w = np.linalg.eigvalsh(h)
        z = np.exp(-beta * (w - w[0]))
        expected_energy = (w * z).sum() / z.sum()
        st = xx_thermal_state(n, beta, 0.3)
        st.validate()
        assert np.trace(st.matrix @ h).real == pytest.approx(expected_energy, abs=1e-10)

    def test_strong_field_polarizes(self):
        phi = 25.0
        st = xx_thermal_state(3, 20.0, phi)
        minus = np.array([1, -1]) / math.sqrt(2)
        target = np.kron(np.kron(minus, minus), minus)
        fidelity = (target.conj() @ st.matrix @ target).real
        assert fidelity > 0.995

    def test_large_beta_does_not_overflow(self):
        st = xx_thermal_state(2, 1e6, 0.0)
        st.validate()

    def test_negative_beta_rejected(self):
        with pytest.raises(StructuralError):
            xx_thermal_state(2, -1.0, 0.0)


class TestBenchmarkFormulas:
    def test_local_formula_value(self):
        assert bf.qfi_local_per_particle(1.0) == pytest.approx(0.5820, abs=5e-5)

    def test_product_formula_value(self):
        assert bf.qfi_product_per_particle(1.0, 0.0) == pytest.approx(0.3679, abs=5e-5)

    def test_optimal_reduces_to_local_without_correlation(self):
        for c1 in (0.5, 1.0, 2.0):
            assert bf.qfi_optimal_per_particle(c1, 0.0) == pytest.approx(
                bf.qfi_local_per_particle(c1)
            )

    def test_optimal_continuous_at_correlation_bound(self):
        c1 = 1.0
        at_bound = bf.qfi_optimal_per_particle(c1, c1 / 2)
        near_bound = bf.qfi_optimal_per_particle(c1, c1 / 2 - 1e-9)
        assert math.isfinite(at_bound)
        assert at_bound == pytest.approx(near_bound, rel=1e-6)

    def test_optimal_dominates_product(self):
        for c1 in (0.5, 1.0, 2.0):
            for c2 in np.linspace(0.0, c1 / 2, 7):
                assert bf.qfi_optimal_per_particle(c1, c2) >= bf.qfi_product_per_particle(
                    c1, c2
                )

    def test_optimal_product_consistency_relation(self):
        for c1, c2 in [(0.5, 0.1), (1.0, -0.3), (2.0, 0.4)]:
            p = bf.qfi_product_per_particle(c1, c2)
            assert bf.qfi_optimal_per_particle(c1, c2) == pytest.approx(p / (1 - p))

    def test_all_outputs_positive(self):
        assert bf.eta(1.0) > 0
        assert bf.field_uncertainty_fixed_t(1.0, 0.1, 1.0, 0.5, 100) > 0
        assert bf.field_uncertainty_total_time(1.0, 0.1, 1.0, 0.5, 50.0, 100) > 0
        assert bf.field_uncertainty_optimal(1.0, 0.1, 50.0, 100) > 0
        assert bf.spin_squeezing(25.0, 50.0) > 0

    def test_short_interrogation_limit(self):
        # repeated short interrogations approach sqrt((σ²+2χ)/(T·N))
        sigma2, chi, g, total_time, n = 1.0, 0.1, 1.3, 40.0, 64
        limit = bf.field_uncertainty_optimal(sigma2, chi, total_time, n)
        short = bf.field_uncertainty_total_time(sigma2, chi, g, 1e-7, total_time, n)
        assert short == pytest.approx(limit, rel=1e-4)

    def test_ranged_formula_reduces_to_nearest_neighbour(self):
        a = bf.field_uncertainty_optimal_ranged(1.0, [0.1], 40.0, 64)
        b = bf.field_uncertainty_optimal(1.0, 0.1, 40.0, 64)
        assert a == pytest.approx(b)

    def test_coherent_spin_state_squeezing_is_unity(self):
        n = 10
        assert bf.spin_squeezing(n / 4, n / 2) == pytest.approx(1.0)
