"""Tests for the finite-chain QFI optimizer.

Every numerical expectation here is checked against dense linear algebra on
the full 2^N Hilbert space: the closed-form dephasing channel, the SLD from
the dense Lyapunov solve, and exact eigendecompositions.  The tensor-network
code under test shares no code path with those oracles.
"""

import math

import numpy as np
import pytest

from tnmetro import oracle
from tnmetro.channel import DephasingModel, build_dephasing_gates
from tnmetro.finite import (
    FomProblem,
    OptimizationConfig,
    SldMpo,
    _compress_mpo_links,
    build_dual_operators,
    evaluate_fom,
    expand_sld_bonds,
    expand_state_bonds,
    initial_sld,
    initial_state,
    make_problem,
    optimize_input_state,
    optimize_sld_sweep,
    report_to_text,
    run_qfi_optimization,
    save_report,
    sld_site_residuals,
)
from tnmetro.networks import (
    MPO,
    MPS,
    entropy_profile,
    identity_mpo,
    mpo_add,
    mpo_expectation,
    network_from_text,
    state_from_dense,
    state_to_dense,
    to_dense,
    transfer_matrix,
)
from tnmetro.tensor import ConvergenceError, StructuralError

MODEL = DephasingModel(c1=1.0, c2=0.1)
MODEL_NEG = DephasingModel(c1=1.0, c2=-0.3)
MODEL_FREE = DephasingModel(c1=0.0, c2=0.0)
E_INV = math.exp(-1.0)

SX = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)

# orthonormal Hermitian basis {I, X, Y, Z}/sqrt(2), used to factor a dense
# Hermitian operator into an MPO whose every site equals its own
# conjugate-physical-swap (the gauge the SLD routines require)
PAULI = (
    np.array(
        [np.eye(2), [[0, 1], [1, 0]], [[0, -1j], [1j, 0]], [[1, 0], [0, -1]]],
        dtype=complex,
    )
    / math.sqrt(2)
)


def gauge_sld_from_dense(op, n):
    """Factor a dense Hermitian operator into an SldMpo site by site.

    Expanding in the Hermitian Pauli basis leaves a real coefficient tensor;
    an SVD train over that tensor yields real-linked site matrices, so each
    site tensor is invariant under conjugate-physical-swap by construction.
    """
    t = np.asarray(op, dtype=complex).reshape([2] * n + [2] * n)
    perm = [x for i in range(n) for x in (i, n + i)]
    t = t.transpose(perm).reshape([4] * n)
    for i in range(n):
        t = np.moveaxis(
            np.tensordot(t, PAULI.conj().reshape(4, 4), axes=([i], [1])), -1, i
        )
    coeff = t.real
    arrays = []
    carry = coeff.reshape(1, -1)
    for _ in range(n - 1):
        m = carry.reshape(carry.shape[0] * 4, -1)
        u, s, vh = np.linalg.svd(m, full_matrices=False)
        keep = s >= 1e-12 * (s[0] if s.size else 1.0)
        u, s, vh = u[:, keep], s[keep], vh[keep]
        arrays.append(u.reshape(-1, 4, u.shape[1]))
        carry = s[:, None] * vh
    arrays.append(carry.reshape(carry.shape[0], 4, 1))
    out = [np.einsum("lpr,pjk->lrjk", a, PAULI) for a in arrays]
    return SldMpo(MPO(out, "obc"))


def random_gauge_sld(n, d_l, rng):
    """Random observable MPO already in the Hermitian site gauge."""
    caps = [1] + [min(d_l, 4 ** min(i + 1, n - i - 1)) for i in range(n - 1)] + [1]
    arrays = []
    for i in range(n):
        shape = (caps[i], caps[i + 1], 2, 2)
        a = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        arrays.append((a + a.conj().transpose(0, 1, 3, 2)) / 2)
    return SldMpo(MPO(arrays, "obc"))


def ghz_mps(n):
    """(|0…0⟩ + |1…1⟩)/√2 with bond dimension 2."""
    first = np.zeros((1, 2, 2))
    first[0, 0, 0] = 1.0
    first[0, 1, 1] = 1.0
    mid = np.zeros((2, 2, 2))
    mid[0, 0, 0] = 1.0
    mid[1, 1, 1] = 1.0
    last = np.zeros((2, 1, 2))
    last[0, 0, 0] = 1.0 / math.sqrt(2)
    last[1, 0, 1] = 1.0 / math.sqrt(2)
    return MPS([first] + [mid] * (n - 2) + [last], "obc")


def random_state(n, rng):
    vec = rng.standard_normal(2**n) + 1j * rng.standard_normal(2**n)
    vec /= np.linalg.norm(vec)
    return vec


def dense_hamiltonian(n):
    """Σ_k σ_z^{(k)}/2 on n qubits."""
    h = np.zeros((2**n, 2**n), dtype=complex)
    for k in range(n):
        ops = [np.eye(2)] * n
        ops[k] = np.diag([0.5, -0.5])
        term = ops[0]
        for o in ops[1:]:
            term = np.kron(term, o)
        h += term
    return h


def dense_problem(vec, model, boundary="pbc"):
    """Channel output and its φ-derivative from the dense oracle."""
    rho = oracle.exact_channel(np.outer(vec, vec.conj()), model, 0.0, boundary).matrix
    rho_prime = oracle.dephasing_derivative(rho)
    return rho, rho_prime


class TestSldMpo:
    def test_gauge_residual_zero_for_filtered_sites(self):
        l = random_gauge_sld(4, 3, np.random.default_rng(0))
        assert l.gauge_residual() <= 1e-14
        l.check_gauge()

    def test_check_gauge_rejects_asymmetric_sites(self):
        rng = np.random.default_rng(1)
        arrays = [rng.standard_normal((1, 2, 2, 2)) + 1j * rng.standard_normal((1, 2, 2, 2)),
                  rng.standard_normal((2, 1, 2, 2)) + 1j * rng.standard_normal((2, 1, 2, 2))]
        l = SldMpo(MPO(arrays, "obc"))
        assert l.gauge_residual() > 1e-3
        with pytest.raises(StructuralError):
            l.check_gauge()

    def test_d_l_is_maximal_link_dimension(self):
        l = random_gauge_sld(4, 4, np.random.default_rng(2))
        assert l.d_l == 4
        assert l.n_sites == 4

    def test_dense_roundtrip_through_gauge_factorization(self):
        rng = np.random.default_rng(3)
        for n in (1, 2, 3, 4):
            m = rng.standard_normal((2**n, 2**n)) + 1j * rng.standard_normal((2**n, 2**n))
            m = m + m.conj().T
            l = gauge_sld_from_dense(m, n)
            assert l.gauge_residual() <= 1e-12
            np.testing.assert_allclose(to_dense(l.mpo), m, atol=1e-12 * np.abs(m).max())


class TestFomProblem:
    def test_qfi_mode_requires_unit_trace(self):
        eye = identity_mpo(2, 2)
        with pytest.raises(StructuralError, match="trace"):
            FomProblem(rho=eye, rho_prime=eye, generator=MODEL.generator)

    def test_unknown_mode_rejected(self):
        eye = identity_mpo(2, 2)
        with pytest.raises(StructuralError, match="mode"):
            FomProblem(rho=eye, rho_prime=eye, generator=MODEL.generator, mode="banana")

    def test_bayesian_mode_accepts_unnormalized_input(self):
        eye = identity_mpo(2, 2)
        prob = FomProblem(rho=eye, rho_prime=eye, generator=MODEL.generator, mode="bayesian")
        assert prob.mode == "bayesian"

    def test_derivative_mpo_matches_dense_oracle(self):
        vec = random_state(3, np.random.default_rng(4))
        psi = state_from_dense(vec, 3, 2)
        prob = make_problem(psi, MODEL)
        rho_d, rho_prime_d = dense_problem(vec, MODEL)
        np.testing.assert_allclose(to_dense(prob.rho), rho_d, atol=1e-12)
        np.testing.assert_allclose(to_dense(prob.derivative_mpo()), rho_prime_d, atol=1e-12)


class TestOptimizationConfig:
    def test_rejects_bad_scalars(self):
        with pytest.raises(StructuralError):
            OptimizationConfig(kappa=0.0)
        with pytest.raises(StructuralError):
            OptimizationConfig(kappa=2.0)
        with pytest.raises(StructuralError):
            OptimizationConfig(rel_tol=0.0)
        with pytest.raises(StructuralError):
            OptimizationConfig(eps=-1e-3)
        with pytest.raises(StructuralError):
            OptimizationConfig(max_outer_iters=0)

    def test_rejects_bad_schedules(self):
        with pytest.raises(StructuralError):
            OptimizationConfig(d_psi_schedule=())
        with pytest.raises(StructuralError):
            OptimizationConfig(d_l_schedule=(4, 2))
        with pytest.raises(StructuralError):
            OptimizationConfig(d_psi_schedule=(0, 2))

    def test_schedules_coerced_to_int_tuples(self):
        cfg = OptimizationConfig(d_psi_schedule=[2, 4], d_l_schedule=[2])
        assert cfg.d_psi_schedule == (2, 4)
        assert cfg.d_l_schedule == (2,)


class TestEvaluateFom:
    def test_zero_observable_gives_zero(self):
        psi = initial_state(3)
        prob = make_problem(psi, MODEL)
        zero = SldMpo(MPO([np.zeros((1, 1, 2, 2), dtype=complex)] * 3, "obc"))
        assert evaluate_fom(prob, zero) == pytest.approx(0.0, abs=1e-15)

    def test_single_qubit_exact_sld_reaches_qfi(self):
        # one dephased equatorial qubit: the optimum is e^{-c1}
        psi = initial_state(1)
        prob = make_problem(psi, DephasingModel(c1=1.0, c2=0.0), boundary="obc")
        rho_d, rho_prime_d = dense_problem(state_to_dense(psi), DephasingModel(c1=1.0, c2=0.0), "obc")
        l = gauge_sld_from_dense(oracle.exact_sld(rho_d, rho_prime_d), 1)
        fom = evaluate_fom(prob, l)
        assert fom == pytest.approx(oracle.exact_qfi(rho_d, rho_prime_d), rel=1e-12)
        assert fom == pytest.approx(E_INV, rel=1e-12)

    def test_noiseless_pair_optimal_observable_reaches_four(self):
        psi = ghz_mps(2)
        prob = make_problem(psi, MODEL_FREE)
        rho_d, rho_prime_d = dense_problem(state_to_dense(psi), MODEL_FREE)
        l = gauge_sld_from_dense(oracle.exact_sld(rho_d, rho_prime_d), 2)
        assert evaluate_fom(prob, l) == pytest.approx(4.0, rel=1e-10)

    @pytest.mark.parametrize("n", [3, 4, 5])
    def test_matches_dense_on_random_inputs(self, n):
        rng = np.random.default_rng(10 + n)
        vec = random_state(n, rng)
        psi = state_from_dense(vec, n, 2)
        prob = make_problem(psi, MODEL_NEG)
        l = random_gauge_sld(n, 3, rng)
        rho_d, rho_prime_d = dense_problem(vec, MODEL_NEG)
        expect = oracle.fom_value(rho_d, rho_prime_d, to_dense(l.mpo))
        assert evaluate_fom(prob, l) == pytest.approx(expect, rel=1e-9)

    def test_imaginary_figure_of_merit_raises(self):
        psi = initial_state(3)
        prob = make_problem(psi, MODEL)
        bad_arrays = [a.copy() for a in prob.rho_prime.arrays]
        bad_arrays[0] = 1j * bad_arrays[0]
        bad = FomProblem(
            rho=prob.rho,
            rho_prime=MPO(bad_arrays, prob.rho_prime.boundary),
            generator=prob.generator,
        )
        l = expand_sld_bonds(initial_sld(MODEL, 3), 2, np.random.default_rng(1))
        with pytest.raises(ConvergenceError):
            evaluate_fom(bad, l)


class TestSldSweep:
    def test_single_qubit_sweep_reaches_exact_qfi(self):
        model = DephasingModel(c1=1.0, c2=0.0)
        prob = make_problem(initial_state(1), model, boundary="obc")
        l, fom = optimize_sld_sweep(prob, initial_sld(model, 1), OptimizationConfig(rel_tol=1e-12), max_sweeps=10)
        assert fom == pytest.approx(E_INV, rel=1e-10)

    def test_ghz_three_noiseless_reaches_heisenberg_value(self):
        # the N-flip coherence of a GHZ probe is invisible to strictly local
        # starts (zero gradient everywhere); the randomized bond expansion
        # provides the symmetry-breaking seed that lets the sweep find N^2
        prob = make_problem(ghz_mps(3), MODEL_FREE)
        l0 = expand_sld_bonds(initial_sld(MODEL_FREE, 3), 4, np.random.default_rng(0))
        _, fom = optimize_sld_sweep(prob, l0, OptimizationConfig(rel_tol=1e-12), max_sweeps=80)
        assert fom == pytest.approx(9.0, abs=1e-7)

    def test_strictly_local_start_is_a_zero_gradient_point(self):
        # same GHZ probe, unkicked local start: every site update sees a zero
        # linear term, so the sweep cannot leave the origin
        prob = make_problem(ghz_mps(3), MODEL_FREE)
        _, fom = optimize_sld_sweep(
            prob, initial_sld(MODEL_FREE, 3), OptimizationConfig(), max_sweeps=5
        )
        assert abs(fom) <= 1e-12

    def test_fixed_product_state_matches_dense_optimum(self):
        n = 4
        psi = initial_state(n)
        prob = make_problem(psi, MODEL)
        rho_d, rho_prime_d = dense_problem(state_to_dense(psi), MODEL)
        exact = oracle.exact_qfi(rho_d, rho_prime_d)
        l0 = expand_sld_bonds(initial_sld(MODEL, n), 16, np.random.default_rng(0))
        _, fom = optimize_sld_sweep(prob, l0, OptimizationConfig(rel_tol=1e-10), max_sweeps=60)
        assert fom == pytest.approx(exact, rel=1e-5)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_monotone_over_successive_sweeps(self, seed):
        rng = np.random.default_rng(seed)
        psi = expand_state_bonds(initial_state(3), 2, rng)
        prob = make_problem(psi, MODEL_NEG)
        l = expand_sld_bonds(initial_sld(MODEL_NEG, 3), 3, rng)
        cfg = OptimizationConfig(rel_tol=1e-14)
        prev = -np.inf
        for _ in range(5):
            l, fom = optimize_sld_sweep(prob, l, cfg, max_sweeps=1)
            assert fom >= prev - 10 * cfg.kappa * max(1.0, abs(prev))
            prev = fom

    def test_residuals_vanish_at_fixed_point(self):
        psi = expand_state_bonds(initial_state(3), 2, np.random.default_rng(0))
        prob = make_problem(psi, MODEL)
        l0 = expand_sld_bonds(initial_sld(MODEL, 3), 4, np.random.default_rng(0))
        # the sweep's stopping rule watches the figure of merit, which is
        # quadratic around the optimum; reaching a small *linear* residual
        # needs the tolerance pushed to roundoff
        cfg = OptimizationConfig(rel_tol=1e-16)
        l, _ = optimize_sld_sweep(prob, l0, cfg, max_sweeps=400)
        residuals = sld_site_residuals(prob, l, cfg.kappa)
        assert max(residuals) <= 1e-6

    def test_gauge_violating_start_rejected(self):
        prob = make_problem(initial_state(2), MODEL)
        rng = np.random.default_rng(5)
        arrays = [rng.standard_normal((1, 2, 2, 2)) + 1j * rng.standard_normal((1, 2, 2, 2)),
                  rng.standard_normal((2, 1, 2, 2)) + 1j * rng.standard_normal((2, 1, 2, 2))]
        with pytest.raises(StructuralError):
            optimize_sld_sweep(prob, SldMpo(MPO(arrays, "obc")), OptimizationConfig())


class TestDualOperators:
    def test_identity_observable_maps_to_identity_and_zero(self):
        gates = build_dephasing_gates(MODEL)
        l = SldMpo(identity_mpo(3, 2))
        l2_star, lprime_star = build_dual_operators(l, gates)
        np.testing.assert_allclose(to_dense(l2_star), np.eye(8), atol=1e-12)
        np.testing.assert_allclose(to_dense(lprime_star), np.zeros((8, 8)), atol=1e-12)

    def test_single_qubit_dual_damps_coherences(self):
        model = DephasingModel(c1=1.0, c2=0.0)
        gates = build_dephasing_gates(model)
        l = gauge_sld_from_dense(SX, 1)
        l2_star, lprime_star = build_dual_operators(l, gates, boundary="obc")
        np.testing.assert_allclose(to_dense(l2_star), np.eye(2), atol=1e-12)
        h = np.diag([0.5, -0.5])
        sx_damped = math.exp(-0.5) * SX
        np.testing.assert_allclose(
            to_dense(lprime_star), 1j * (h @ sx_damped - sx_damped @ h), atol=1e-12
        )

    def test_bond_dimension_products(self):
        gates = build_dephasing_gates(MODEL)
        l = expand_sld_bonds(initial_sld(MODEL, 4), 2, np.random.default_rng(0))
        assert l.d_l == 2
        l2_star, lprime_star = build_dual_operators(l, gates)
        # squared observable through the channel adjoint: D_L^2 * D_r;
        # commutator with the generator: 2 * D_L * D_r
        assert max(l2_star.bond_dims) == 2 * 2 * 3
        assert max(lprime_star.bond_dims) == 2 * 2 * 3

    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_dual_matches_dense_channel_adjoint(self, n):
        gates = build_dephasing_gates(MODEL_NEG)
        l = random_gauge_sld(n, 2, np.random.default_rng(20 + n))
        l2_star, lprime_star = build_dual_operators(l, gates)
        l_d = to_dense(l.mpo)
        # at zero phase the dual of the coherence-damping channel acts by the
        # same elementwise damping, so the dense oracle channel applies
        l2_expect = oracle.exact_channel(l_d @ l_d, MODEL_NEG, 0.0, "pbc").matrix
        chan_l = oracle.exact_channel(l_d, MODEL_NEG, 0.0, "pbc").matrix
        h = dense_hamiltonian(n)
        lp_expect = 1j * (h @ chan_l - chan_l @ h)
        np.testing.assert_allclose(to_dense(l2_star), l2_expect, atol=1e-10)
        np.testing.assert_allclose(to_dense(lprime_star), lp_expect, atol=1e-10)

    def test_dual_figure_of_merit_equals_primal(self):
        # ⟨ψ|2L'* − L*₂|ψ⟩ must equal the figure of merit computed from the
        # channel output and its derivative directly
        rng = np.random.default_rng(7)
        vec = random_state(4, rng)
        psi = state_from_dense(vec, 4, 2)
        l = random_gauge_sld(4, 2, rng)
        gates = build_dephasing_gates(MODEL)
        prob = make_problem(psi, MODEL, gates)
        l2_star, lprime_star = build_dual_operators(l, gates)
        v_op = mpo_add(lprime_star, l2_star, 2.0, -1.0)
        primal = evaluate_fom(prob, l)
        dual = mpo_expectation(psi, v_op).real
        assert dual == pytest.approx(primal, rel=1e-9)


class TestCompressMpoLinks:
    def test_exact_on_ring_operator(self):
        vec = random_state(4, np.random.default_rng(8))
        prob = make_problem(state_from_dense(vec, 4, 2), MODEL)
        dense_before = to_dense(prob.rho)
        small = _compress_mpo_links(prob.rho)
        np.testing.assert_allclose(to_dense(small), dense_before, atol=1e-10)
        assert max(small.bond_dims) <= max(prob.rho.bond_dims)

    def test_prunes_redundant_sum(self):
        l = random_gauge_sld(4, 3, np.random.default_rng(9))
        doubled = mpo_add(l.mpo, l.mpo, 0.5, 0.5)
        assert max(doubled.bond_dims) > max(l.mpo.bond_dims)
        pruned = _compress_mpo_links(doubled)
        assert max(pruned.bond_dims) <= max(l.mpo.bond_dims)
        np.testing.assert_allclose(to_dense(pruned), to_dense(l.mpo), atol=1e-10)

    def test_max_bond_cap_is_honored(self):
        gates = build_dephasing_gates(MODEL)
        l = expand_sld_bonds(initial_sld(MODEL, 4), 4, np.random.default_rng(0))
        l2_star, _ = build_dual_operators(l, gates)
        capped = _compress_mpo_links(l2_star, max_bond=3)
        assert max(capped.bond_dims) <= 3


class TestOptimizeInputState:
    def test_single_qubit_noiseless_saturates(self):
        model = DephasingModel(c1=0.0, c2=0.0)
        gates = build_dephasing_gates(model)
        psi0 = initial_state(1)
        rho_d, rho_prime_d = dense_problem(state_to_dense(psi0), model, "obc")
        l = gauge_sld_from_dense(oracle.exact_sld(rho_d, rho_prime_d), 1)
        _, fom, _ = optimize_input_state(psi0, l, gates, OptimizationConfig(), boundary="obc")
        assert fom == pytest.approx(1.0, rel=1e-12)

    def test_entangled_pair_found_from_product_start(self):
        # with the optimal noiseless two-qubit observable fixed, the best
        # probe is maximally entangled and reaches figure of merit 4
        gates = build_dephasing_gates(MODEL_FREE)
        ghz = ghz_mps(2)
        rho2 = np.outer(state_to_dense(ghz), state_to_dense(ghz).conj())
        h2 = np.diag([1.0, 0.0, 0.0, -1.0]).astype(complex)
        dr2 = 1j * (rho2 @ h2 - h2 @ rho2)
        l = gauge_sld_from_dense(oracle.exact_sld(rho2, dr2), 2)
        psi0 = expand_state_bonds(initial_state(2), 2, np.random.default_rng(0))
        psi, fom, _ = optimize_input_state(psi0, l, gates, OptimizationConfig(), sweeps=8)
        assert fom == pytest.approx(4.0, rel=1e-9)
        assert entropy_profile(psi)[0] == pytest.approx(1.0, abs=1e-9)

    def test_aligns_with_dense_top_eigenvector(self):
        # after a few alternating rounds the state sweep must land on the top
        # eigenvector of the fixed-observable operator 2L'* − L*₂
        n = 4
        rng = np.random.default_rng(2)
        gates = build_dephasing_gates(MODEL_NEG)
        cfg = OptimizationConfig(rel_tol=1e-12)
        psi = expand_state_bonds(initial_state(n), 4, rng)
        l = expand_sld_bonds(initial_sld(MODEL_NEG, n), 8, rng)
        for _ in range(4):
            prob = make_problem(psi, MODEL_NEG, gates)
            l, _ = optimize_sld_sweep(prob, l, cfg, max_sweeps=3)
            psi, _, _ = optimize_input_state(psi, l, gates, cfg, sweeps=1)
        l2_star, lprime_star = build_dual_operators(l, gates)
        v_d = to_dense(mpo_add(lprime_star, l2_star, 2.0, -1.0))
        v_d = (v_d + v_d.conj().T) / 2
        evals, evecs = np.linalg.eigh(v_d)
        top_val, top_vec = evals[-1], evecs[:, -1]
        psi, fom, _ = optimize_input_state(psi, l, gates, cfg, sweeps=25)
        overlap = abs(np.vdot(top_vec, state_to_dense(psi)))
        assert overlap >= 1.0 - 1e-6
        assert fom == pytest.approx(top_val, rel=1e-9)

    def test_requires_open_boundary_state(self):
        gates = build_dephasing_gates(MODEL)
        arrays = [np.ones((2, 2, 2), dtype=complex) for _ in range(3)]
        ring = MPS(arrays, "pbc")
        with pytest.raises(StructuralError):
            optimize_input_state(ring, initial_sld(MODEL, 3), gates, OptimizationConfig())


class TestRunQfiOptimization:
    def test_matches_dense_double_optimum(self):
        model = DephasingModel(c1=1.0, c2=0.0)
        report = run_qfi_optimization(model, 3)
        exact, _ = oracle.exact_optimal_qfi(model, 3)
        assert report.final_qfi == pytest.approx(exact, rel=1e-2)

    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_noiseless_reaches_heisenberg_limit(self, n):
        cfg = OptimizationConfig(rel_tol=1e-10, max_outer_iters=200)
        report = run_qfi_optimization(MODEL_FREE, n, cfg)
        assert report.final_qfi == pytest.approx(n**2, rel=1e-6)

    def test_noiseless_reaches_heisenberg_limit_five(self):
        cfg = OptimizationConfig(
            d_psi_schedule=(2, 4), d_l_schedule=(2, 4), rel_tol=1e-10, max_outer_iters=300
        )
        report = run_qfi_optimization(MODEL_FREE, 5, cfg)
        assert report.final_qfi == pytest.approx(25.0, rel=1e-6)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_history_is_monotone(self, seed):
        cfg = OptimizationConfig(rel_tol=1e-8, max_outer_iters=60, seed=seed)
        report = run_qfi_optimization(DephasingModel(c1=0.8, c2=0.2), 3, cfg)
        hist = report.fom_history
        for prev, cur in zip(hist, hist[1:]):
            assert cur >= prev - 10 * cfg.kappa * max(1.0, abs(prev))

    def test_self_consistency_at_convergence(self):
        cfg = OptimizationConfig(rel_tol=1e-8, max_outer_iters=200)
        report = run_qfi_optimization(MODEL, 3, cfg)
        psi_d = state_to_dense(report.optimal_state)
        rho_d, rho_prime_d = dense_problem(psi_d, MODEL)
        l_d = to_dense(report.optimal_sld.mpo)
        fom_dense = oracle.fom_value(rho_d, rho_prime_d, l_d)
        assert fom_dense == pytest.approx(report.final_qfi, rel=1e-8)
        # at a joint fixed point the linear and quadratic halves agree
        lin = np.trace(rho_prime_d @ l_d).real
        quad = np.trace(rho_d @ l_d @ l_d).real
        assert abs(lin - quad) <= 1e-6 * max(1.0, abs(report.final_qfi))

    def test_deterministic_for_fixed_seed(self):
        cfg = OptimizationConfig(max_outer_iters=10)
        a = run_qfi_optimization(MODEL, 3, cfg)
        b = run_qfi_optimization(MODEL, 3, cfg)
        assert a.final_qfi == b.final_qfi
        assert a.fom_history == b.fom_history

    def test_unconverged_run_is_flagged(self):
        cfg = OptimizationConfig(
            max_outer_iters=1, rel_tol=1e-14, d_psi_schedule=(2,), d_l_schedule=(2,)
        )
        report = run_qfi_optimization(MODEL, 3, cfg)
        assert report.converged is False
        assert report.iterations >= 1

    def test_report_fields(self):
        cfg = OptimizationConfig(max_outer_iters=15)
        report = run_qfi_optimization(MODEL, 4, cfg)
        assert set(report.bond_dims_used) == {"d_psi", "d_l", "stages"}
        assert len(report.entropy_profile) == 3
        assert len(report.fom_history) == report.iterations
        assert report.optimal_state.n_sites == 4
        assert report.optimal_sld.n_sites == 4
        assert abs(report.optimal_state.norm() - 1.0) <= 1e-10


class TestTransferConsistency:
    """The folded-environment contractions must agree with explicit transfer
    matrices and with dense algebra on every network shape used here."""

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_pair_triple_and_sandwich_values(self, seed):
        n = 4
        rng = np.random.default_rng(seed)
        vec = random_state(n, rng)
        psi = state_from_dense(vec, n, 2)
        prob = make_problem(psi, MODEL_NEG)
        l = random_gauge_sld(n, 2, rng)

        def chain_trace(specs):
            mats = [transfer_matrix(s).matrix for s in specs]
            e = mats[0]
            for m in mats[1:]:
                e = e @ m
            return complex(np.trace(e))

        rho_d, rho_prime_d = dense_problem(vec, MODEL_NEG)
        l_d = to_dense(l.mpo)

        pair = chain_trace(
            [("trace_product", a, b) for a, b in zip(prob.rho_prime.arrays, l.arrays)]
        )
        assert pair == pytest.approx(np.trace(rho_prime_d @ l_d), rel=1e-9, abs=1e-12)

        triple = chain_trace(
            [("trace_triple", a, b, c) for a, b, c in zip(prob.rho.arrays, l.arrays, l.arrays)]
        )
        assert triple == pytest.approx(np.trace(rho_d @ l_d @ l_d), rel=1e-9)

        # the folded evaluation is exactly 2·pair − triple
        assert evaluate_fom(prob, l) == pytest.approx(2 * pair.real - triple.real, rel=1e-9)

        gates = build_dephasing_gates(MODEL_NEG)
        l2_star, lprime_star = build_dual_operators(l, gates)
        v_op = mpo_add(lprime_star, l2_star, 2.0, -1.0)
        sandwich = chain_trace(
            [("expectation", p, o) for p, o in zip(psi.arrays, v_op.arrays)]
        )
        expect = vec.conj() @ to_dense(v_op) @ vec
        assert sandwich == pytest.approx(expect, rel=1e-9)
        assert sandwich == pytest.approx(mpo_expectation(psi, v_op), rel=1e-11)


class TestReportSerialization:
    @staticmethod
    def _tiny_report():
        cfg = OptimizationConfig(
            d_psi_schedule=(2,), d_l_schedule=(2,), max_outer_iters=5, rel_tol=1e-6
        )
        return run_qfi_optimization(MODEL, 2, cfg)

    def test_text_roundtrip(self):
        report = self._tiny_report()
        text = report_to_text(report)
        assert text.startswith("TNMETRO-REPORT-1\n")
        assert f"final_qfi = {report.final_qfi:.12g}" in text
        assert f"iterations = {report.iterations}" in text

        state_tag, sld_tag = "network optimal_state\n", "network optimal_sld\n"
        i_state = text.index(state_tag) + len(state_tag)
        i_sld = text.index(sld_tag)
        psi2 = network_from_text(text[i_state:i_sld])
        l2 = network_from_text(text[i_sld + len(sld_tag):])
        np.testing.assert_allclose(
            state_to_dense(psi2), state_to_dense(report.optimal_state), atol=1e-14
        )
        np.testing.assert_allclose(
            to_dense(l2), to_dense(report.optimal_sld.mpo), atol=1e-14
        )

    def test_save_report_writes_file(self, tmp_path):
        report = self._tiny_report()
        path = tmp_path / "report.txt"
        save_report(report, str(path))
        assert path.read_text().startswith("TNMETRO-REPORT-1\n")


class TestInitializers:
    def test_initial_state_is_uniform_product(self):
        psi = initial_state(3)
        assert psi.norm() == pytest.approx(1.0, rel=1e-14)
        assert max(psi.bond_dims) == 1
        np.testing.assert_allclose(
            state_to_dense(psi), np.full(8, 8**-0.5), atol=1e-14
        )

    def test_initial_sld_is_sum_of_one_body_terms(self):
        l = initial_sld(MODEL, 3)
        assert l.d_l == 2
        assert l.gauge_residual() <= 1e-14
        # the one-body term, from the dense oracle on a single dephased qubit
        plus = np.ones(2) / math.sqrt(2)
        single = DephasingModel(c1=MODEL.c1, c2=0.0)
        rho1 = oracle.exact_channel(np.outer(plus, plus), single, 0.0, "obc").matrix
        l1 = oracle.exact_sld(rho1, oracle.dephasing_derivative(rho1))
        eye = np.eye(2)
        expect = (
            np.kron(np.kron(l1, eye), eye)
            + np.kron(np.kron(eye, l1), eye)
            + np.kron(np.kron(eye, eye), l1)
        )
        np.testing.assert_allclose(to_dense(l.mpo), expect, atol=1e-12)

    def test_expand_state_bonds_grows_and_stays_close(self):
        psi0 = initial_state(3)
        psi = expand_state_bonds(psi0, 4, np.random.default_rng(0))
        assert max(psi.bond_dims) == 2  # capped by the 2^min(cut) ceiling
        # the padding noise is small and unnormalized on purpose — the
        # optimizer renormalizes on entry
        assert psi.norm() == pytest.approx(1.0, abs=1e-4)
        overlap = abs(np.vdot(state_to_dense(psi0), state_to_dense(psi))) / psi.norm()
        assert overlap >= 0.99

    def test_expand_sld_bonds_preserves_gauge_and_operator(self):
        l0 = initial_sld(MODEL, 3)
        l = expand_sld_bonds(l0, 3, np.random.default_rng(0))
        assert l.d_l == 3
        assert l.gauge_residual() <= 1e-10
        d0, d1 = to_dense(l0.mpo), to_dense(l.mpo)
        assert np.linalg.norm(d1 - d0) <= 0.1 * np.linalg.norm(d0)
