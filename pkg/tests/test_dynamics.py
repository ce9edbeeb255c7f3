"""Tests for time evolution: exact propagation, RK4 integration, backends."""

from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, seed, settings
from hypothesis import strategies as st

# fixed-step RK4 at the default phase cap leaves relative truncation of
# order (total phase) * cap^4 / 120, a few 1e-8 for these durations
DECAY_ATOL = 1e-7
BACKEND_AGREEMENT_ATOL = 1e-12
CHANNEL_ATOL = 1e-12
SLICE_ATOL = 1e-13


def _lowering(dim: int) -> np.ndarray:
    op = np.zeros((dim, dim), dtype=np.complex128)
    for m in range(1, dim):
        op[m - 1, m] = math.sqrt(m)
    return op


def _random_density(rng: np.random.Generator, dim: int) -> np.ndarray:
    raw = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    rho = raw @ raw.conj().T
    return rho / np.trace(rho).real


# ======================================================================
# configuration and step planning
# ======================================================================


class TestEvolutionConfig:
    def test_defaults(self):
        from phasegate.dynamics import EvolutionConfig

        config = EvolutionConfig()
        assert config.dt is None
        assert config.method == "rk4"
        assert config.max_phase_per_step == pytest.approx(0.05)

    def test_rejects_unknown_method(self):
        from phasegate.dynamics import EvolutionConfig

        with pytest.raises(ValueError, match="method"):
            EvolutionConfig(method="euler")

    def test_rejects_nonpositive_dt(self):
        from phasegate.dynamics import EvolutionConfig

        with pytest.raises(ValueError, match="dt"):
            EvolutionConfig(dt=0.0)

    def test_rejects_nonpositive_phase_cap(self):
        from phasegate.dynamics import EvolutionConfig

        with pytest.raises(ValueError, match="max_phase_per_step"):
            EvolutionConfig(max_phase_per_step=-0.1)

    def test_rejects_unknown_backend(self):
        from phasegate.dynamics import EvolutionConfig

        with pytest.raises(ValueError, match="backend"):
            EvolutionConfig(backend="fortran")

    def test_backend_resolution_honors_environment(self, monkeypatch):
        from phasegate.dynamics import EvolutionConfig

        monkeypatch.setenv("PHASEGATE_BACKEND", "numpy")
        assert EvolutionConfig().resolved_backend() == "numpy"
        assert EvolutionConfig(backend="numba").resolved_backend() == "numba"

    def test_environment_rejects_garbage(self, monkeypatch):
        from phasegate import kernels

        monkeypatch.setenv("PHASEGATE_BACKEND", "gpu")
        with pytest.raises(ValueError, match="backend"):
            kernels.default_backend()


class TestPlanSteps:
    def test_zero_duration_needs_no_steps(self):
        from phasegate.dynamics import EvolutionConfig, plan_steps

        h = np.diag([0.0, 1.0]).astype(np.complex128)
        assert plan_steps(h, [], 0.0, EvolutionConfig()) == (0, 0.0)

    def test_vanishing_generator_is_one_exact_step(self):
        from phasegate.dynamics import EvolutionConfig, plan_steps

        h = np.zeros((3, 3), dtype=np.complex128)
        assert plan_steps(h, [], 2.5, EvolutionConfig()) == (1, 2.5)

    def test_step_count_respects_phase_cap(self):
        from phasegate.dynamics import EvolutionConfig, plan_steps

        h = np.diag([-3.0, 5.0]).astype(np.complex128)  # spectral range 8
        config = EvolutionConfig(max_phase_per_step=0.05)
        nsteps, dt = plan_steps(h, [], 1.0, config)
        assert nsteps == math.ceil(8.0 / 0.05)
        assert nsteps * dt == pytest.approx(1.0, abs=0.0)
        assert 8.0 * dt <= 0.05 * (1.0 + 1e-12)

    def test_decay_contributes_to_the_generator_scale(self):
        from phasegate.dynamics import EvolutionConfig, plan_steps

        h = np.zeros((2, 2), dtype=np.complex128)
        c = 2.0 * _lowering(2)  # c+c has top eigenvalue 4
        nsteps, _ = plan_steps(h, [c], 1.0, EvolutionConfig(max_phase_per_step=0.05))
        assert nsteps == math.ceil(8.0 / 0.05)

    def test_explicit_fine_dt_is_honored(self):
        from phasegate.dynamics import EvolutionConfig, plan_steps

        h = np.diag([0.0, 1.0]).astype(np.complex128)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            nsteps, dt = plan_steps(h, [], 1.0, EvolutionConfig(dt=0.01))
        assert nsteps == 100
        assert dt == pytest.approx(0.01)

    def test_explicit_coarse_dt_is_refined_with_a_warning(self):
        from phasegate.dynamics import EvolutionConfig, plan_steps

        h = np.diag([0.0, 10.0]).astype(np.complex128)
        config = EvolutionConfig(dt=0.5, max_phase_per_step=0.05)
        with pytest.warns(RuntimeWarning, match="refined"):
            nsteps, dt = plan_steps(h, [], 1.0, config)
        assert 10.0 * dt <= 0.05 * (1.0 + 1e-12)
        assert nsteps == math.ceil(1.0 / (0.05 / 10.0))

    def test_negative_duration_rejected(self):
        from phasegate.dynamics import EvolutionConfig, plan_steps

        h = np.zeros((2, 2), dtype=np.complex128)
        with pytest.raises(ValueError, match="nonnegative"):
            plan_steps(h, [], -1.0, EvolutionConfig())


# ======================================================================
# unitary propagation
# ======================================================================


class TestUnitaryEvolution:
    def test_rabi_oscillation_matches_the_analytic_solution(self):
        from phasegate.dynamics import evolve_unitary
        from phasegate.spaces import Operator, SpaceLayout, StateVector

        layout = SpaceLayout((2,))
        omega = 3.0
        h = Operator(omega * np.array([[0, 1], [1, 0]], dtype=np.complex128), layout)
        psi = StateVector(np.array([1, 0], dtype=np.complex128), layout)
        for t in (0.0, 0.3, 1.7):
            out = evolve_unitary(h, t, psi)
            expected = np.array([math.cos(omega * t), -1j * math.sin(omega * t)])
            np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_propagator_agrees_with_state_evolution(self):
        from phasegate.dynamics import evolve_unitary, unitary_propagator
        from phasegate.spaces import Operator, SpaceLayout, StateVector

        rng = np.random.default_rng(11)
        layout = SpaceLayout((2, 3))
        raw = rng.normal(size=(6, 6)) + 1j * rng.normal(size=(6, 6))
        h = Operator(raw + raw.conj().T, layout)
        amps = rng.normal(size=6) + 1j * rng.normal(size=6)
        psi = StateVector(amps / np.linalg.norm(amps), layout)
        u = unitary_propagator(h, 0.42)
        via_state = evolve_unitary(h, 0.42, psi)
        np.testing.assert_allclose(u.data @ psi.data, via_state.data, atol=1e-12)
        np.testing.assert_allclose(
            u.data @ u.data.conj().T, np.eye(6), atol=1e-12
        )

    def test_rejects_nonhermitian_hamiltonian(self):
        from phasegate.dynamics import evolve_unitary
        from phasegate.spaces import Operator, SpaceLayout, StateVector

        layout = SpaceLayout((2,))
        h = Operator(np.array([[0, 1], [0, 0]], dtype=np.complex128), layout)
        psi = StateVector(np.array([1, 0], dtype=np.complex128), layout)
        with pytest.raises(ValueError, match="hermitian"):
            evolve_unitary(h, 1.0, psi)

    def test_rejects_layout_mismatch(self):
        from phasegate.dynamics import evolve_unitary
        from phasegate.spaces import Operator, SpaceLayout, StateVector

        h = Operator(np.zeros((2, 2), dtype=np.complex128), SpaceLayout((2,)))
        psi = StateVector(
            np.array([1, 0, 0], dtype=np.complex128), SpaceLayout((3,))
        )
        with pytest.raises(ValueError, match="layout"):
            evolve_unitary(h, 1.0, psi)


# ======================================================================
# open-system oracles
# ======================================================================


class TestLindbladOracles:
    def test_cavity_decay_follows_the_exponential_law(self):
        """Population falls as exp(-2 kappa t), coherence as exp(-kappa t)."""
        from phasegate.dynamics import evolve_lindblad
        from phasegate.spaces import DensityMatrix, Operator, SpaceLayout

        layout = SpaceLayout((2,))
        kappa = 0.7
        c = Operator(math.sqrt(kappa) * _lowering(2), layout)
        h = Operator(np.zeros((2, 2), dtype=np.complex128), layout)
        rho = DensityMatrix(np.full((2, 2), 0.5, dtype=np.complex128), layout)
        for t in (0.3, 1.1):
            out = evolve_lindblad(h, [c], t, rho)
            assert out.data[1, 1].real == pytest.approx(
                0.5 * math.exp(-2.0 * kappa * t), abs=DECAY_ATOL
            )
            assert out.data[0, 1] == pytest.approx(
                0.5 * math.exp(-kappa * t), abs=DECAY_ATOL
            )
            assert np.trace(out.data).real == pytest.approx(1.0, abs=1e-10)

    def test_cascade_populations_solve_the_rate_equations(self):
        """Three-level ladder decay against the closed-form cascade."""
        from phasegate.dynamics import evolve_lindblad
        from phasegate.spaces import DensityMatrix, Operator, SpaceLayout

        layout = SpaceLayout((3,))
        gamma_21, gamma_10 = 2.0, 3.0
        c_21 = np.zeros((3, 3), dtype=np.complex128)
        c_21[1, 2] = math.sqrt(gamma_21)
        c_10 = np.zeros((3, 3), dtype=np.complex128)
        c_10[0, 1] = math.sqrt(gamma_10)
        collapse = [Operator(c_21, layout), Operator(c_10, layout)]
        h = Operator(np.zeros((3, 3), dtype=np.complex128), layout)
        rho = DensityMatrix(np.diag([0, 0, 1.0]).astype(np.complex128), layout)

        t = 0.3
        a, b = 2.0 * gamma_21, 2.0 * gamma_10
        out = evolve_lindblad(h, collapse, t, rho)
        p2 = math.exp(-a * t)
        p1 = a * (math.exp(-a * t) - math.exp(-b * t)) / (b - a)
        assert out.data[2, 2].real == pytest.approx(p2, abs=DECAY_ATOL)
        assert out.data[1, 1].real == pytest.approx(p1, abs=DECAY_ATOL)
        assert out.data[0, 0].real == pytest.approx(1 - p1 - p2, abs=DECAY_ATOL)

    def test_free_decay_keeps_the_ground_state_dark(self):
        from phasegate.dynamics import free_decay
        from phasegate.spaces import DensityMatrix, Operator, SpaceLayout

        layout = SpaceLayout((2,))
        c = Operator(_lowering(2), layout)
        rho = DensityMatrix(np.diag([1.0, 0.0]).astype(np.complex128), layout)
        out = free_decay([c], 2.0, rho)
        np.testing.assert_allclose(out.data, rho.data, atol=1e-12)

    def test_unitary_limit_matches_closed_evolution(self):
        """With no collapse operators the integrator reproduces U rho U+."""
        from phasegate.dynamics import evolve_lindblad, unitary_propagator
        from phasegate.spaces import DensityMatrix, Operator, SpaceLayout

        rng = np.random.default_rng(5)
        layout = SpaceLayout((3,))
        raw = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
        h = Operator(raw + raw.conj().T, layout)
        rho = DensityMatrix(_random_density(rng, 3), layout)
        t = 0.8
        out = evolve_lindblad(h, [], t, rho)
        u = unitary_propagator(h, t).data
        np.testing.assert_allclose(out.data, u @ rho.data @ u.conj().T, atol=1e-7)


# ======================================================================
# exact channels
# ======================================================================


class TestLindbladChannel:
    def test_cavity_decay_channel_is_exact(self):
        from phasegate.dynamics import lindblad_channel

        kappa, t = 0.9, 0.6
        h = np.zeros((2, 2), dtype=np.complex128)
        chan = lindblad_channel(h, [math.sqrt(kappa) * _lowering(2)], t)
        rho = np.array([[0.25, 0.4j], [-0.4j, 0.75]], dtype=np.complex128)
        out = (chan @ rho.reshape(-1)).reshape(2, 2)
        decay = math.exp(-2.0 * kappa * t)
        coher = math.exp(-kappa * t)
        expected = np.array(
            [
                [0.25 + 0.75 * (1 - decay), 0.4j * coher],
                [-0.4j * coher, 0.75 * decay],
            ]
        )
        np.testing.assert_allclose(out, expected, atol=CHANNEL_ATOL)

    def test_channel_matches_the_integrator(self):
        """Dual route: expm of the generator versus stepped RK4."""
        from phasegate.dynamics import (
            EvolutionConfig,
            evolve_lindblad_blocks,
            lindblad_channel,
        )

        rng = np.random.default_rng(23)
        dim = 4
        raw = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
        h = raw + raw.conj().T
        c = 0.6 * _lowering(dim)
        rho = _random_density(rng, dim)
        t = 0.5
        chan = lindblad_channel(h, [c], t)
        exact = (chan @ rho.reshape(-1)).reshape(dim, dim)
        stepped = evolve_lindblad_blocks(
            h, [c], t, rho[None], [True], EvolutionConfig(max_phase_per_step=0.01)
        )[0]
        np.testing.assert_allclose(stepped, exact, atol=1e-9)

    def test_channel_of_zero_time_is_the_identity(self):
        from phasegate.dynamics import lindblad_channel

        h = np.diag([0.0, 2.0]).astype(np.complex128)
        np.testing.assert_allclose(
            lindblad_channel(h, [], 0.0), np.eye(4), atol=1e-15
        )

    def test_superoperator_assemblies_agree(self):
        """The dense builder and the sparse CSR builder are two routes."""
        import scipy.sparse as sp

        from phasegate import kernels

        rng = np.random.default_rng(3)
        dim = 5
        raw = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
        h = raw + raw.conj().T
        c1 = 0.3 * _lowering(dim)
        c2 = np.zeros((dim, dim), dtype=np.complex128)
        c2[0, 3] = 0.8
        dense = kernels.superop_dense(h, [c1, c2])
        indptr, indices, data = kernels._superop_csr(h, [c1, c2])
        rebuilt = sp.csr_matrix(
            (data, indices, indptr), shape=(dim * dim, dim * dim)
        ).toarray()
        np.testing.assert_allclose(rebuilt, dense, atol=1e-14)


# ======================================================================
# backends
# ======================================================================


class TestBackends:
    def test_numba_and_numpy_agree(self):
        from phasegate import kernels
        from phasegate.dynamics import EvolutionConfig, evolve_lindblad_blocks

        if not kernels.HAS_NUMBA:
            pytest.skip("numba not importable")
        rng = np.random.default_rng(17)
        dim = 6
        raw = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
        h = raw + raw.conj().T
        cs = [0.5 * _lowering(dim)]
        blocks = np.stack(
            [
                _random_density(rng, dim),
                rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim)),
            ]
        )
        herm = [True, False]
        outs = {
            backend: evolve_lindblad_blocks(
                h, cs, 0.4, blocks, herm, EvolutionConfig(backend=backend)
            )
            for backend in ("numba", "numpy")
        }
        np.testing.assert_allclose(
            outs["numba"], outs["numpy"], atol=BACKEND_AGREEMENT_ATOL
        )

    def test_adjoint_blocks_evolve_to_adjoints(self):
        """The generator commutes with the adjoint, and so must the engine."""
        from phasegate.dynamics import EvolutionConfig, evolve_lindblad_blocks

        rng = np.random.default_rng(29)
        dim = 4
        raw = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
        h = raw + raw.conj().T
        cs = [0.4 * _lowering(dim)]
        x = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
        blocks = np.stack([x, x.conj().T])
        out = evolve_lindblad_blocks(
            h, cs, 0.7, blocks, [False, False], EvolutionConfig()
        )
        np.testing.assert_allclose(out[1], out[0].conj().T, atol=1e-12)

    def test_blocks_shape_validation(self):
        from phasegate.dynamics import EvolutionConfig, evolve_lindblad_blocks

        h = np.zeros((2, 2), dtype=np.complex128)
        good = np.zeros((1, 2, 2), dtype=np.complex128)
        with pytest.raises(ValueError, match="shape"):
            evolve_lindblad_blocks(h, [], 1.0, good[0], [True], EvolutionConfig())
        with pytest.raises(ValueError, match="hamiltonian"):
            evolve_lindblad_blocks(
                np.zeros((3, 3), dtype=np.complex128),
                [],
                1.0,
                good,
                [True],
                EvolutionConfig(),
            )
        with pytest.raises(ValueError, match="flags"):
            evolve_lindblad_blocks(h, [], 1.0, good, [True, False], EvolutionConfig())
        with pytest.raises(ValueError, match="collapse"):
            evolve_lindblad_blocks(
                h,
                [np.zeros((3, 3), dtype=np.complex128)],
                1.0,
                good,
                [True],
                EvolutionConfig(),
            )

    def test_layout_mismatch_rejected(self):
        from phasegate.dynamics import evolve_lindblad
        from phasegate.spaces import DensityMatrix, Operator, SpaceLayout

        h = Operator(np.zeros((2, 2), dtype=np.complex128), SpaceLayout((2,)))
        rho = DensityMatrix(
            np.diag([1.0, 0, 0]).astype(np.complex128), SpaceLayout((3,))
        )
        with pytest.raises(ValueError, match="layout"):
            evolve_lindblad(h, [], 1.0, rho)


# ======================================================================
# convergence
# ======================================================================


class TestConvergence:
    def test_halving_the_cap_shrinks_the_error_fourth_order(self):
        from phasegate.dynamics import (
            EvolutionConfig,
            evolve_lindblad_blocks,
            lindblad_channel,
        )

        rng = np.random.default_rng(41)
        dim = 4
        raw = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
        h = 3.0 * (raw + raw.conj().T)
        cs = [0.2 * _lowering(dim)]
        rho = _random_density(rng, dim)
        t = 0.6
        exact = (lindblad_channel(h, cs, t) @ rho.reshape(-1)).reshape(dim, dim)

        def error(cap: float) -> float:
            out = evolve_lindblad_blocks(
                h, cs, t, rho[None], [True], EvolutionConfig(max_phase_per_step=cap)
            )[0]
            return float(np.max(np.abs(out - exact)))

        coarse, fine = error(0.2), error(0.1)
        assert fine < coarse / 8.0

    def test_long_evolution_preserves_trace_and_positivity(self):
        from phasegate.dynamics import evolve_lindblad
        from phasegate.spaces import DensityMatrix, Operator, SpaceLayout

        layout = SpaceLayout((2, 2))
        rng = np.random.default_rng(13)
        raw = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
        h = Operator(5.0 * (raw + raw.conj().T), layout)
        c = Operator(0.3 * np.kron(_lowering(2), np.eye(2)), layout)
        rho = DensityMatrix(_random_density(rng, 4), layout)
        out = evolve_lindblad(h, [c], 5.0, rho)
        assert np.trace(out.data).real == pytest.approx(1.0, abs=1e-10)
        assert out.min_eigenvalue() >= -1e-10

    @seed(2024)
    @settings(max_examples=25, deadline=None)
    @given(
        scale=st.floats(min_value=0.1, max_value=10.0),
        rate=st.floats(min_value=0.0, max_value=2.0),
        key=st.integers(min_value=0, max_value=2**31),
    )
    def test_density_matrix_invariants_hold(self, scale, rate, key):
        """Trace, Hermiticity, and positivity survive any short evolution."""
        from phasegate.dynamics import evolve_lindblad
        from phasegate.spaces import DensityMatrix, Operator, SpaceLayout

        layout = SpaceLayout((3,))
        rng = np.random.default_rng(key)
        raw = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
        h = Operator(scale * (raw + raw.conj().T), layout)
        c = Operator(math.sqrt(rate) * _lowering(3), layout)
        rho = DensityMatrix(_random_density(rng, 3), layout)
        out = evolve_lindblad(h, [c], 0.5, rho)
        assert np.trace(out.data).real == pytest.approx(1.0, abs=1e-10)
        np.testing.assert_allclose(out.data, out.data.conj().T, atol=1e-12)
        assert out.min_eigenvalue() >= -1e-9


# ======================================================================
# reachable support
# ======================================================================


class TestReachableSupport:
    def test_exchange_coupling_closure_by_hand(self):
        """One atom, one cavity mode: the photon-1 level-2 pair pulls in
        exactly the photon-0 level-3 state and nothing else."""
        from phasegate.dynamics import reachable_support
        from phasegate.model import (
            dispersive_hamiltonian_full,
            protocol_layout,
            qft_preset,
        )

        params = qft_preset(n=1)
        layout = protocol_layout(1, include_control=False)
        h = dispersive_hamiltonian_full(params, layout).data
        seed_mask = np.zeros(8, dtype=bool)
        seed_mask[layout.flat_index((1, 2))] = True
        mask = reachable_support(h, [], seed_mask)
        expected = np.zeros(8, dtype=bool)
        expected[layout.flat_index((1, 2))] = True
        expected[layout.flat_index((0, 3))] = True
        np.testing.assert_array_equal(mask, expected)

    def test_collapse_operators_extend_the_closure(self):
        from phasegate.dynamics import reachable_support

        h = np.zeros((3, 3), dtype=np.complex128)
        c = np.zeros((3, 3), dtype=np.complex128)
        c[0, 2] = 1.0  # decay 2 -> 0
        seed_mask = np.array([False, False, True])
        mask = reachable_support(h, [c], seed_mask)
        np.testing.assert_array_equal(mask, [True, False, True])

    def test_seed_length_validated(self):
        from phasegate.dynamics import reachable_support

        with pytest.raises(ValueError, match="seed"):
            reachable_support(np.zeros((2, 2)), [], np.array([True]))

    def test_sliced_evolution_matches_the_full_space(self):
        """Evolving on the closed support and embedding back is exact."""
        from phasegate.dynamics import (
            EvolutionConfig,
            evolve_lindblad_blocks,
            reachable_support,
        )
        from phasegate.model import (
            NoiseRates,
            collapse_operators,
            dispersive_hamiltonian_full,
            protocol_layout,
            qft_preset,
        )

        params = qft_preset(n=1)
        layout = protocol_layout(1, include_control=False)
        h = dispersive_hamiltonian_full(params, layout).data
        collapse = [
            c.data for c in collapse_operators(NoiseRates.uniform(30.0), layout)
        ]
        dim = layout.total_dim

        seed_mask = np.zeros(dim, dtype=bool)
        for levels in ((0, 0), (0, 1), (1, 1), (1, 2)):
            seed_mask[layout.flat_index(levels)] = True
        rng = np.random.default_rng(61)
        rho = np.zeros((dim, dim), dtype=np.complex128)
        idx_seed = np.flatnonzero(seed_mask)
        sub = _random_density(rng, idx_seed.size)
        rho[np.ix_(idx_seed, idx_seed)] = sub

        t = 0.2 * np.pi * params.cavity_detuning / params.coupling**2
        config = EvolutionConfig(max_phase_per_step=0.05)
        full = evolve_lindblad_blocks(h, collapse, t, rho[None], [True], config)[0]

        mask = reachable_support(h, collapse, seed_mask)
        idx = np.flatnonzero(mask)
        grid = np.ix_(idx, idx)
        sliced = evolve_lindblad_blocks(
            h[grid], [c[grid] for c in collapse], t, rho[grid][None], [True], config
        )[0]
        embedded = np.zeros_like(full)
        embedded[grid] = sliced
        np.testing.assert_allclose(embedded, full, atol=SLICE_ATOL)
