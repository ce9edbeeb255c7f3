"""Time evolution drivers: unitary propagation and Lindblad integration.

Closed evolution diagonalizes the (time-independent, Hermitian) Hamiltonian
once and applies the exact propagator. Open evolution integrates the
Lindblad master equation with fixed-step RK4 through one of the two kernel
backends; see kernels for the equation and its sign/rate conventions.

The RK4 step is chosen from the generator itself: the spectral range of H
plus twice the largest decay eigenvalue bounds how much phase any matrix
element can wind per unit time, and the step is capped so that winding stays
below EvolutionConfig.max_phase_per_step radians. An explicit dt that
violates the cap is refined automatically and a RuntimeWarning reports the
refinement, so accuracy is never lost silently.

reachable_support closes a set of basis states under the nonzero patterns
of the Hamiltonian and the collapse operators. Evolution confined to such a
closed set is exact on the sliced operators, which is how the protocol
layer keeps dispersive segments small.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np
import scipy.linalg

from . import kernels
from .spaces import DensityMatrix, Operator, StateVector

if TYPE_CHECKING:
    from numpy.typing import NDArray

__all__ = [
    "EvolutionConfig",
    "evolve_unitary",
    "unitary_propagator",
    "evolve_lindblad",
    "evolve_lindblad_blocks",
    "free_decay",
    "lindblad_channel",
    "plan_steps",
    "reachable_support",
]

_HERMITIAN_RTOL = 1e-12


@dataclass(frozen=True)
class EvolutionConfig:
    """Knobs for the Lindblad integrator.

    dt: explicit step size in seconds; None derives it from the generator.
    method: integration scheme; only "rk4" is implemented.
    max_phase_per_step: cap on radians of phase winding per step.
    backend: kernel choice ("numba" or "numpy"); None defers to the
        PHASEGATE_BACKEND environment variable, then to availability.
    """

    dt: float | None = None
    method: str = "rk4"
    max_phase_per_step: float = 0.05
    backend: str | None = None

    def __post_init__(self) -> None:
        if self.method != "rk4":
            raise ValueError(f"unknown method {self.method!r}, expected 'rk4'")
        if self.dt is not None and not self.dt > 0.0:
            raise ValueError("dt must be positive when given")
        if not self.max_phase_per_step > 0.0:
            raise ValueError("max_phase_per_step must be positive")
        if self.backend is not None:
            kernels.resolve_backend(self.backend)

    def resolved_backend(self) -> str:
        if self.backend is not None:
            return self.backend
        return kernels.default_backend()


def _require_hermitian(matrix: NDArray[np.complex128], what: str) -> None:
    scale = float(np.max(np.abs(matrix))) if matrix.size else 0.0
    tol = _HERMITIAN_RTOL * max(scale, 1.0)
    if float(np.max(np.abs(matrix - matrix.conj().T))) > tol:
        raise ValueError(f"{what} must be hermitian")


def _require_duration(t: float) -> float:
    t = float(t)
    if t < 0.0 or not math.isfinite(t):
        raise ValueError("duration must be finite and nonnegative")
    return t


def unitary_propagator(hamiltonian: Operator, t: float) -> Operator:
    """exp(-i H t) for a Hermitian H, via one diagonalization."""
    t = _require_duration(t)
    _require_hermitian(hamiltonian.data, "hamiltonian")
    energies, modes = np.linalg.eigh(hamiltonian.data)
    phases = np.exp(-1j * energies * t)
    return Operator((modes * phases) @ modes.conj().T, hamiltonian.layout)


def evolve_unitary(
    hamiltonian: Operator, t: float, state: StateVector
) -> StateVector:
    """Propagate a pure state exactly under a static Hamiltonian."""
    t = _require_duration(t)
    if hamiltonian.layout != state.layout:
        raise ValueError("hamiltonian and state have different layouts")
    _require_hermitian(hamiltonian.data, "hamiltonian")
    if t == 0.0:
        return StateVector(state.data, state.layout)
    energies, modes = np.linalg.eigh(hamiltonian.data)
    amplitudes = modes @ (
        np.exp(-1j * energies * t) * (modes.conj().T @ state.data)
    )
    return StateVector(amplitudes, state.layout)


def plan_steps(
    hamiltonian: NDArray[np.complex128],
    collapse: Sequence[NDArray[np.complex128]],
    t: float,
    config: EvolutionConfig,
    frequency_window: float | None = None,
) -> tuple[int, float]:
    """Number of RK4 steps and the actual dt used for a segment.

    The generator scale is the spectral range of H plus twice the largest
    eigenvalue of sum(c+ c); dividing the phase cap by it gives the widest
    admissible step.

    frequency_window, when given, caps the Hamiltonian part of the scale by
    a caller-supplied bound on the oscillation frequencies the evolving
    state actually carries. Callers use it when the extremes of the
    spectrum are known to hold negligible weight; it never tightens the
    plan below the cap-implied accuracy, only releases head-room the full
    spectral range would waste.
    """
    t = _require_duration(t)
    if t == 0.0:
        return 0, 0.0
    scale = 0.0
    if np.any(hamiltonian):
        energies = np.linalg.eigvalsh(hamiltonian)
        span = float(energies[-1] - energies[0])
        if frequency_window is not None:
            span = min(span, max(float(frequency_window), 0.0))
        scale += span
    if collapse:
        total = np.zeros_like(hamiltonian)
        for c in collapse:
            total += c.conj().T @ c
        scale += 2.0 * float(np.linalg.eigvalsh(total)[-1])
    if scale == 0.0:
        # generator vanishes; a single step of any size is exact
        return 1, t
    cap = config.max_phase_per_step / scale
    dt = config.dt if config.dt is not None else cap
    if dt > cap and config.dt is not None:
        warnings.warn(
            f"explicit dt={config.dt:.3e} winds more than "
            f"{config.max_phase_per_step} rad per step; refined to {cap:.3e}",
            RuntimeWarning,
            stacklevel=3,
        )
        dt = cap
    nsteps = max(1, math.ceil(t / dt))
    return nsteps, t / nsteps


def evolve_lindblad_blocks(
    hamiltonian: NDArray[np.complex128],
    collapse: Sequence[NDArray[np.complex128]],
    t: float,
    blocks: NDArray[np.complex128],
    hermitian: Sequence[bool],
    config: EvolutionConfig | None = None,
    frequency_window: float | None = None,
) -> NDArray[np.complex128]:
    """Integrate a batch of matrix blocks sharing one Lindblad generator.

    blocks has shape (B, D, D); entries flagged in hermitian are
    re-symmetrized after every step. This is the raw-array engine the
    protocol layer drives with sliced operators; evolve_lindblad is the
    checked single-state wrapper. frequency_window passes through to
    plan_steps.
    """
    if config is None:
        config = EvolutionConfig()
    blocks = np.asarray(blocks, dtype=np.complex128)
    if blocks.ndim != 3 or blocks.shape[1] != blocks.shape[2]:
        raise ValueError("blocks must have shape (batch, dim, dim)")
    dim = blocks.shape[1]
    if hamiltonian.shape != (dim, dim):
        raise ValueError("hamiltonian shape does not match blocks")
    for c in collapse:
        if c.shape != (dim, dim):
            raise ValueError("collapse operator shape does not match blocks")
    flags = np.asarray(hermitian, dtype=bool)
    if flags.shape != (blocks.shape[0],):
        raise ValueError("hermitian flags must match the batch size")
    _require_hermitian(hamiltonian, "hamiltonian")
    nsteps, dt = plan_steps(hamiltonian, collapse, t, config, frequency_window)
    return kernels.rk4_lindblad(
        hamiltonian,
        list(collapse),
        blocks,
        flags,
        dt,
        nsteps,
        config.resolved_backend(),
    )


def evolve_lindblad(
    hamiltonian: Operator,
    collapse: Sequence[Operator],
    t: float,
    state: DensityMatrix,
    config: EvolutionConfig | None = None,
) -> DensityMatrix:
    """Integrate one density matrix under the Lindblad master equation."""
    layout = state.layout
    if hamiltonian.layout != layout:
        raise ValueError("hamiltonian and state have different layouts")
    for c in collapse:
        if c.layout != layout:
            raise ValueError("collapse operator and state have different layouts")
    out = evolve_lindblad_blocks(
        hamiltonian.data,
        [c.data for c in collapse],
        t,
        state.data[None, :, :],
        [True],
        config,
    )
    return DensityMatrix(out[0], layout)


def free_decay(
    collapse: Sequence[Operator],
    t: float,
    state: DensityMatrix,
    config: EvolutionConfig | None = None,
) -> DensityMatrix:
    """Pure dissipation: Lindblad evolution with the Hamiltonian off."""
    zero = Operator(
        np.zeros((state.layout.total_dim,) * 2, dtype=np.complex128),
        state.layout,
    )
    return evolve_lindblad(zero, collapse, t, state, config)


def lindblad_channel(
    hamiltonian: NDArray[np.complex128],
    collapse: Sequence[NDArray[np.complex128]],
    t: float,
) -> NDArray[np.complex128]:
    """Exact evolution map exp(t L) as a dense matrix on row-major vec(rho).

    Only sensible for small dimensions (the matrix is d^2 by d^2), but there
    it beats time stepping outright: when every term of a segment's
    generator lives on a single subsystem, the per-subsystem channels
    commute and their tensor contraction advances the joint state exactly.
    The protocol layer uses this for the dressing-pulse and transport
    segments, leaving RK4 only where the cavity genuinely entangles.

    Entries of exp(t L) outside the transitive closure of L's nonzero
    pattern vanish identically (every power of L vanishes there), so the
    rounding-level values the Pade evaluation leaves in them are scrubbed
    back to exact zeros. Downstream support detection depends on that.
    """
    t = _require_duration(t)
    _require_hermitian(hamiltonian, "hamiltonian")
    generator = kernels.superop_dense(hamiltonian, list(collapse))
    channel = scipy.linalg.expm(t * generator)
    pattern = (np.abs(generator) > 0.0) | np.eye(generator.shape[0], dtype=bool)
    closure = pattern.astype(np.int64)
    while True:
        grown = ((closure @ closure) > 0).astype(np.int64)
        if bool(np.array_equal(grown, closure)):
            break
        closure = grown
    channel[closure == 0] = 0.0
    return channel


def reachable_support(
    hamiltonian: NDArray[np.complex128],
    collapse: Sequence[NDArray[np.complex128]],
    seed: NDArray[np.bool_],
) -> NDArray[np.bool_]:
    """Close a basis-state set under the generator's nonzero pattern.

    A density matrix supported on the returned set stays supported on it
    for all time, because every term of the master equation maps the set
    into itself: H hops along its own nonzeros, c_j hops along theirs, and
    the anticommutator part follows the pattern of c_j+ c_j. Slicing all
    operators to the closed set is therefore exact, not an approximation.
    """
    dim = hamiltonian.shape[0]
    adjacency = np.abs(hamiltonian) > 0
    for c in collapse:
        adjacency |= np.abs(c) > 0
        adjacency |= np.abs(c.conj().T @ c) > 0
    support = np.asarray(seed, dtype=bool).copy()
    if support.shape != (dim,):
        raise ValueError("seed mask length does not match operator dimension")
    while True:
        grown = support | adjacency[:, support].any(axis=1)
        if bool(np.array_equal(grown, support)):
            return grown
        support = grown
