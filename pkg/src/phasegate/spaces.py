"""Tensor-product state spaces, states, and operators.

Everything downstream (Hamiltonian builders, integrators, the gate protocol)
works on one flat Hilbert space assembled from small subsystem factors. This
module owns that assembly: the subsystem layout, row-major index arithmetic,
dense state/operator containers, embedding of local operators, fidelities,
and the partial trace.

Values are immutable after construction: the wrapped numpy arrays are copied
in and marked read-only, so downstream code can share them freely without
defensive copies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

__all__ = [
    "SpaceLayout",
    "StateVector",
    "DensityMatrix",
    "Operator",
    "annihilation",
    "basis_state",
    "embed",
    "fidelity_pure",
    "fidelity_mixed",
    "partial_trace",
]

# Tolerances for construction-time validation. These mirror what the rest of
# the package promises: unit norm to 1e-10, Hermiticity to 1e-10, unit trace
# to 1e-8 (the trace bound is looser because long dissipative runs accumulate
# roundoff in the trace before anything else).
NORM_ATOL = 1e-10
HERMITICITY_ATOL = 1e-10
TRACE_ATOL = 1e-8


def _frozen_complex(data: ArrayLike, *, ndim: int) -> NDArray[np.complexfloating]:
    arr = np.array(data, dtype=np.complex128, copy=True, order="C")
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-dimensional array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SpaceLayout:
    """Ordered tensor-product structure of the simulation Hilbert space.

    Parameters
    ----------
    dims:
        Dimension of each subsystem factor, slowest index first. The
        protocol-level convention is (cavity, target atom, ..., target atom,
        control atom): the cavity mode comes first, each target atom
        contributes a factor of 4 (levels 0..3), and the optional control
        atom contributes a trailing factor of 2. Nothing in this module
        depends on that convention; it only fixes row-major index packing.

    Notes
    -----
    A flat basis index decomposes big-endian style: for ``dims = (2, 4)`` the
    flat index is ``4 * i_cavity + i_atom``.
    """

    dims: tuple[int, ...]

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.dims)
        if len(dims) == 0:
            raise ValueError("layout needs at least one subsystem")
        if any(d < 2 for d in dims):
            raise ValueError(f"every subsystem dimension must be >= 2, got {dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def total_dim(self) -> int:
        return math.prod(self.dims)

    @property
    def subsystem_count(self) -> int:
        return len(self.dims)

    def flat_index(self, levels: Sequence[int]) -> int:
        """Row-major flat index of a product basis state.

        ``levels`` gives one level per subsystem, in layout order.
        """
        if len(levels) != len(self.dims):
            raise ValueError(
                f"expected {len(self.dims)} levels, got {len(levels)}"
            )
        idx = 0
        for level, dim in zip(levels, self.dims):
            if not 0 <= level < dim:
                raise ValueError(f"level {level} out of range for dimension {dim}")
            idx = idx * dim + level
        return idx

    def unpack_index(self, index: int) -> tuple[int, ...]:
        """Inverse of :meth:`flat_index`."""
        if not 0 <= index < self.total_dim:
            raise ValueError(f"index {index} out of range for dim {self.total_dim}")
        levels = []
        for dim in reversed(self.dims):
            levels.append(index % dim)
            index //= dim
        return tuple(reversed(levels))


@dataclass(frozen=True)
class StateVector:
    """Pure state on a :class:`SpaceLayout`, unit norm to 1e-10."""

    data: NDArray[np.complexfloating]
    layout: SpaceLayout

    def __post_init__(self) -> None:
        arr = _frozen_complex(self.data, ndim=1)
        if arr.shape[0] != self.layout.total_dim:
            raise ValueError(
                f"state has {arr.shape[0]} amplitudes, layout expects "
                f"{self.layout.total_dim}"
            )
        norm = float(np.linalg.norm(arr))
        if abs(norm - 1.0) > NORM_ATOL:
            raise ValueError(f"state norm {norm!r} is not 1 within {NORM_ATOL}")
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True)
class DensityMatrix:
    """Mixed state on a :class:`SpaceLayout`.

    Construction checks Hermiticity (1e-10) and unit trace (1e-8).
    Positivity is deliberately not enforced here: tiny negative eigenvalues
    of integrator output are monitored by callers (see
    :meth:`min_eigenvalue`), not silently clipped.
    """

    data: NDArray[np.complexfloating]
    layout: SpaceLayout

    def __post_init__(self) -> None:
        arr = _frozen_complex(self.data, ndim=2)
        d = self.layout.total_dim
        if arr.shape != (d, d):
            raise ValueError(f"density matrix shape {arr.shape} != ({d}, {d})")
        herm_err = float(np.abs(arr - arr.conj().T).max())
        if herm_err > HERMITICITY_ATOL:
            raise ValueError(
                f"density matrix is not Hermitian: max |rho - rho^dag| = {herm_err:.3e}"
            )
        trace_err = abs(complex(np.trace(arr)) - 1.0)
        if trace_err > TRACE_ATOL:
            raise ValueError(
                f"density matrix trace deviates from 1 by {trace_err:.3e}"
            )
        object.__setattr__(self, "data", arr)

    def min_eigenvalue(self) -> float:
        """Smallest eigenvalue, for positivity monitoring."""
        return float(np.linalg.eigvalsh(self.data)[0])


@dataclass(frozen=True)
class Operator:
    """Dense linear operator on a :class:`SpaceLayout`."""

    data: NDArray[np.complexfloating]
    layout: SpaceLayout

    def __post_init__(self) -> None:
        arr = _frozen_complex(self.data, ndim=2)
        d = self.layout.total_dim
        if arr.shape != (d, d):
            raise ValueError(f"operator shape {arr.shape} != ({d}, {d})")
        object.__setattr__(self, "data", arr)

    def is_hermitian(self, atol: float = 1e-12) -> bool:
        scale = max(1.0, float(np.abs(self.data).max()))
        return float(np.abs(self.data - self.data.conj().T).max()) <= atol * scale


def basis_state(layout: SpaceLayout, levels: Sequence[int]) -> StateVector:
    """Product basis state |levels[0], levels[1], ...> on ``layout``."""
    vec = np.zeros(layout.total_dim, dtype=np.complex128)
    vec[layout.flat_index(levels)] = 1.0
    return StateVector(vec, layout)


def annihilation(dim: int) -> NDArray[np.complexfloating]:
    """Bosonic annihilation operator truncated to ``dim`` Fock levels.

    Entry (m-1, m) is sqrt(m). A truncation below two levels cannot hold a
    photon and is rejected.
    """
    if dim < 2:
        raise ValueError(f"Fock truncation must be >= 2, got {dim}")
    a = np.zeros((dim, dim), dtype=np.complex128)
    for m in range(1, dim):
        a[m - 1, m] = math.sqrt(m)
    return a


def embed(
    local_op: ArrayLike, subsystem_index: int, layout: SpaceLayout
) -> Operator:
    """Lift a single-subsystem operator to the full space.

    Parameters
    ----------
    local_op:
        Square matrix acting on subsystem ``subsystem_index`` alone.
    subsystem_index:
        Position of the target subsystem in ``layout.dims``.
    layout:
        Full-space layout.

    Returns
    -------
    Operator
        ``I (x) ... (x) local_op (x) ... (x) I`` with identities on every
        other factor, in layout order.
    """
    if not 0 <= subsystem_index < layout.subsystem_count:
        raise ValueError(
            f"subsystem index {subsystem_index} out of range for "
            f"{layout.subsystem_count} subsystems"
        )
    local = np.asarray(local_op, dtype=np.complex128)
    d = layout.dims[subsystem_index]
    if local.shape != (d, d):
        raise ValueError(
            f"local operator shape {local.shape} does not match subsystem "
            f"dimension {d}"
        )
    before = math.prod(layout.dims[:subsystem_index])
    after = math.prod(layout.dims[subsystem_index + 1 :])
    full = np.kron(np.kron(np.eye(before), local), np.eye(after))
    return Operator(full.astype(np.complex128), layout)


def fidelity_pure(psi_id: StateVector, psi: StateVector) -> float:
    """|<psi_id|psi>|^2 for two pure states on the same layout."""
    if psi_id.layout != psi.layout:
        raise ValueError("states live on different layouts")
    overlap = complex(np.vdot(psi_id.data, psi.data))
    return abs(overlap) ** 2


def fidelity_mixed(psi_id: StateVector, rho: DensityMatrix) -> float:
    """<psi_id| rho |psi_id> as a real number.

    The quadratic form of a Hermitian matrix is real up to roundoff; an
    imaginary residue above 1e-10 means the input was corrupted somewhere
    and is treated as an error rather than silently discarded.
    """
    if psi_id.layout != rho.layout:
        raise ValueError("state and density matrix live on different layouts")
    herm_err = float(np.abs(rho.data - rho.data.conj().T).max())
    if herm_err > HERMITICITY_ATOL:
        raise ValueError(
            f"density matrix is not Hermitian: max |rho - rho^dag| = {herm_err:.3e}"
        )
    value = complex(np.vdot(psi_id.data, rho.data @ psi_id.data))
    if abs(value.imag) > 1e-10:
        raise ValueError(
            f"fidelity has imaginary part {value.imag:.3e}, expected < 1e-10"
        )
    return float(value.real)


def partial_trace(rho: DensityMatrix, keep: Sequence[int]) -> DensityMatrix:
    """Trace out every subsystem not listed in ``keep``.

    ``keep`` must be non-empty, strictly increasing, and index into
    ``rho.layout.dims``; the reduced state keeps the original subsystem
    order.
    """
    dims = rho.layout.dims
    n = len(dims)
    keep_list = [int(k) for k in keep]
    if len(keep_list) == 0:
        raise ValueError("keep must name at least one subsystem")
    if any(not 0 <= k < n for k in keep_list):
        raise ValueError(f"keep indices {keep_list} out of range for {n} subsystems")
    if sorted(set(keep_list)) != keep_list:
        raise ValueError("keep indices must be strictly increasing and unique")

    # Row-major reshape to one axis per subsystem on each side, then einsum
    # with matched labels on the traced pairs.
    tensor = rho.data.reshape(dims + dims)
    row_labels = list(range(n))
    col_labels = [n + i for i in range(n)]
    for i in range(n):
        if i not in keep_list:
            col_labels[i] = row_labels[i]
    out_labels = [row_labels[i] for i in keep_list] + [col_labels[i] for i in keep_list]
    reduced = np.einsum(tensor, row_labels + col_labels, out_labels)

    kept_dims = tuple(dims[i] for i in keep_list)
    side = math.prod(kept_dims)
    reduced = reduced.reshape(side, side)
    return DensityMatrix(reduced, SpaceLayout(kept_dims))
