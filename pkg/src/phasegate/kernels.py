"""Inner loops for Lindblad integration, in two interchangeable flavors.

The master equation integrated here is

    drho/dt = -i[H, rho] + sum_j (2 c_j rho c_j+ - c_j+ c_j rho - rho c_j+ c_j)

with the rate already folded into each c_j. Writing G = -iH - sum_j c_j+ c_j
turns the right-hand side into G rho + rho G+ + 2 sum_j c_j rho c_j+, which
is what both backends evaluate inside a classic fixed-step RK4 loop over a
small batch of matrices sharing one generator.

numba backend
    The full generator is assembled once as a sparse superoperator acting on
    row-major vec(rho),

        L = G (x) I + I (x) conj(G) + 2 sum_j c_j (x) conj(c_j),

    and each RK4 stage is one CSR matvec, batched over the block columns.
    This is the fast path: L for the spaces used here has a few nonzeros per
    row and fits in cache.

numpy backend
    Dense G matmuls broadcast over the batch axis plus scatter/gather
    evaluation of the jump terms from their nonzero entries. No
    superoperator is formed. Deliberately a different evaluation route, so
    agreement between the two backends is a real cross-check, not a rerun.

Select with EvolutionConfig(backend=...) or the PHASEGATE_BACKEND
environment variable ("numba" or "numpy"); numba is the default when
importable.
"""

from __future__ import annotations

import os

import numpy as np
import scipy.sparse as sp

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - the mirror always has numba
    HAS_NUMBA = False

ENV_FLAG = "PHASEGATE_BACKEND"
BACKENDS = ("numba", "numpy")

__all__ = [
    "BACKENDS",
    "ENV_FLAG",
    "HAS_NUMBA",
    "default_backend",
    "resolve_backend",
    "rk4_lindblad",
    "superop_dense",
]


def default_backend() -> str:
    """Backend chosen by the environment, or the fastest available one."""
    value = os.environ.get(ENV_FLAG, "").strip().lower()
    if value:
        return resolve_backend(value)
    return "numba" if HAS_NUMBA else "numpy"


def resolve_backend(name: str) -> str:
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}, expected one of {BACKENDS}")
    if name == "numba" and not HAS_NUMBA:
        raise ValueError("numba backend requested but numba is not importable")
    return name


def _effective_generator(
    h: np.ndarray, collapse: list[np.ndarray]
) -> np.ndarray:
    g = -1j * h
    for c in collapse:
        g = g - c.conj().T @ c
    return g


def superop_dense(h: np.ndarray, collapse: list[np.ndarray]) -> np.ndarray:
    """Dense matrix of the full generator acting on row-major vec(rho)."""
    g = _effective_generator(h, collapse)
    eye = np.eye(h.shape[0], dtype=np.complex128)
    lsup = np.kron(g, eye) + np.kron(eye, g.conj())
    for c in collapse:
        lsup += 2.0 * np.kron(c, c.conj())
    return lsup


def rk4_lindblad(
    h: np.ndarray,
    collapse: list[np.ndarray],
    blocks: np.ndarray,
    hermitian: np.ndarray,
    dt: float,
    nsteps: int,
    backend: str,
) -> np.ndarray:
    """Advance a batch of matrices by nsteps of RK4 under one generator.

    blocks has shape (B, D, D); hermitian is a length-B bool array marking
    blocks to re-symmetrize after every step. Returns a new (B, D, D) array.
    """
    if nsteps == 0:
        return blocks.copy()
    if backend == "numba":
        return _run_numba(h, collapse, blocks, hermitian, dt, nsteps)
    if backend == "numpy":
        return _run_numpy(h, collapse, blocks, hermitian, dt, nsteps)
    raise ValueError(f"unknown backend {backend!r}")


# ------------------------------------------------------------------
# numba path: CSR superoperator
# ------------------------------------------------------------------


def _superop_csr(h: np.ndarray, collapse: list[np.ndarray]):
    g = sp.csr_matrix(_effective_generator(h, collapse))
    eye = sp.identity(h.shape[0], dtype=np.complex128, format="csr")
    lsup = sp.kron(g, eye) + sp.kron(eye, g.conj())
    for c in collapse:
        c_s = sp.csr_matrix(c)
        lsup = lsup + 2.0 * sp.kron(c_s, c_s.conj())
    lsup = sp.csr_matrix(lsup)
    lsup.sum_duplicates()
    lsup.sort_indices()
    return (
        lsup.indptr.astype(np.int64),
        lsup.indices.astype(np.int64),
        lsup.data.astype(np.complex128),
    )


def _run_numba(h, collapse, blocks, hermitian, dt, nsteps):
    indptr, indices, data = _superop_csr(h, collapse)
    nb, d, _ = blocks.shape
    # (D*D, B) with the batch axis contiguous per row of L; the copy also
    # shields the caller's buffers, which may be read-only containers
    x = blocks.reshape(nb, d * d).T.copy()
    _rk4_csr_steps(
        indptr,
        indices,
        data,
        x,
        np.ascontiguousarray(hermitian, dtype=np.bool_),
        d,
        float(dt),
        int(nsteps),
    )
    return np.ascontiguousarray(x.T).reshape(nb, d, d)


if HAS_NUMBA:

    @njit(cache=True)
    def _spmv_csr(indptr, indices, data, x, out):  # pragma: no cover - jitted
        nrows, nb = x.shape
        for i in range(nrows):
            lo = indptr[i]
            hi = indptr[i + 1]
            if nb == 3:
                # common case: three control-sector blocks ride together
                a0 = 0.0j
                a1 = 0.0j
                a2 = 0.0j
                for p in range(lo, hi):
                    v = data[p]
                    j = indices[p]
                    a0 += v * x[j, 0]
                    a1 += v * x[j, 1]
                    a2 += v * x[j, 2]
                out[i, 0] = a0
                out[i, 1] = a1
                out[i, 2] = a2
            else:
                for b in range(nb):
                    out[i, b] = 0.0j
                for p in range(lo, hi):
                    v = data[p]
                    j = indices[p]
                    for b in range(nb):
                        out[i, b] += v * x[j, b]

    @njit(cache=True)
    def _rk4_csr_steps(
        indptr, indices, data, x, hermitian, d, dt, nsteps
    ):  # pragma: no cover - jitted
        nrows, nb = x.shape
        k1 = np.empty_like(x)
        k2 = np.empty_like(x)
        k3 = np.empty_like(x)
        k4 = np.empty_like(x)
        y = np.empty_like(x)
        half = 0.5 * dt
        sixth = dt / 6.0
        for step in range(nsteps):
            _spmv_csr(indptr, indices, data, x, k1)
            for i in range(nrows):
                for b in range(nb):
                    y[i, b] = x[i, b] + half * k1[i, b]
            _spmv_csr(indptr, indices, data, y, k2)
            for i in range(nrows):
                for b in range(nb):
                    y[i, b] = x[i, b] + half * k2[i, b]
            _spmv_csr(indptr, indices, data, y, k3)
            for i in range(nrows):
                for b in range(nb):
                    y[i, b] = x[i, b] + dt * k3[i, b]
            _spmv_csr(indptr, indices, data, y, k4)
            for i in range(nrows):
                for b in range(nb):
                    x[i, b] += sixth * (
                        k1[i, b] + 2.0 * (k2[i, b] + k3[i, b]) + k4[i, b]
                    )
            # the generator preserves hermiticity exactly, so this cleanup
            # only fights roundoff; running it sparsely keeps a full matrix
            # pass out of the hot loop
            if step % 64 == 63 or step == nsteps - 1:
                for b in range(nb):
                    if hermitian[b]:
                        for r in range(d):
                            rr = r * d
                            x[rr + r, b] = complex(x[rr + r, b].real, 0.0)
                            for c in range(r + 1, d):
                                u = x[rr + c, b]
                                v = x[c * d + r, b]
                                m = 0.5 * (u + v.conjugate())
                                x[rr + c, b] = m
                                x[c * d + r, b] = m.conjugate()


# ------------------------------------------------------------------
# numpy path: dense generator plus jump scatter/gather
# ------------------------------------------------------------------


def _jump_terms(collapse: list[np.ndarray]):
    terms = []
    for c in collapse:
        rows, cols = np.nonzero(c)
        if rows.size == 0:
            continue
        vals = c[rows, cols]
        weight = 2.0 * np.outer(vals, vals.conj())
        unique_rows = len(np.unique(rows)) == rows.size
        terms.append((rows, cols, weight, unique_rows))
    return terms


def _run_numpy(h, collapse, blocks, hermitian, dt, nsteps):
    g = _effective_generator(h, collapse)
    g_dag = g.conj().T
    terms = _jump_terms(collapse)

    def rhs(x):
        out = g @ x + x @ g_dag
        for rows, cols, weight, unique_rows in terms:
            sub = weight[None, :, :] * x[:, cols[:, None], cols[None, :]]
            if unique_rows:
                out[:, rows[:, None], rows[None, :]] += sub
            else:
                np.add.at(out, (slice(None), rows[:, None], rows[None, :]), sub)
        return out

    x = blocks.copy()
    herm_idx = np.flatnonzero(hermitian)
    for _ in range(nsteps):
        k1 = rhs(x)
        k2 = rhs(x + (0.5 * dt) * k1)
        k3 = rhs(x + (0.5 * dt) * k2)
        k4 = rhs(x + dt * k3)
        x += (dt / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
        if herm_idx.size:
            xh = x[herm_idx]
            x[herm_idx] = 0.5 * (xh + xh.conj().transpose(0, 2, 1))
    return x
