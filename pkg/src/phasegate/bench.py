"""Micro-benchmark for the Lindblad kernels on the hot segment shape.

All RK4 time in the lossy sweep is spent on cavity-mediated dispersive
holds (the dressing-pulse and transport segments advance by exact factored
channels instead; see dynamics.lindblad_channel). This module times that
workload on each backend, both restricted to its reachable 81-state set and
unrestricted at the full 128 states, so the effect of support slicing and
the numba/numpy gap are both visible. Three control-sector blocks ride per
call, matching the protocol.

Run as:  python3 -m phasegate.bench [--steps N] [--backends numba,numpy]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from . import kernels
from .dynamics import EvolutionConfig, plan_steps, reachable_support
from .model import (
    NoiseRates,
    collapse_operators,
    dispersive_hamiltonian_full,
    protocol_layout,
    qft_preset,
)

_DEFAULT_SWEEP_B2_SUM = sum(
    b * b for b in (4, 5, 6, 8, 10, 12, 15, 20, 25, 30, 40)
)


def _workloads(ratio: float):
    params = qft_preset(n=3, detuning_ratio=ratio)
    layout = protocol_layout(params.n, include_control=False)
    noise = NoiseRates.uniform(1.0 / 3.0e-2)
    collapse = [c.data for c in collapse_operators(noise, layout)]

    h_disp = dispersive_hamiltonian_full(params, layout).data
    seed = np.array(
        [
            all(lvl <= 2 for lvl in layout.unpack_index(i)[1:])
            for i in range(layout.total_dim)
        ]
    )
    mask = reachable_support(h_disp, collapse, seed)
    idx = np.flatnonzero(mask)
    grid = np.ix_(idx, idx)

    rng = np.random.default_rng(7)

    def blocks(dim: int) -> np.ndarray:
        raw = rng.normal(size=(3, dim, dim)) + 1j * rng.normal(size=(3, dim, dim))
        for b in (0, 2):
            raw[b] = raw[b] + raw[b].conj().T
        return raw / np.abs(raw).max()

    return {
        "dispersive, sliced": (
            h_disp[grid],
            [c[grid] for c in collapse],
            blocks(idx.size),
        ),
        "dispersive, full": (h_disp, collapse, blocks(layout.total_dim)),
    }


def _time_steps(h, collapse, blocks, backend: str, nsteps: int) -> tuple[float, np.ndarray]:
    _, dt = plan_steps(h, collapse, 1.0, EvolutionConfig())
    herm = np.array([True, False, True])
    kernels.rk4_lindblad(h, collapse, blocks, herm, dt, 2, backend)  # warm-up
    start = time.perf_counter()
    out = kernels.rk4_lindblad(h, collapse, blocks, herm, dt, nsteps, backend)
    elapsed = time.perf_counter() - start
    return elapsed / nsteps, out


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--ratio", type=float, default=10.0)
    parser.add_argument(
        "--backends",
        default="numba,numpy" if kernels.HAS_NUMBA else "numpy",
        help="comma-separated subset of: numba, numpy",
    )
    args = parser.parse_args(argv)
    backends = [kernels.resolve_backend(b.strip()) for b in args.backends.split(",")]

    per_step: dict[tuple[str, str], float] = {}
    results: dict[tuple[str, str], np.ndarray] = {}
    for name, (h, collapse, blocks) in _workloads(args.ratio).items():
        dim = h.shape[0]
        for backend in backends:
            seconds, out = _time_steps(h, collapse, blocks, backend, args.steps)
            per_step[name, backend] = seconds
            results[name, backend] = out
            print(
                f"{name:19s} D={dim:3d}  {backend:5s}  "
                f"{seconds * 1e3:7.3f} ms/step  {1.0 / seconds:9.0f} steps/s"
            )
        if len(backends) == 2:
            gap = float(
                np.max(np.abs(results[name, backends[0]] - results[name, backends[1]]))
            )
            print(f"{name:19s} backend max disagreement after {args.steps} steps: {gap:.2e}")

    # two sliced holds per protocol run, pi * ratio^2 radians of fast-mode
    # phase each, stepped at the cap the protocol passes its dispersive holds
    from .protocol import PROTOCOL_PHASE_CAP

    steps_per_b2 = 2.0 * np.pi / PROTOCOL_PHASE_CAP
    for backend in backends:
        projected = (
            _DEFAULT_SWEEP_B2_SUM
            * steps_per_b2
            * per_step["dispersive, sliced", backend]
        )
        print(f"projected default sweep integration time [{backend}]: {projected:.0f} s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
