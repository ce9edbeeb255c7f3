"""Physical model: parameters, noise channels, and Hamiltonian builders.

The simulated system is one cavity mode plus n "target" atoms and one
"control" atom. Each target atom uses four levels,

        ---- |3>        (excited, couples to the cavity and the phase pulse)
        ---- |2>        (storage level for the conditional phase)
        ---- |1>        (qubit one)
        ---- |0>        (qubit zero)

while the control atom only ever uses |0> and |1> and is modeled as a qubit.
All Hamiltonians here are written in frames rotating at the relevant drive
and mode frequencies, so every builder returns a STATIC operator:

* Dispersive exchange (targets in the cavity): in the rotating frame the
  photon-exchange terms a+ |2><3| carry explicit phases exp(+/- i Delta_c t),
  where Delta_c is the cavity detuning from the 2-3 transition. Shifting the
  |3> level by Delta_c (the diagonal term below) absorbs those phases and
  leaves a static operator. Diagonal frame changes commute with every
  lowering-type dissipator used here (each jump operator just picks up a
  global phase, which cancels inside the dissipator), so Lindblad evolution
  may be integrated directly in this frame.
* Resonant processes (the control-atom photon swap, the 1-2 Rabi pulse) have
  no residual detuning and are static in their co-rotating frames as written.
* The off-resonant 2-3 phase pulse keeps its detuning Delta as a |3> level
  shift, in exact analogy with the dispersive case.

Angular frequencies are in rad/s throughout (a 50 kHz coupling enters as
2*pi*5e4), times in seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import TYPE_CHECKING, Mapping

import numpy as np

from phasegate.spaces import Operator, SpaceLayout, annihilation, embed

if TYPE_CHECKING:
    from numpy.typing import NDArray

__all__ = [
    "ATOM_LEVELS",
    "DECAY_PATHS",
    "PhysicalParams",
    "NoiseRates",
    "PulseSpec",
    "protocol_layout",
    "layout_structure",
    "target_subsystem",
    "control_subsystem",
    "dispersive_hamiltonian_full",
    "dispersive_hamiltonian_effective",
    "resonant_jc_hamiltonian",
    "resonant_pulse_hamiltonian",
    "offresonant_pulse_hamiltonian",
    "stark_phase",
    "collapse_operators",
    "qft_parameters",
    "required_quality_factor",
    "qft_preset",
]

ATOM_LEVELS = 4

# Spontaneous-decay paths of a target atom, ordered (from_level, to_level),
# highest origin first. Every dissipative channel in the model is one of
# these or the cavity photon loss.
DECAY_PATHS: tuple[tuple[int, int], ...] = (
    (3, 2),
    (3, 1),
    (3, 0),
    (2, 1),
    (2, 0),
    (1, 0),
)

_REL_TOL = 1e-9


@dataclass(frozen=True)
class PhysicalParams:
    """Couplings, detunings, and durations for one protocol configuration.

    Attributes
    ----------
    n:
        Number of target atoms.
    coupling:
        Nominal cavity coupling g of the 2-3 transition (rad/s). Step
        durations are always computed from nominal values: the experimenter
        sets timers from the design numbers, not from whatever coupling each
        atom actually realized.
    couplings_actual:
        Realized cavity coupling of each target atom (rad/s), length n.
        Equal to ``coupling`` when nothing deviates.
    control_coupling:
        Nominal coupling of the control atom's photon swap (rad/s).
    control_coupling_actual:
        Realized control-swap coupling (rad/s).
    cavity_detuning:
        Detuning Delta_c between cavity mode and the 2-3 transition during
        the dispersive steps (rad/s).
    pulse_detuning:
        Detuning Delta of the off-resonant 2-3 phase pulse (rad/s).
    resonant_rabi:
        Rabi frequency of the resonant 1-2 pulses (rad/s).
    stark_rabis:
        Rabi frequency of the off-resonant phase pulse on each target
        (rad/s), length n.
    stark_duration:
        Duration tau of the off-resonant phase pulse (s).
    transport_time:
        Free-decay time for one atom transport event (s).
    detuning_ratio:
        The dimensionless ratio b = Delta_c / g = Delta / Omega_2 when this
        parameter set was generated from one; optional. When set, the two
        detunings must actually satisfy those relations.
    fock_cutoff:
        Cavity Fock-space truncation (>= 2). The protocol never creates more
        than one photon, so 2 is exact; 3 exists to demonstrate that.
    """

    n: int
    coupling: float
    couplings_actual: tuple[float, ...]
    control_coupling: float
    control_coupling_actual: float
    cavity_detuning: float
    pulse_detuning: float
    resonant_rabi: float
    stark_rabis: tuple[float, ...]
    stark_duration: float
    transport_time: float
    detuning_ratio: float | None = None
    fock_cutoff: int = 2

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"need at least one target atom, got n={self.n}")
        if self.fock_cutoff < 2:
            raise ValueError(f"fock_cutoff must be >= 2, got {self.fock_cutoff}")
        object.__setattr__(
            self, "couplings_actual", tuple(float(g) for g in self.couplings_actual)
        )
        object.__setattr__(
            self, "stark_rabis", tuple(float(w) for w in self.stark_rabis)
        )
        if len(self.couplings_actual) != self.n:
            raise ValueError(
                f"couplings_actual has {len(self.couplings_actual)} entries, "
                f"expected n={self.n}"
            )
        if len(self.stark_rabis) != self.n:
            raise ValueError(
                f"stark_rabis has {len(self.stark_rabis)} entries, expected n={self.n}"
            )
        for name in ("coupling", "control_coupling", "resonant_rabi"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.stark_duration < 0 or self.transport_time < 0:
            raise ValueError("durations must be non-negative")
        if self.detuning_ratio is not None:
            b = self.detuning_ratio
            if not math.isclose(
                self.cavity_detuning, b * self.coupling, rel_tol=_REL_TOL
            ):
                raise ValueError(
                    "cavity_detuning is not detuning_ratio * coupling: "
                    f"{self.cavity_detuning} vs {b * self.coupling}"
                )
            if not math.isclose(
                self.pulse_detuning, b * self.stark_rabis[0], rel_tol=_REL_TOL
            ):
                raise ValueError(
                    "pulse_detuning is not detuning_ratio * stark_rabis[0]: "
                    f"{self.pulse_detuning} vs {b * self.stark_rabis[0]}"
                )


@dataclass(frozen=True)
class NoiseRates:
    """Dissipation rates: cavity photon loss plus atomic decay per path.

    ``atom_decay`` maps a decay path (from_level, to_level) to its rate
    (rad/s); paths must come from :data:`DECAY_PATHS`. A population on a
    level decays at twice the sum of its outgoing path rates, matching the
    unhalved dissipator convention used by the integrator (a single photon
    survives as exp(-2 kappa t)).
    """

    cavity_decay: float
    atom_decay: Mapping[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.cavity_decay < 0:
            raise ValueError(f"cavity decay rate must be >= 0, got {self.cavity_decay}")
        clean: dict[tuple[int, int], float] = {}
        for path, rate in dict(self.atom_decay).items():
            key = (int(path[0]), int(path[1]))
            if key not in DECAY_PATHS:
                raise ValueError(f"unknown decay path {key}")
            if rate < 0:
                raise ValueError(f"decay rate for path {key} must be >= 0, got {rate}")
            clean[key] = float(rate)
        object.__setattr__(self, "atom_decay", MappingProxyType(clean))

    @classmethod
    def uniform(cls, rate: float) -> "NoiseRates":
        """Equal rate for photon loss and every atomic decay path."""
        return cls(rate, {path: rate for path in DECAY_PATHS})

    @classmethod
    def from_relaxation_times(cls, lifetime: float) -> "NoiseRates":
        """Rates from one quoted energy relaxation time for every channel.

        Under the unhalved dissipator convention a rate parameter r makes
        the matching population decay as exp(-2 r t), so realizing a
        relaxation time T takes r = 1/(2 T). Every atomic path gets the
        full per-level rate rather than a share of it, which overstates the
        loss of the multi-path levels and so errs on the pessimistic side.
        """
        if lifetime <= 0:
            raise ValueError(f"relaxation time must be positive, got {lifetime}")
        return cls.uniform(0.5 / lifetime)

    @classmethod
    def none(cls) -> "NoiseRates":
        return cls(0.0, {})


@dataclass(frozen=True)
class PulseSpec:
    """One classical pulse on a target atom's 1-2 transition.

    ``phase`` is the drive phase phi in H = rabi * (exp(-i phi)|2><1| +
    exp(+i phi)|1><2|); the protocol only ever uses phi = -pi/2 and +pi/2,
    which rotate |1>, |2> into and out of their symmetric combinations.
    """

    transition: tuple[int, int]
    phase: float
    rabi: float
    duration: float

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "transition", (int(self.transition[0]), int(self.transition[1]))
        )
        if self.rabi <= 0:
            raise ValueError(f"pulse rabi must be positive, got {self.rabi}")
        if self.duration < 0:
            raise ValueError(f"pulse duration must be >= 0, got {self.duration}")


# ------------------------------------------------------------------
# Layout conventions
# ------------------------------------------------------------------


def protocol_layout(
    n: int, fock_cutoff: int = 2, include_control: bool = True
) -> SpaceLayout:
    """Standard subsystem ordering: cavity, n target atoms, then control.

    The control factor is dropped (``include_control=False``) for the
    protocol segments during which the control atom is far from the cavity
    and completely idle.
    """
    dims: tuple[int, ...] = (fock_cutoff,) + (ATOM_LEVELS,) * n
    if include_control:
        dims = dims + (2,)
    return SpaceLayout(dims)


def layout_structure(layout: SpaceLayout) -> tuple[int, bool]:
    """Return (target count, control present) for a protocol layout.

    Rejects layouts that do not follow the (cavity, targets..., control?)
    convention built by :func:`protocol_layout`.
    """
    dims = layout.dims
    if len(dims) < 2:
        raise ValueError("protocol layouts need a cavity and at least one atom")
    has_control = (
        len(dims) > 2
        and dims[-1] == 2
        and all(d == ATOM_LEVELS for d in dims[1:-1])
    )
    n = len(dims) - 2 if has_control else len(dims) - 1
    body = dims[1 : 1 + n]
    if n < 1 or any(d != ATOM_LEVELS for d in body):
        raise ValueError(f"layout {dims} does not match (cavity, 4 x n, control?)")
    return n, has_control


def target_subsystem(j: int) -> int:
    """Layout index of target atom j (0-based); targets follow the cavity."""
    return 1 + j


def control_subsystem(layout: SpaceLayout) -> int:
    """Layout index of the control atom, which is always the last factor."""
    n, has_control = layout_structure(layout)
    if not has_control:
        raise ValueError("layout has no control atom")
    return 1 + n


def _level_projector(level: int) -> NDArray[np.complexfloating]:
    p = np.zeros((ATOM_LEVELS, ATOM_LEVELS), dtype=np.complex128)
    p[level, level] = 1.0
    return p


def _level_transfer(to_level: int, from_level: int) -> NDArray[np.complexfloating]:
    t = np.zeros((ATOM_LEVELS, ATOM_LEVELS), dtype=np.complex128)
    t[to_level, from_level] = 1.0
    return t


# ------------------------------------------------------------------
# Hamiltonian builders
# ------------------------------------------------------------------


def dispersive_hamiltonian_full(
    params: PhysicalParams, layout: SpaceLayout
) -> Operator:
    """Cavity-atom exchange Hamiltonian for the dispersive segments.

    H = Delta_c * sum_k |3><3|_k
        + sum_k g_k (a+ |2><3|_k + |3><2|_k a)

    with g_k the realized per-atom couplings. The |3> level shift is the
    detuning absorbed into the static frame (see the module docstring); the
    exchange part swaps one photon against one 2-3 atomic excitation, so
    a+a + sum_k |3><3|_k commutes with H.

    The control atom, when present in the layout, is untouched.
    """
    n, _ = layout_structure(layout)
    if n != params.n:
        raise ValueError(f"layout has {n} targets, params expect {params.n}")
    a_full = embed(annihilation(layout.dims[0]), 0, layout).data
    dim = layout.total_dim
    h = np.zeros((dim, dim), dtype=np.complex128)
    for j in range(n):
        sub = target_subsystem(j)
        h += params.cavity_detuning * embed(_level_projector(3), sub, layout).data
        lower = embed(_level_transfer(2, 3), sub, layout).data
        exchange = params.couplings_actual[j] * (a_full.conj().T @ lower)
        h += exchange + exchange.conj().T
    return Operator(h, layout)


def dispersive_hamiltonian_effective(
    params: PhysicalParams, layout: SpaceLayout
) -> Operator:
    """Second-order effective Hamiltonian of the dispersive segments.

    H_eff = - sum_k (g_k^2 / Delta_c) * a+a |2><2|_k

    which is diagonal: each photon present shifts every |2>-level atom by
    its dispersive light shift. Valid for |g_k| << |Delta_c|; the detuning
    must be nonzero for the expansion to exist at all.
    """
    if params.cavity_detuning == 0:
        raise ValueError("effective dispersive Hamiltonian requires a nonzero detuning")
    n, _ = layout_structure(layout)
    if n != params.n:
        raise ValueError(f"layout has {n} targets, params expect {params.n}")
    a = annihilation(layout.dims[0])
    photon_number = embed(a.conj().T @ a, 0, layout).data
    dim = layout.total_dim
    h = np.zeros((dim, dim), dtype=np.complex128)
    for j in range(n):
        shift = params.couplings_actual[j] ** 2 / params.cavity_detuning
        proj = embed(_level_projector(2), target_subsystem(j), layout).data
        h -= shift * (photon_number @ proj)
    return Operator(h, layout)


def resonant_jc_hamiltonian(coupling: float, layout: SpaceLayout) -> Operator:
    """Resonant photon swap between the cavity and the control qubit.

    H = coupling * (a+ |0><1|_c + a |1><0|_c)

    where |0><1|_c lowers the control atom. A half swap moves the control
    excitation onto the cavity as -i|photon>, the inverse three-quarter swap
    brings it back with +i.
    """
    ctrl = control_subsystem(layout)
    a_full = embed(annihilation(layout.dims[0]), 0, layout).data
    lower = np.zeros((2, 2), dtype=np.complex128)
    lower[0, 1] = 1.0
    lower_full = embed(lower, ctrl, layout).data
    half = coupling * (a_full.conj().T @ lower_full)
    return Operator(half + half.conj().T, layout)


def resonant_pulse_hamiltonian(
    pulse: PulseSpec, atom_index: int, layout: SpaceLayout
) -> Operator:
    """Classical resonant drive of one target atom's 1-2 transition.

    H = rabi * (exp(-i phase) |2><1| + exp(+i phase) |1><2|)

    ``atom_index`` is the layout subsystem index of the driven atom.
    """
    if pulse.transition != (1, 2):
        raise ValueError(
            f"resonant pulse drives the (1, 2) transition, got {pulse.transition}"
        )
    if layout.dims[atom_index] != ATOM_LEVELS:
        raise ValueError(f"subsystem {atom_index} is not a four-level atom")
    raising = pulse.rabi * np.exp(-1j * pulse.phase) * _level_transfer(2, 1)
    local = raising + raising.conj().T
    return embed(local, atom_index, layout)


def offresonant_pulse_hamiltonian(
    rabi: float, detuning: float, atom_index: int, layout: SpaceLayout
) -> Operator:
    """Off-resonant classical drive of one target atom's 2-3 transition.

    H = detuning * |3><3| + rabi * (|2><3| + |3><2|)

    The detuning term is the level shift that makes the drive frame static.
    Over a time t this imprints the light-shift phase rabi^2 t / detuning on
    |2> while only virtually occupying |3>.
    """
    if layout.dims[atom_index] != ATOM_LEVELS:
        raise ValueError(f"subsystem {atom_index} is not a four-level atom")
    local = detuning * _level_projector(3)
    local += rabi * (_level_transfer(2, 3) + _level_transfer(3, 2))
    return embed(local, atom_index, layout)


def stark_phase(
    rabi: float, duration: float, detuning: float, *, mod_two_pi: bool = False
) -> float:
    """Light-shift phase rabi^2 * duration / detuning of an off-resonant pulse."""
    if detuning == 0:
        raise ValueError("stark phase requires a nonzero detuning")
    theta = rabi**2 * duration / detuning
    if mod_two_pi:
        theta = math.fmod(theta, 2.0 * math.pi)
        if theta < 0:
            theta += 2.0 * math.pi
    return theta


def collapse_operators(noise: NoiseRates, layout: SpaceLayout) -> list[Operator]:
    """Jump operators sqrt(rate) * op for every active dissipation channel.

    Cavity loss contributes sqrt(kappa) * a; each target atom contributes
    sqrt(gamma_path) |to><from| for each of its decay paths. Channels with
    zero rate are omitted. The control atom has no decay channels in this
    model: its qubit levels are assumed long-lived on every timescale here.

    Operators come out in a fixed order (cavity, then atoms in layout order
    with paths as listed in DECAY_PATHS) so downstream superoperator
    assembly is deterministic.
    """
    n, _ = layout_structure(layout)
    ops: list[Operator] = []
    if noise.cavity_decay > 0:
        a = math.sqrt(noise.cavity_decay) * annihilation(layout.dims[0])
        ops.append(embed(a, 0, layout))
    for j in range(n):
        sub = target_subsystem(j)
        for path in DECAY_PATHS:
            rate = noise.atom_decay.get(path, 0.0)
            if rate > 0:
                from_level, to_level = path
                local = math.sqrt(rate) * _level_transfer(to_level, from_level)
                ops.append(embed(local, sub, layout))
    return ops


def qft_parameters(
    n: int, omega_2: float, delta: float
) -> tuple[tuple[float, ...], float]:
    """Pulse strengths and duration realizing Fourier-transform phase angles.

    Target k (k = 2 .. n+1 in protocol numbering) is driven at
    Omega_k = Omega_2 / sqrt(2)^(k-2) for the common duration
    tau = (delta / Omega_2^2) * (2 pi / 4), which makes each conditional
    phase theta_k = Omega_k^2 tau / delta = 2 pi / 2^k.
    """
    if n < 1:
        raise ValueError(f"need at least one target, got n={n}")
    if omega_2 <= 0:
        raise ValueError("omega_2 must be positive")
    if delta == 0:
        raise ValueError("delta must be nonzero")
    rabis = tuple(omega_2 / math.sqrt(2.0) ** k for k in range(n))
    tau = (delta / omega_2**2) * (2.0 * math.pi / 4.0)
    return rabis, tau


def required_quality_factor(omega_c: float, kappa: float) -> float:
    """Cavity quality factor omega_c / kappa needed for a photon lifetime 1/kappa."""
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    if omega_c <= 0:
        raise ValueError(f"omega_c must be positive, got {omega_c}")
    return omega_c / kappa


def qft_preset(
    n: int = 3,
    detuning_ratio: float = 10.0,
    deviation: float = 0.99,
    fock_cutoff: int = 2,
) -> PhysicalParams:
    """Reference parameter set: Fourier-transform angles on n targets.

    Nominal couplings are g = g_r = 2 pi * 50 kHz with Omega_r = g_r and
    Omega_2 = g; both detunings scale with the single knob
    ``detuning_ratio`` (Delta_c = ratio * g, Delta = ratio * Omega_2), and
    every realized coupling is ``deviation`` times its nominal value. One
    transport event costs 1 us of free decay.
    """
    g = 2.0 * math.pi * 5.0e4
    rabis, tau = qft_parameters(n, g, detuning_ratio * g)
    return PhysicalParams(
        n=n,
        coupling=g,
        couplings_actual=tuple(deviation * g for _ in range(n)),
        control_coupling=g,
        control_coupling_actual=deviation * g,
        cavity_detuning=detuning_ratio * g,
        pulse_detuning=detuning_ratio * g,
        resonant_rabi=g,
        stark_rabis=rabis,
        stark_duration=tau,
        transport_time=1.0e-6,
        detuning_ratio=detuning_ratio,
        fock_cutoff=fock_cutoff,
    )
