"""Simulator for a cavity-mediated multiqubit controlled-phase gate.

The package models an n-target controlled-phase gate built from seven
sequential operations on four-level atoms coupled to a single cavity mode:
classical pulses, a resonant photon swap with a control atom, two passes of
dispersive cavity interaction, and an off-resonant phase-accumulation pulse.
It provides exact effective-model propagators, full-Hamiltonian Lindblad
integration with photon loss and atomic decay, and sweep drivers that write
deterministic CSV tables.

The commonly combined entry points are re-exported here; the full builder
and engine surface lives in the submodules (spaces, model, dynamics,
protocol, experiments).
"""

from phasegate.dynamics import EvolutionConfig, evolve_lindblad, evolve_unitary
from phasegate.experiments import (
    SweepConfig,
    run_fig4,
    run_fig5,
    run_gate_check,
    run_validate,
)
from phasegate.model import NoiseRates, PhysicalParams, protocol_layout, qft_preset
from phasegate.protocol import (
    GateAngles,
    SimulationMode,
    branch_product_final_state,
    ideal_gate_operator,
    ideal_state_after_gate,
    preset_initial_state,
    run_protocol,
)
from phasegate.spaces import (
    DensityMatrix,
    Operator,
    SpaceLayout,
    StateVector,
    annihilation,
    basis_state,
    embed,
    fidelity_mixed,
    fidelity_pure,
    partial_trace,
)

__all__ = [
    "DensityMatrix",
    "EvolutionConfig",
    "GateAngles",
    "NoiseRates",
    "Operator",
    "PhysicalParams",
    "SimulationMode",
    "SpaceLayout",
    "StateVector",
    "SweepConfig",
    "annihilation",
    "basis_state",
    "branch_product_final_state",
    "embed",
    "evolve_lindblad",
    "evolve_unitary",
    "fidelity_mixed",
    "fidelity_pure",
    "ideal_gate_operator",
    "ideal_state_after_gate",
    "partial_trace",
    "preset_initial_state",
    "protocol_layout",
    "qft_preset",
    "run_fig4",
    "run_fig5",
    "run_gate_check",
    "run_protocol",
    "run_validate",
]

__version__ = "0.1.0"
