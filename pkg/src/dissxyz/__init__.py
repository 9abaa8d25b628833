"""Driven-dissipative XYZ spin lattices: exact oracles, quantum jumps and
cumulant-truncated heterodyne trajectories, with observables and scaling tools."""

from .lattice import LatticeSpec, ModelParams, load_config
from .cumulants import CumulantState, collective_moment, moment_from_cumulants
from .qsd import IntegratorConfig, run_trajectory
from .jumps import JumpConfig, run_jump_trajectory
from .observables import EnsembleStats, merge
from .ensemble import RunManifest, run_ensemble

__all__ = [
    "LatticeSpec", "ModelParams", "load_config", "CumulantState", "collective_moment",
    "moment_from_cumulants", "IntegratorConfig", "run_trajectory", "JumpConfig",
    "run_jump_trajectory", "EnsembleStats", "merge", "RunManifest", "run_ensemble",
]
