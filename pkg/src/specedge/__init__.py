"""Collaborative LLM inference in mobile-edge networks.

Token-level simulation of conventional and parallel speculative decoding,
the MEC latency/energy model, swap-matching association, a multi-agent
soft actor-critic allocator, reference baselines and an experiment harness.
"""

from .mecmodel import Allocation, EnvState, InfeasibleAllocation, SystemParams, objective, objective_terms
from .scenario import ScenarioConfig, initial_state, load_scenario
from .specdec import ContractError, DecodeConfig, LinkTiming, SyntheticLM, VerificationMode

__version__ = "0.1.0"

__all__ = [
    "Allocation", "ContractError", "DecodeConfig", "EnvState", "InfeasibleAllocation", "LinkTiming",
    "ScenarioConfig", "SyntheticLM", "SystemParams", "VerificationMode", "initial_state", "load_scenario",
    "objective", "objective_terms",
]
