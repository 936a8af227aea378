"""Simulation of error-detecting qubit transmission between two cavity-QED nodes."""

from ._core import BACKEND
from .channel import ChannelParams, EnvironmentModel, NoiseConfig, ParamSampler
from .cqed import PhysicalParams, PulseSchedule, design_pulses, system_space
from .linalg import HilbertSpace, LinearOperator, StateVector
from .mcwf import IntegratorConfig, sample_trajectory
from .protocol import ProtocolOutcome, QubitInput, run_protocol, run_protocol_physical

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ChannelParams",
    "EnvironmentModel",
    "HilbertSpace",
    "IntegratorConfig",
    "LinearOperator",
    "NoiseConfig",
    "ParamSampler",
    "PhysicalParams",
    "ProtocolOutcome",
    "PulseSchedule",
    "QubitInput",
    "StateVector",
    "design_pulses",
    "run_protocol",
    "run_protocol_physical",
    "sample_trajectory",
    "system_space",
]
