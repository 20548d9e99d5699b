"""Robust MISO downlink beamforming under quantized channel feedback."""
from .builders import BeamformingInstance, DesignResult, solve_design
from .channel import Codebook, UncertaintyRegion
from .sdp_core import SdpBuilder, SdpProblem, SdpSolution, SolverSettings, Status, solve

__version__ = "0.1.0"
