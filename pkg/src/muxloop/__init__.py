"""Model, simulator and controller of a switch-and-loop multiplexed photon source."""

from .model import (
    ChannelModel,
    Law,
    MuxConfig,
    PhotonStatistics,
    enhancement,
    multiplexed_coincidence_prob,
)
from .sim import SimConfig, simulate_cycles

__version__ = "0.1.0"

__all__ = [
    "ChannelModel",
    "Law",
    "MuxConfig",
    "PhotonStatistics",
    "SimConfig",
    "enhancement",
    "multiplexed_coincidence_prob",
    "simulate_cycles",
]
