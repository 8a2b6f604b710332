"""Unified network equilibrium for e-hailing platforms."""
from . import assignment, dispatch, equilibrium, matching, modechoice, netio, odgraph

__all__ = ["assignment", "dispatch", "equilibrium", "matching", "modechoice",
           "netio", "odgraph"]
__version__ = "0.1.0"
