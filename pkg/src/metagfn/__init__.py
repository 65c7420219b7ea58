"""Meta-GFlowNet design of time-modulated IRS parameters for directional modulation."""

__version__ = "0.1.0"
