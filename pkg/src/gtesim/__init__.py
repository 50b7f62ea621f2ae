"""Simulation and debiased estimation of global treatment effects under
creator-side randomization with an algorithmic exposure bottleneck."""

__version__ = "0.1.0"
