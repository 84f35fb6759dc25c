"""Multi-period DC-OPF dispatch with a differentiable feasibility projection."""

__version__ = "0.1.0"
