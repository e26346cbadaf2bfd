"""Gradient-based multi-agent proximal learning on a differentiable three-phase feeder."""
