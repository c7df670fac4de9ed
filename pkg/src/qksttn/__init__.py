"""Quantum-kitchen-sink feature maps coherently post-processed by dissipative
tree tensor networks: simulation, training, baselines and experiments."""

__version__ = "0.1.0"
