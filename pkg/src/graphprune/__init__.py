"""Graph-based structured channel pruning with a self-competing RL agent."""

__version__ = "0.1.0"
