"""Visual deep-research agent: VQA synthesis, trajectory synthesis, rollouts and RL batch prep."""

__version__ = "0.1.0"
