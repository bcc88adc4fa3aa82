"""Desk-scale testbed for multi-turn tool-use policy optimization.

Synthetic arithmetic-chain tasks, a budgeted stateful calculator sandbox,
a small exactly-differentiable token policy, scripted-teacher cold-start
SFT, and group-relative clipped-surrogate RL with a staged curriculum.
"""

__version__ = "0.1.0"
