"""Desk-scale reinforcement-learning active flow control for the
channel-cylinder benchmark: lattice-kinetic flow solver, graph/dense policy
networks with hand-written gradients, and a PPO trainer."""

__version__ = "0.1.0"
