"""Desk-scale video virtual try-on: differentiable warping, temporal flow
tracking, and a dual-stream patch-attention generator, on plain numpy."""

__version__ = "0.1.0"
