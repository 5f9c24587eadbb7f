"""Structural block diffusion: block-diffusion training with a mixed-scale
objective and multi-stage draft-then-revise sampling with snapshot-confidence
remasking, at desk scale."""

__version__ = "0.1.0"
