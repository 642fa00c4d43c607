"""Desk-scale multimodal transformer lab.

Synthetic grid scenes stand in for images; a from-scratch micro
transformer with its own autodiff learns tagged reasoning traces via
cold-start SFT and group-relative RL with rule rewards, and re-attends
to visual tokens at decode time by re-presenting them ahead of each
reflection. See the README for the CLI pipeline.
"""

__version__ = "0.1.0"
