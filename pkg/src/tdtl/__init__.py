"""Transductive deep transfer learning at desk scale, with baselines and descriptors."""

__version__ = "0.1.0"
