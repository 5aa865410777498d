"""Generative classification toolkit.

Trains small class-conditional diffusion models and classifies by
per-class noise-prediction error, with statistical pruning, uncertainty
quantification, anomaly detection, and counterfactual heatmaps.
"""

__version__ = "0.1.0"
