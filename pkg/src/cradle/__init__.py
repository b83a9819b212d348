"""Causal VAE for single-cell perturbation response with counterfactual artifact disentanglement."""

__version__ = "0.1.0"
