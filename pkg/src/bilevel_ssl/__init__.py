"""Regularized bi-level sample reweighting for open-set semi-supervised point-cloud classification."""

__version__ = "0.1.0"
