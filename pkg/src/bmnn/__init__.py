"""Feedforward networks trained with layer-wise adaptive rates from back-matching propagation."""

__version__ = "0.1.0"
