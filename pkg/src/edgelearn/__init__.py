"""Desk-scale simulator for explainable and continual federated learning on edge devices."""

__version__ = "0.1.0"
