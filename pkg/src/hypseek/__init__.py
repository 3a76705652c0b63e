"""Hyperbolic (Lorentz-model) metric learning for pocket-ligand retrieval and ranking."""

__version__ = "0.1.0"
