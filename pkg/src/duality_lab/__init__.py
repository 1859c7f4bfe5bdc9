"""Duality experiments for voter, symbiotic branching and annihilating Brownian systems."""
__version__ = "0.1.0"
