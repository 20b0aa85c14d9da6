"""SIMOPAC: emergency health card codec and federated clinical record toolkit."""

__version__ = "0.1.0"
