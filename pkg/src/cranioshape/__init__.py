"""Statistical shape modelling of infant head surfaces."""
__version__ = "0.1.0"
