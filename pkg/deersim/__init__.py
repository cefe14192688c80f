"""
deersim - Simulate and analyse NV-center DEER measurements of surface electron spins
"""

__version__ = "0.1.0"

from .core import main
__all__ = ["main"]
