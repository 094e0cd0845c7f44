"""Dataflow graphs trained with synchronous data-parallel SGD."""

from .engine import Graph, Initializer, Session, gradients
from .models import mlp, parse_mlp

__version__ = "0.1.0"

__all__ = ["Graph", "Initializer", "Session", "gradients", "mlp", "parse_mlp"]
