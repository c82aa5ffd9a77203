"""Figure rendering for the survival-model CSV outputs.

This layer is deliberately decoupled from the modeling package: it reads only
the documented CSV schemas, so it can be installed, upgraded, or deleted
without touching any model code or test.
"""

from .render import KINDS, PlotSpec, SchemaError, render

__all__ = ["KINDS", "PlotSpec", "SchemaError", "render"]
__version__ = "0.1.0"
