"""Post-hoc figures from qmetasur run directories.

This package reads only the documented schema-headed text tables a run
directory emits — it never imports the optimization toolkit — and
renders Pareto-front overlays, training curves, and method-comparison
bars as deterministic PNGs.
"""

from .errors import PlotError
from .render import KINDS, PlotJob, render
from .tables import Table, load_table

__all__ = ["KINDS", "PlotError", "PlotJob", "Table", "load_table", "render"]
