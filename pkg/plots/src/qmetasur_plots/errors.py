"""The one exception this package raises for bad inputs."""


class PlotError(Exception):
    """Input artifact is missing, malformed, or empty.

    Messages name the offending file, and the 1-based line when one is
    known, so a failing batch job points straight at the bad artifact.
    """
