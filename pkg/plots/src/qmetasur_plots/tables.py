"""Reader for the schema-headed text tables a run directory emits.

The format is deliberately tiny: line 1 is ``# qmetasur.<name>.v1``,
line 2 the comma-separated column names, every further non-blank line
one comma-separated row of the same width. This module parses that
format from the files alone; it shares no code with the package that
writes them, so it doubles as a check that the documented contract is
enough to consume the artifacts.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

from .errors import PlotError

_HEADER = re.compile(r"^# (qmetasur\.[a-z0-9_]+\.v1)$")


@dataclass(frozen=True)
class Table:
    """One parsed table: schema name, column names, string-valued rows."""

    path: Path
    name: str
    columns: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...]

    def column(self, name: str) -> list[str]:
        if name not in self.columns:
            raise PlotError(f"{self.path}: no column {name!r} in {self.columns}")
        i = self.columns.index(name)
        return [row[i] for row in self.rows]

    def floats(self, name: str) -> list[float]:
        out = []
        for n, cell in enumerate(self.column(name), start=3):
            try:
                out.append(float(cell))
            except ValueError:
                raise PlotError(
                    f"{self.path}:{n}: column {name!r} holds non-numeric {cell!r}"
                ) from None
        return out


def load_table(path: Path, expect: str) -> Table:
    """Parse one table and require its schema name to be ``expect``."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise PlotError(f"{path}: {e.strerror or e}") from None
    if not lines:
        raise PlotError(f"{path}:1: empty file, expected a schema header")
    m = _HEADER.match(lines[0])
    if m is None:
        raise PlotError(f"{path}:1: malformed schema header {lines[0]!r}")
    if m.group(1) != f"qmetasur.{expect}.v1":
        raise PlotError(
            f"{path}:1: expected qmetasur.{expect}.v1, found {m.group(1)}"
        )
    if len(lines) < 2 or not lines[1]:
        raise PlotError(f"{path}:2: missing column names")
    columns = tuple(lines[1].split(","))
    rows = []
    for n, line in enumerate(lines[2:], start=3):
        if not line:
            continue
        row = tuple(line.split(","))
        if len(row) != len(columns):
            raise PlotError(
                f"{path}:{n}: row has {len(row)} cells, expected {len(columns)}"
            )
        rows.append(row)
    return Table(path=path, name=m.group(1), columns=columns, rows=tuple(rows))


def require_rows(table: Table) -> Table:
    """Reject an empty table before any output is produced."""
    if not table.rows:
        raise PlotError(f"{table.path}: table has no data rows")
    return table
