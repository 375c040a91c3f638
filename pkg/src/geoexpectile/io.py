"""CSV input parsing and round-trip-exact output tables."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = ["DataError", "Table", "parse_data", "format_value", "write_csv", "read_csv",
           "write_json"]


class DataError(ValueError):
    """Problem with an input file, located by row and column where possible."""


@dataclass
class Table:
    """Parsed CSV data: raw string cells per column plus inferred types."""

    columns: dict[str, list[str]]
    path: str = ""

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    @property
    def n_rows(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0

    def __contains__(self, name) -> bool:
        return name in self.columns

    def is_numeric(self, name: str) -> bool:
        try:
            self.numeric(name)
        except DataError:
            return False
        return True

    def numeric(self, name: str) -> np.ndarray:
        """Column as floats; non-numeric cells are reported with their row."""
        if name not in self.columns:
            raise DataError(f"column {name!r} not found in {self.path or 'data'}")
        out = np.empty(self.n_rows)
        for i, cell in enumerate(self.columns[name]):
            try:
                out[i] = float(cell)
            except ValueError:
                raise DataError(f"{self.path or 'data'}: row {i + 2}, column {name!r}: "
                                f"non-numeric value {cell!r}") from None
            if not math.isfinite(out[i]):
                raise DataError(f"{self.path or 'data'}: row {i + 2}, column {name!r}: "
                                f"non-finite value {cell!r}")
        return out

    def labels(self, name: str) -> list[str]:
        if name not in self.columns:
            raise DataError(f"column {name!r} not found in {self.path or 'data'}")
        return list(self.columns[name])


def parse_data(path) -> Table:
    """Read a UTF-8, comma-separated file with a header row.

    Row numbers in error messages count the header as row 1.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file {str(path)!r} does not exist")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        except csv.Error as exc:
            raise DataError(f"{path}: row 1: malformed CSV ({exc})") from None
        header = [h.strip() for h in header]
        if any(not h for h in header):
            raise DataError(f"{path}: row 1: empty column name")
        if len(set(header)) != len(header):
            raise DataError(f"{path}: row 1: duplicate column names")
        cols: dict[str, list[str]] = {h: [] for h in header}
        try:
            for row in reader:
                lineno = reader.line_num
                if not row:
                    continue
                if len(row) != len(header):
                    raise DataError(f"{path}: row {lineno}: expected {len(header)} fields, "
                                    f"got {len(row)}")
                for h, cell in zip(header, row):
                    cell = cell.strip()
                    if cell == "":
                        raise DataError(f"{path}: row {lineno}, column {h!r}: missing value")
                    cols[h].append(cell)
        except csv.Error as exc:
            raise DataError(f"{path}: row {reader.line_num}: malformed CSV ({exc})") from None
    if not cols[header[0]]:
        raise DataError(f"{path}: no data rows")
    return Table(cols, str(path))


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """Write rows with 17 significant digits for every float."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_value(v) for v in row])
    return path


def read_csv(path) -> list[dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
