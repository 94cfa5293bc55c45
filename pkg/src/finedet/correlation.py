"""Coarse-to-fine correlation matrix shared by the semantic and visual encoders."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from finedet.errors import ValidationError

KINDS = ("semantic-onehot", "visual-hard", "visual-soft")
SOFT_TOL = 1e-9


@dataclass(frozen=True)
class CorrelationMatrix:
    """Rows index coarse classes (or super-classes), columns fine classes.

    ``values[i, j]`` is the weight with which coarse class ``row_ids[i]``
    feeds fine class ``col_ids[j]``. Binary kinds hold 0/1 entries; the soft
    kind is column-stochastic.
    """

    values: np.ndarray
    kind: str
    row_ids: tuple[str, ...] = field(default=())
    col_ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValidationError(f"correlation matrix must be 2-D, got shape {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        rows, cols = values.shape
        row_ids = tuple(self.row_ids) or tuple(f"r{i}" for i in range(rows))
        col_ids = tuple(self.col_ids) or tuple(f"c{j}" for j in range(cols))
        object.__setattr__(self, "row_ids", row_ids)
        object.__setattr__(self, "col_ids", col_ids)
        if len(row_ids) != rows or len(col_ids) != cols:
            raise ValidationError("class id lists do not match matrix shape")
        self.validate()

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def validate(self, tol: float = SOFT_TOL) -> None:
        if self.kind not in KINDS:
            raise ValidationError(f"unknown correlation kind {self.kind!r}")
        v = self.values
        if not np.all(np.isfinite(v)):
            raise ValidationError("correlation entries must be finite")
        if np.any(v < 0):
            raise ValidationError("correlation entries must be non-negative")
        if self.kind == "visual-soft":
            if v.shape[0] and v.shape[1]:
                err = np.max(np.abs(v.sum(axis=0) - 1.0))
                if err > tol:
                    raise ValidationError(f"soft correlation columns deviate from 1 by {err:.3g}")
        elif not np.all((v == 0.0) | (v == 1.0)):
            raise ValidationError(f"{self.kind} entries must be 0 or 1")

    def column_sums(self) -> np.ndarray:
        return self.values.sum(axis=0)

    def to_text(self) -> str:
        rows, cols = self.shape
        lines = [f"CORR {self.kind} {rows} {cols}",
                 "rows " + " ".join(self.row_ids),
                 "cols " + " ".join(self.col_ids)]
        for row in self.values:
            lines.append(" ".join(repr(float(x)) for x in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CorrelationMatrix":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValidationError("empty correlation file")
        head = lines[0].split()
        if len(head) != 4 or head[0] != "CORR":
            raise ValidationError(f"bad correlation header: {lines[0]!r}")
        kind = head[1]
        try:
            rows, cols = int(head[2]), int(head[3])
        except ValueError:
            raise ValidationError(f"bad correlation header: {lines[0]!r}") from None
        if len(lines) != 3 + rows:
            raise ValidationError(f"expected {rows} matrix rows, found {len(lines) - 3}")
        row_line, col_line = lines[1].split(), lines[2].split()
        if row_line[:1] != ["rows"] or col_line[:1] != ["cols"]:
            raise ValidationError("missing rows/cols id lines")
        values = np.zeros((rows, cols))
        for i, line in enumerate(lines[3:]):
            parts = line.split()
            if len(parts) != cols:
                raise ValidationError(f"matrix row {i} has {len(parts)} entries, expected {cols}")
            values[i] = [float(x) for x in parts]
        return cls(values, kind, tuple(row_line[1:]), tuple(col_line[1:]))
