"""Two-way clustered panels: cells keyed by (row cluster, column cluster)."""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd

from twsketch.base import (
    DuplicateCell,
    EmptyPanel,
    MissingField,
    NonFiniteValue,
    Record,
    logger,
)

# A cell map is a field name, a list of field names, or a callable that
# returns one k-vector per cell (shape (n_obs,) or (n_obs, k)).
CellMap = str | Sequence[str] | Callable[["TwoWayPanel"], np.ndarray]


class CellKey(NamedTuple):
    i: int
    j: int


@dataclass(frozen=True, eq=False)
class TwoWayPanel:
    """Immutable two-way panel stored in canonical (row label, column label) order.

    ``rows`` and ``cols`` hold dense cluster indices into ``row_labels`` and
    ``col_labels``; ``values`` has one row per present cell and one column per
    entry of ``field_names``.
    """

    row_labels: np.ndarray
    col_labels: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    field_names: tuple[str, ...]
    _index: dict[CellKey, int] | None = field(default=None, repr=False, compare=False)

    @classmethod
    def from_records(
        cls,
        i: Sequence[int] | np.ndarray,
        j: Sequence[int] | np.ndarray,
        values: Sequence[Sequence[float]] | np.ndarray,
        field_names: Sequence[str],
    ) -> TwoWayPanel:
        i = np.asarray(i, dtype=np.int64).ravel()
        j = np.asarray(j, dtype=np.int64).ravel()
        field_names = tuple(field_names)
        values = np.asarray(values, dtype=float).reshape(len(i), len(field_names))
        if len(i) == 0:
            raise EmptyPanel("panel has no cells")
        if len(j) != len(i):
            raise ValueError("i and j must have the same length")

        bad = ~np.isfinite(values)
        if bad.any():
            row, col = np.argwhere(bad)[0]
            raise NonFiniteValue(
                f"non-finite value in field '{field_names[col]}' at cell ({i[row]}, {j[row]})",
                field=field_names[col], i=int(i[row]), j=int(j[row]),
            )

        row_labels, rows = np.unique(i, return_inverse=True)
        col_labels, cols = np.unique(j, return_inverse=True)
        order = np.lexsort((cols, rows))
        rows, cols, values = rows[order], cols[order], values[order]

        same = (np.diff(rows) == 0) & (np.diff(cols) == 0)
        if same.any():
            pos = int(np.flatnonzero(same)[0])
            key = CellKey(int(row_labels[rows[pos]]), int(col_labels[cols[pos]]))
            raise DuplicateCell(f"cell ({key.i}, {key.j}) appears more than once", i=key.i, j=key.j)

        return cls(row_labels, col_labels, rows, cols, values, field_names)

    @classmethod
    def from_grid(cls, grid: np.ndarray, field_names: Sequence[str] = ("y",)) -> TwoWayPanel:
        """Balanced panel from an (N, M) or (N, M, d) array; labels are 1..N and 1..M."""
        grid = np.asarray(grid, dtype=float)
        if grid.ndim == 2:
            grid = grid[:, :, None]
        n_rows, n_cols, d = grid.shape
        if n_rows == 0 or n_cols == 0:
            raise EmptyPanel("panel has no cells")
        if d != len(field_names):
            raise ValueError(f"grid has {d} fields but {len(field_names)} names were given")
        if not np.isfinite(grid).all():
            raise NonFiniteValue("non-finite value in generated grid")
        rows, cols = np.divmod(np.arange(n_rows * n_cols), n_cols)
        return cls(
            row_labels=np.arange(1, n_rows + 1, dtype=np.int64),
            col_labels=np.arange(1, n_cols + 1, dtype=np.int64),
            rows=rows,
            cols=cols,
            values=grid.reshape(n_rows * n_cols, d),
            field_names=tuple(field_names),
        )

    @property
    def N(self) -> int:
        return len(self.row_labels)

    @property
    def M(self) -> int:
        return len(self.col_labels)

    @property
    def n_obs(self) -> int:
        return len(self.rows)

    @property
    def balanced(self) -> bool:
        return self.n_obs == self.N * self.M

    def field(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.field_names.index(name)]
        except ValueError:
            raise MissingField(f"field '{name}' not in panel", field=name, available=list(self.field_names)) from None

    def fields(self, names: Sequence[str]) -> np.ndarray:
        return np.column_stack([self.field(name) for name in names])

    def take(self, selected: np.ndarray) -> TwoWayPanel:
        """Panel restricted to the selected cells; cluster labels (and so N, M) are kept."""
        return TwoWayPanel(
            self.row_labels, self.col_labels,
            self.rows[selected], self.cols[selected], self.values[selected],
            self.field_names,
        )

    def keys(self) -> list[CellKey]:
        return [
            CellKey(int(a), int(b))
            for a, b in zip(self.row_labels[self.rows], self.col_labels[self.cols])
        ]

    def record(self, i: int, j: int) -> np.ndarray:
        if self._index is None:
            object.__setattr__(self, "_index", {key: pos for pos, key in enumerate(self.keys())})
        return self.values[self._index[CellKey(i, j)]]

    def evaluate(self, f: CellMap) -> np.ndarray:
        """Evaluate a cell map on every cell, returning an (n_obs, k) array."""
        if isinstance(f, str):
            out = self.field(f)
        elif callable(f):
            out = np.asarray(f(self), dtype=float)
        else:
            out = self.fields(list(f))
        if out.ndim == 1:
            out = out[:, None]
        if out.shape[0] != self.n_obs:
            raise ValueError(f"cell map returned {out.shape[0]} rows for {self.n_obs} cells")
        return out


@dataclass
class PanelDims(Record):
    N: int
    M: int
    C_bar: int
    lambda1_hat: float
    lambda2_hat: float


def dims(panel: TwoWayPanel) -> PanelDims:
    if panel.n_obs == 0:
        raise EmptyPanel("panel has no cells")
    c_bar = min(panel.N, panel.M)
    return PanelDims(
        N=panel.N,
        M=panel.M,
        C_bar=c_bar,
        lambda1_hat=c_bar / panel.N,
        lambda2_hat=c_bar / panel.M,
    )


def load_panel(path: str | Path, field_names: Sequence[str]) -> TwoWayPanel:
    """Read a ``i,j,<field>...`` CSV file into a panel."""
    frame = pd.read_csv(path, encoding="utf-8", float_precision="round_trip")
    frame.columns = [str(c).strip() for c in frame.columns]
    for column in ("i", "j", *field_names):
        if column not in frame.columns:
            raise MissingField(f"column '{column}' missing from {path}", field=column, path=str(path))
    if frame.empty:
        raise EmptyPanel(f"{path} has a header but no rows", path=str(path))

    labels = frame[["i", "j"]].apply(pd.to_numeric, errors="coerce")
    if labels.isna().any().any() or (labels != np.floor(labels)).any().any():
        raise NonFiniteValue(f"non-integer cluster label in {path}", path=str(path))
    values = frame[list(field_names)].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)

    panel = TwoWayPanel.from_records(
        labels["i"].to_numpy(dtype=np.int64),
        labels["j"].to_numpy(dtype=np.int64),
        values,
        field_names,
    )
    logger.info(
        "[data] Loaded %s: N=%d, M=%d, n_obs=%d%s",
        path, panel.N, panel.M, panel.n_obs, "" if panel.balanced else " (unbalanced)",
    )
    return panel


def write_panel(panel: TwoWayPanel, path: str | Path) -> None:
    frame = pd.DataFrame(panel.values, columns=list(panel.field_names))
    frame.insert(0, "j", panel.col_labels[panel.cols])
    frame.insert(0, "i", panel.row_labels[panel.rows])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
