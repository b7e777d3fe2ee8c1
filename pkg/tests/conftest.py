from __future__ import annotations

from collections.abc import Callable

import numpy as np
import pytest

from twsketch.data import TwoWayPanel
from twsketch.sketch import SketchMask


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def grid_2x2() -> TwoWayPanel:
    # cells in canonical order: (1,1)=1, (1,2)=2, (2,1)=3, (2,2)=4
    return TwoWayPanel.from_grid(np.array([[1.0, 2.0], [3.0, 4.0]]))


@pytest.fixture
def mask_of() -> Callable[..., SketchMask]:
    """Build a mask from an explicit boolean selection."""

    def make(selected, p: float = 1.0) -> SketchMask:
        selected = np.asarray(selected, dtype=bool)
        return SketchMask(
            selected=selected, p=p, L_hat=int(selected.sum()), L_expected=len(selected) * p, seed=0,
        )

    return make


@pytest.fixture
def random_panel() -> Callable[..., TwoWayPanel]:
    """Random possibly-unbalanced panel with arbitrary integer labels."""

    def make(rng: np.random.Generator, N: int, M: int, k: int = 1, drop: float = 0.0) -> TwoWayPanel:
        row_labels = rng.choice(10_000, size=N, replace=False)
        col_labels = rng.choice(10_000, size=M, replace=False)
        ii, jj = np.meshgrid(row_labels, col_labels, indexing="ij")
        keep = rng.random(N * M) >= drop
        keep[0] = True
        values = rng.standard_normal((N * M, k))
        return TwoWayPanel.from_records(
            ii.ravel()[keep], jj.ravel()[keep], values[keep], [f"w{c}" for c in range(k)],
        )

    return make


@pytest.fixture
def brute_gamma_A() -> Callable[[TwoWayPanel, np.ndarray, np.ndarray, int], np.ndarray]:
    """Both double sums over selected cells written out cell pair by cell pair."""

    def compute(panel: TwoWayPanel, selected: np.ndarray, values: np.ndarray, C_bar: int) -> np.ndarray:
        values = values.reshape(panel.n_obs, -1)
        k = values.shape[1]
        L = int(selected.sum())
        total = np.zeros((k, k))
        cells = np.flatnonzero(selected)
        for a in cells:
            for b in cells:
                same_row = panel.rows[a] == panel.rows[b]
                same_col = panel.cols[a] == panel.cols[b]
                outer = np.outer(values[a], values[b])
                if same_row:
                    total += outer
                if same_col:
                    total += outer
        return C_bar / L**2 * total

    return compute


@pytest.fixture
def brute_gamma_B() -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    def compute(selected: np.ndarray, values: np.ndarray) -> np.ndarray:
        v = values.reshape(len(selected), -1)[selected]
        return sum(np.outer(row, row) for row in v) / len(v)

    return compute
