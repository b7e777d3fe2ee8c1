"""Subsample means, the two CLT variance components and mean inference."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import stats

from twsketch.base import (
    DimensionMismatch,
    EmptySketch,
    Record,
    logger,
    settings,
    symmetrize,
)
from twsketch.data import CellMap, TwoWayPanel, dims
from twsketch.sketch import SketchMask, full_mask, lambda_hat


class VarianceMode(str, enum.Enum):
    SUBSAMPLE = "subsample"
    FULL = "full"

    @classmethod
    def _missing_(cls, value: object) -> VarianceMode | None:
        if value == "full_sample":
            return cls.FULL
        return None


@dataclass
class VarianceComponents(Record):
    gamma_A: np.ndarray
    gamma_B: np.ndarray
    lambda_hat: float
    gamma: np.ndarray


@dataclass
class InferenceReport(Record):
    estimate: np.ndarray
    variance: VarianceComponents
    C_bar: int
    std_error: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    alpha: float
    L_hat: int
    p: float
    degenerate_flag: bool
    variance_mode: str = VarianceMode.SUBSAMPLE.value

    def covers(self, truth: float | np.ndarray) -> np.ndarray:
        return (self.ci_lower <= truth) & (truth <= self.ci_upper)


def _require_cells(mask: SketchMask) -> None:
    if mask.L_hat < 1:
        raise EmptySketch("the sketch selects no cells", p=mask.p, seed=mask.seed)


def _values(panel: TwoWayPanel, values: np.ndarray | CellMap) -> np.ndarray:
    if isinstance(values, np.ndarray):
        out = values if values.ndim == 2 else values.reshape(len(values), -1)
        if out.shape[0] != panel.n_obs:
            raise DimensionMismatch(f"{out.shape[0]} values for {panel.n_obs} cells")
        return out.astype(float, copy=False)
    return panel.evaluate(values)


def group_sums(index: np.ndarray, values: np.ndarray, size: int) -> np.ndarray:
    """Sum the rows of ``values`` by group ``index`` in fixed group order."""
    return np.column_stack([
        np.bincount(index, weights=values[:, col], minlength=size)
        for col in range(values.shape[1])
    ])


def subsample_mean(panel: TwoWayPanel, mask: SketchMask, f: np.ndarray | CellMap) -> np.ndarray:
    _require_cells(mask)
    values = _values(panel, f)
    return values[mask.selected].sum(axis=0) / mask.L_hat


def gamma_B_hat(panel: TwoWayPanel, mask: SketchMask, values: np.ndarray | CellMap) -> np.ndarray:
    _require_cells(mask)
    v = _values(panel, values)[mask.selected]
    return symmetrize(v.T @ v) / mask.L_hat


def gamma_A_hat(panel: TwoWayPanel, mask: SketchMask, values: np.ndarray | CellMap, C_bar: int) -> np.ndarray:
    """(C_bar / L_hat^2) (sum_i S_i S_i' + sum_j T_j T_j') over selected cells.

    S_i and T_j are the row and column sums of the selected values, which
    reproduces both double sums including their diagonal terms.
    """
    _require_cells(mask)
    v = _values(panel, values)[mask.selected]
    S = group_sums(panel.rows[mask.selected], v, panel.N)
    T = group_sums(panel.cols[mask.selected], v, panel.M)
    return symmetrize(S.T @ S + T.T @ T) * (C_bar / mask.L_hat**2)


def combine_variance(gamma_A: np.ndarray, gamma_B: np.ndarray, lambda_hat: float) -> VarianceComponents:
    gamma_A = np.atleast_2d(np.asarray(gamma_A, dtype=float))
    gamma_B = np.atleast_2d(np.asarray(gamma_B, dtype=float))
    if gamma_A.shape != gamma_B.shape or gamma_A.shape[0] != gamma_A.shape[1]:
        raise DimensionMismatch(f"cannot combine {gamma_A.shape} with {gamma_B.shape}")
    if lambda_hat < 0:
        raise ValueError(f"lambda_hat must be non-negative, got {lambda_hat}")
    gamma = gamma_A if lambda_hat == 0 else gamma_A + lambda_hat * gamma_B
    return VarianceComponents(gamma_A=gamma_A, gamma_B=gamma_B, lambda_hat=float(lambda_hat), gamma=gamma)


def variance_components(
    panel: TwoWayPanel, mask: SketchMask, values: np.ndarray, C_bar: int, lam: float,
) -> VarianceComponents:
    return combine_variance(
        gamma_A_hat(panel, mask, values, C_bar),
        gamma_B_hat(panel, mask, values),
        lam,
    )


def is_degenerate(gamma: np.ndarray, scale: np.ndarray) -> bool:
    """True when some diagonal entry is at or below degeneracy_tol * scale^2."""
    tol = settings()["degeneracy_tol"]
    return bool(np.any(np.diag(gamma) <= tol * np.asarray(scale) ** 2))


def confidence_interval(
    estimate: np.ndarray, gamma: np.ndarray, C_bar: int, alpha: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    std_error = np.sqrt(np.clip(np.diag(gamma), 0.0, None) / C_bar)
    z = stats.norm.ppf(1.0 - alpha / 2.0)
    return std_error, estimate - z * std_error, estimate + z * std_error


def coefficient_tests(
    estimate: np.ndarray, std_error: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Two-sided normal tests of zero coefficients with significance stars."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t_stat = np.where(std_error > 0, estimate / std_error, np.nan)
    p_value = 2.0 * stats.norm.sf(np.abs(t_stat))
    stars = [
        "***" if pv < 0.01 else "**" if pv < 0.05 else "*" if pv < 0.10 else ""
        for pv in np.nan_to_num(p_value, nan=1.0)
    ]
    return t_stat, p_value, stars


def mean_inference(
    panel: TwoWayPanel,
    mask: SketchMask,
    f: np.ndarray | CellMap,
    alpha: float = 0.05,
    variance_mode: VarianceMode | str = VarianceMode.SUBSAMPLE,
) -> InferenceReport:
    variance_mode = VarianceMode(variance_mode)
    values = _values(panel, f)
    estimate = subsample_mean(panel, mask, values)
    d = dims(panel)

    variance_mask = mask if variance_mode is VarianceMode.SUBSAMPLE else full_mask(panel)
    centred = values - estimate
    components = variance_components(
        panel, variance_mask, centred, d.C_bar, lambda_hat(d, panel.n_obs, mask.p),
    )
    std_error, lower, upper = confidence_interval(estimate, components.gamma, d.C_bar, alpha)
    selected = variance_mask.selected
    # rounding noise around a constant level still counts as degenerate
    scale = np.maximum(
        np.abs(centred[selected]).max(axis=0),
        np.sqrt(np.finfo(float).eps) * np.abs(values[selected]).max(axis=0),
    )
    degenerate = is_degenerate(components.gamma, scale)
    if degenerate:
        logger.warning("[moments] Degenerate variance estimate: diag(gamma)=%s", np.diag(components.gamma))

    return InferenceReport(
        estimate=estimate,
        variance=components,
        C_bar=d.C_bar,
        std_error=std_error,
        ci_lower=lower,
        ci_upper=upper,
        alpha=alpha,
        L_hat=mask.L_hat,
        p=mask.p,
        degenerate_flag=degenerate,
        variance_mode=variance_mode.value,
    )
