"""Data-driven choice of the subsampling constant c in p = c / C_bar.

A preliminary sketch at p_pre = c_pre / C_bar estimates both variance
components of a scalar functional; c* then solves

    C_bar * V_max = Gamma_A_pre + (C_bar / n_obs) ((C_bar - c) / c) Gamma_B_pre

so that the approximate variance Gamma / C_bar of the subsample mean sits at
the tolerated level V_max.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from twsketch.base import DegeneratePreliminary, Record, TargetBelowIrreducible, logger, settings
from twsketch.data import CellMap, TwoWayPanel, dims
from twsketch.moments import gamma_A_hat, gamma_B_hat, subsample_mean
from twsketch.sketch import SketchConfig, generate_mask


@dataclass
class SizingResult(Record):
    c_star: float
    p_star: float
    gamma_A_pre: float
    gamma_B_pre: float
    V_max: float
    c_pre: float
    L_pre: int
    feasible: bool
    C_bar: int = 0
    n_obs: int = 0
    expected_subsample: float = 0.0


def approximate_variance(c: float, gamma_A: float, gamma_B: float, C_bar: int, n_obs: int) -> float:
    """Gamma / C_bar implied by the preliminary estimates at p = c / C_bar."""
    return (gamma_A + (C_bar / n_obs) * ((C_bar - c) / c) * gamma_B) / C_bar


def solve_c_star(gamma_A: float, gamma_B: float, C_bar: int, n_obs: int, V_max: float) -> float:
    if V_max <= 0:
        raise ValueError(f"V_max must be positive, got {V_max}")
    if C_bar * V_max <= gamma_A:
        raise TargetBelowIrreducible(
            f"C_bar*V_max={C_bar * V_max:.6g} does not exceed Gamma_A_pre={gamma_A:.6g}; "
            "even the full sample cannot reach V_max",
            gamma_A_pre=gamma_A, V_max=V_max, C_bar=C_bar,
        )
    if gamma_B <= settings()["degeneracy_tol"] * max(1.0, abs(gamma_A)):
        raise DegeneratePreliminary(
            f"Gamma_B_pre={gamma_B:.3g} is numerically zero; the functional has no own variance",
            gamma_B_pre=gamma_B,
        )
    R = (n_obs / C_bar) * (C_bar * V_max - gamma_A) / gamma_B
    return C_bar / (1.0 + R)


def choose_c_star(
    panel: TwoWayPanel,
    f: CellMap | np.ndarray,
    c_pre: float,
    V_max: float,
    seed: int = 0,
) -> SizingResult:
    if c_pre <= 0:
        raise ValueError(f"c_pre must be positive, got {c_pre}")
    d = dims(panel)
    values = panel.evaluate(f) if not isinstance(f, np.ndarray) else f.reshape(panel.n_obs, -1)
    if values.shape[1] != 1:
        raise ValueError(
            f"sizing needs a scalar functional, got {values.shape[1]} coordinates; size on the worst one",
        )

    p_pre = min(c_pre / d.C_bar, 1.0)
    mask = generate_mask(panel, SketchConfig(p=p_pre, seed=seed))
    centered = values - subsample_mean(panel, mask, values)
    gamma_A = float(gamma_A_hat(panel, mask, centered, d.C_bar)[0, 0])
    gamma_B = float(gamma_B_hat(panel, mask, centered)[0, 0])
    logger.info(
        "[sizing] Preliminary sketch p=%g L=%d: Gamma_A_pre=%.6g Gamma_B_pre=%.6g",
        p_pre, mask.L_hat, gamma_A, gamma_B,
    )

    c_star = solve_c_star(gamma_A, gamma_B, d.C_bar, panel.n_obs, V_max)
    p_star = c_star / d.C_bar
    expected = panel.n_obs * p_star
    if expected < settings()["min_expected_subsample"]:
        logger.warning(
            "[sizing] Expected subsample n_obs*p*=%.1f is below %d cells",
            expected, settings()["min_expected_subsample"],
        )
    return SizingResult(
        c_star=c_star,
        p_star=p_star,
        gamma_A_pre=gamma_A,
        gamma_B_pre=gamma_B,
        V_max=V_max,
        c_pre=c_pre,
        L_pre=mask.L_hat,
        feasible=True,
        C_bar=d.C_bar,
        n_obs=panel.n_obs,
        expected_subsample=expected,
    )
