"""Bernoulli selection masks over panel cells."""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Literal

import numpy as np

from twsketch.base import EmptySketch, InvalidRate, Record, UsageError, logger
from twsketch.data import CellKey, PanelDims, TwoWayPanel

CHUNK_CELLS = 1 << 16
MAX_SEED = 2**64


@dataclass(frozen=True)
class SketchConfig:
    p: float
    seed: int = 0

    def __post_init__(self) -> None:
        validate_rate(self.p)
        if not 0 <= int(self.seed) < MAX_SEED:
            raise UsageError(f"seed must be an unsigned 64-bit integer, got {self.seed}")


@dataclass
class SketchMask(Record):
    selected: np.ndarray
    p: float
    L_hat: int
    L_expected: float
    seed: int

    def keys(self, panel: TwoWayPanel) -> set[CellKey]:
        return {key for key, keep in zip(panel.keys(), self.selected) if keep}

    def to_dict(self) -> dict:
        # the boolean vector is large; reports only need the summary
        return {"p": self.p, "L_hat": self.L_hat, "L_expected": self.L_expected, "seed": self.seed}


def validate_rate(p: float) -> float:
    if not np.isfinite(p) or p <= 0 or p > 1:
        raise InvalidRate(f"selection probability must lie in (0, 1], got {p}", p=p)
    return float(p)


def _uniform_chunk(seed: int, chunk: int, size: int) -> np.ndarray:
    # the chunk index occupies the third counter word, so chunks never overlap
    bit_generator = np.random.Philox(key=seed, counter=chunk << 128)
    return np.random.Generator(bit_generator).random(size)


def cell_uniforms(seed: int, n_cells: int, threads: int = 1) -> np.ndarray:
    """Uniform draws for cells 0..n_cells-1 from a counter-based stream keyed by seed."""
    starts = range(0, n_cells, CHUNK_CELLS)
    jobs = [(seed, c, min(CHUNK_CELLS, n_cells - start)) for c, start in enumerate(starts)]
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda job: _uniform_chunk(*job), jobs))
    else:
        parts = [_uniform_chunk(*job) for job in jobs]
    return np.concatenate(parts) if parts else np.empty(0)


def generate_mask(panel: TwoWayPanel, config: SketchConfig, threads: int = 1) -> SketchMask:
    p = validate_rate(config.p)
    selected = cell_uniforms(int(config.seed), panel.n_obs, threads) < p
    L_hat = int(selected.sum())
    if L_hat == 0:
        raise EmptySketch(
            f"no cell selected at p={p:g} with seed {config.seed}; retry with a new seed or a larger p",
            p=p, seed=config.seed, n_obs=panel.n_obs,
        )
    logger.debug("[sketch] p=%g seed=%d selected %d of %d cells", p, config.seed, L_hat, panel.n_obs)
    return SketchMask(selected=selected, p=p, L_hat=L_hat, L_expected=panel.n_obs * p, seed=int(config.seed))


def full_mask(panel: TwoWayPanel) -> SketchMask:
    return SketchMask(
        selected=np.ones(panel.n_obs, dtype=bool),
        p=1.0,
        L_hat=panel.n_obs,
        L_expected=float(panel.n_obs),
        seed=0,
    )


def lambda_hat(dims: PanelDims, n_obs: int, p: float) -> float:
    """Finite-sample weight on the own-variance component: (C_bar/n_obs)((1-p)/p)."""
    p = validate_rate(p)
    return dims.C_bar / n_obs * ((1.0 - p) / p)


@dataclass(frozen=True)
class PRule:
    kind: Literal["full", "c", "p"]
    value: float = 1.0

    def __post_init__(self) -> None:
        if self.kind == "c" and not (np.isfinite(self.value) and self.value > 0):
            raise InvalidRate(f"c must be positive, got {self.value}", c=self.value)
        if self.kind == "p":
            validate_rate(self.value)

    @property
    def label(self) -> str:
        if self.kind == "full":
            return "full"
        if self.kind == "c":
            return f"c{self.value:g}"
        return f"p={self.value:g}"


_RULE_PATTERN = re.compile(r"^(?:c=?(?P<c>[0-9.eE+-]+)|p=(?P<p>[0-9.eE+-]+)|(?P<full>full))$")


def parse_p_rule(text: str) -> PRule:
    """Parse ``full``, ``c1``, ``c=2.5`` or ``p=0.1``."""
    match = _RULE_PATTERN.match(text.strip().lower())
    if match is None:
        raise UsageError(f"unrecognised p-rule '{text}' (expected full, c<float> or p=<float>)")
    try:
        if match["full"]:
            return PRule("full")
        if match["c"] is not None:
            return PRule("c", float(match["c"]))
        return PRule("p", float(match["p"]))
    except ValueError:
        raise UsageError(f"unrecognised p-rule '{text}'") from None


def resolve_p_rule(rule: PRule, dims: PanelDims) -> float:
    if rule.kind == "full":
        return 1.0
    if rule.kind == "c":
        return min(rule.value / dims.C_bar, 1.0)
    return validate_rate(rule.value)
