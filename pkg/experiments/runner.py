"""Monte Carlo coverage experiments for subsampled mean inference."""

from __future__ import annotations

import asyncio
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from experiments.designs import STREAM_MASK, STREAM_PANEL, DesignSpec, derive_seed
from twsketch.base import EmptySketch, Record, UsageError, logger, settings
from twsketch.data import dims
from twsketch.moments import VarianceMode, mean_inference
from twsketch.sketch import PRule, SketchConfig, generate_mask, resolve_p_rule


@dataclass
class MetricsRow(Record):
    design: str
    N: int
    M: int
    p_rule: str
    reps: int
    bias: float
    sd: float
    rmse: float
    coverage95: float
    p: float = 1.0
    variance_mode: str = VarianceMode.FULL.value
    retries: int = 0


@dataclass
class Replication:
    estimate: float
    covers: bool
    p: float
    retries: int


def _replicate(
    design: DesignSpec, rule: PRule, rep: int, variance_mode: VarianceMode, base_seed: int, alpha: float,
) -> Replication:
    # the panel stream ignores the rule, so every rule sees the same panels
    panel = design.generate(derive_seed(base_seed, design.N, design.M, rep, STREAM_PANEL))
    p = resolve_p_rule(rule, dims(panel))
    max_retries = settings()["empty_sketch_retries"]
    for attempt in range(max_retries + 1):
        seed = derive_seed(base_seed, design.N, design.M, rep, STREAM_MASK, attempt)
        try:
            mask = generate_mask(panel, SketchConfig(p=p, seed=seed))
            break
        except EmptySketch:
            logger.warning("[%s] Replication %d: empty sketch at p=%g, retrying", design.label, rep, p)
    else:
        raise EmptySketch(
            f"replication {rep} drew an empty sketch {max_retries + 1} times at p={p:g}",
            design=design.id, rep=rep, p=p,
        )
    report = mean_inference(panel, mask, "y", alpha=alpha, variance_mode=variance_mode)
    return Replication(
        estimate=float(report.estimate[0]),
        covers=bool(report.covers(design.truth)[0]),
        p=p,
        retries=attempt,
    )


async def _run_concurrently(jobs: list, threads: int) -> list[Replication]:
    loop = asyncio.get_running_loop()
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [loop.run_in_executor(pool, _replicate, *job) for job in jobs]
        return await asyncio.gather(*futures)


def summarize(
    design: DesignSpec, rule: PRule, p: float, estimates: np.ndarray, covers: np.ndarray,
    variance_mode: VarianceMode, retries: int = 0,
) -> MetricsRow:
    bias = float(estimates.mean() - design.truth)
    sd = float(estimates.std(ddof=1))
    return MetricsRow(
        design=design.id,
        N=design.N,
        M=design.M,
        p_rule=rule.label,
        reps=len(estimates),
        bias=bias,
        sd=sd,
        rmse=float(np.sqrt(bias**2 + sd**2)),
        coverage95=float(covers.mean()),
        p=p,
        variance_mode=variance_mode.value,
        retries=retries,
    )


def run_experiment(
    design: DesignSpec,
    p_rule: PRule,
    reps: int,
    variance_mode: VarianceMode | str = VarianceMode.FULL,
    base_seed: int = 0,
    threads: int = 1,
    alpha: float = 0.05,
) -> MetricsRow:
    if reps < 2:
        raise UsageError(f"need at least 2 replications, got {reps}")
    if design.family not in ("separable", "nonseparable"):
        raise UsageError(f"design '{design.id}' has no scalar target for coverage experiments")
    variance_mode = VarianceMode(variance_mode)

    logger.info(
        "[%s] Running N=%d M=%d rule=%s reps=%d (%s variance)...",
        design.label, design.N, design.M, p_rule.label, reps, variance_mode.value,
    )
    jobs = [(design, p_rule, rep, variance_mode, base_seed, alpha) for rep in range(reps)]
    if threads > 1:
        results = asyncio.run(_run_concurrently(jobs, threads))
    else:
        results = [_replicate(*job) for job in jobs]

    estimates = np.array([r.estimate for r in results])
    covers = np.array([r.covers for r in results])
    row = summarize(design, p_rule, results[0].p, estimates, covers, variance_mode, sum(r.retries for r in results))
    logger.info(
        "[%s] Result: bias=%.4f sd=%.4f rmse=%.4f coverage=%.3f",
        design.label, row.bias, row.sd, row.rmse, row.coverage95,
    )
    return row


def run_grid(
    design: DesignSpec,
    sizes: list[int],
    rules: list[PRule],
    reps: int,
    variance_mode: VarianceMode | str = VarianceMode.FULL,
    base_seed: int = 0,
    threads: int = 1,
) -> list[MetricsRow]:
    """One row per (size, rule), sizes outermost, in the order given."""
    return [
        run_experiment(design.at_size(n), rule, reps, variance_mode, base_seed, threads)
        for n in sizes
        for rule in rules
    ]
