"""Command line driver: mean, gmm, mfit, choose-p, simulate and generate.

Every JSON report embeds the resolved run configuration (sketch rule,
resolved p and seed) so a run can be replayed from its own output.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from twsketch.base import (
    ROOT,
    Record,
    SingularDesign,
    TwsketchError,
    UsageError,
    default_threads,
    logger,
    settings,
    setup_logging,
    to_jsonable,
)
from twsketch.data import TwoWayPanel, dims, load_panel, write_panel
from twsketch.gmm import GmmOptions, gmm_fit
from twsketch.mestim import MOptions, m_fit
from twsketch.moments import VarianceMode, mean_inference
from twsketch.registry import LOSS_MODELS, MOMENT_MODELS
from twsketch.sizing import choose_c_star
from twsketch.sketch import MAX_SEED, PRule, SketchConfig, SketchMask, generate_mask, parse_p_rule, resolve_p_rule


@dataclass
class RunConfig(Record):
    subcommand: str
    data: str | None = None
    design: str | None = None
    p_rule: str | None = None
    p: float | None = None
    seed: int = 0
    alpha: float = 0.05
    variance_mode: str | None = None
    model: dict[str, Any] = field(default_factory=dict)
    out: str | None = None
    threads: int = 1
    verbosity: int = 0


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors raised as UsageError instead of exiting."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def _seed(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed '{text}'") from None
    if not 0 <= value < MAX_SEED:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def _positive(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid number '{text}'") from None
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def _names(text: str) -> list[str]:
    names = [name.strip() for name in text.split(",") if name.strip()]
    if not names:
        raise argparse.ArgumentTypeError("expected a comma-separated list of field names")
    return names


def _sizes(text: str) -> list[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid size list '{text}'") from None
    if not sizes or min(sizes) < 1:
        raise argparse.ArgumentTypeError(f"sizes must be positive integers, got '{text}'")
    return sizes


def _rules(text: str) -> list[PRule]:
    return [parse_p_rule(rule) for rule in text.split(",") if rule.strip()]


def build_parser() -> ArgumentParser:
    sim = settings().get("simulation", {})

    common = ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0, help="debug logging")
    common.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: TWSKETCH_THREADS or all cores)")
    common.add_argument("--seed", type=_seed, default=None, help="unsigned 64-bit seed (default: 0, or settings.simulation.seed for simulate)")

    sketch = ArgumentParser(add_help=False)
    rule = sketch.add_mutually_exclusive_group()
    rule.add_argument("--p", type=float, help="selection probability in (0, 1]")
    rule.add_argument("--c-over-cbar", type=_positive, help="p = c / C_bar (default: c = 1)")
    rule.add_argument("--full-sample", action="store_true", help="no subsampling, p = 1")
    sketch.add_argument("--alpha", type=float, default=settings()["alpha"])
    sketch.add_argument(
        "--variance", default=VarianceMode.SUBSAMPLE.value,
        choices=[m.value for m in VarianceMode] + ["full_sample"],
        help="estimate the variance on the sketch or on the full sample",
    )
    sketch.add_argument("--data", required=True, help="CSV with columns i, j and the fields")
    sketch.add_argument("--out", help="JSON report path (default: stdout)")

    parser = ArgumentParser(prog="twsketch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    mean = sub.add_parser("mean", parents=[common, sketch], help="subsampled mean with a two-way robust CI")
    mean.add_argument("--field", required=True)

    gmm = sub.add_parser("gmm", parents=[common, sketch], help="linear IV GMM on a sketch")
    gmm.add_argument("--y", required=True)
    gmm.add_argument("--x", type=_names, required=True)
    gmm.add_argument("--z", type=_names, required=True)
    gmm.add_argument("--two-step", action="store_true", help="re-weight with the inverse own-variance of the moments")
    gmm.add_argument("--center-moments", action="store_true", help="demean moment values before the variance")

    mfit = sub.add_parser("mfit", parents=[common, sketch], help="M-estimation on a sketch")
    mfit.add_argument("--loss", choices=sorted(LOSS_MODELS), required=True)
    mfit.add_argument("--y", required=True)
    mfit.add_argument("--x", type=_names, required=True)

    choose = sub.add_parser("choose-p", parents=[common], help="choose c* from a preliminary sketch")
    choose.add_argument("--data", required=True)
    choose.add_argument("--field", required=True)
    choose.add_argument("--c-pre", type=_positive, required=True)
    choose.add_argument("--v-max", type=_positive, required=True)
    choose.add_argument("--out", help="JSON report path (default: stdout)")

    simulate = sub.add_parser("simulate", parents=[common], help="Monte Carlo coverage tables")
    simulate.add_argument("--design", choices=["1", "2", "3", "4"], required=True)
    simulate.add_argument("--sizes", type=_sizes, default=list(sim.get("sizes", [20, 40, 80, 160])))
    simulate.add_argument("--rules", type=_rules, default=[parse_p_rule(r) for r in sim.get("rules", ["full", "c1", "c2"])])
    simulate.add_argument("--reps", type=int, default=sim.get("reps", 2500))
    simulate.add_argument(
        "--variance", default=sim.get("variance", VarianceMode.FULL.value),
        choices=[m.value for m in VarianceMode] + ["full_sample"],
    )
    simulate.add_argument("--out", help="report directory (default: settings.out_dir)")

    generate = sub.add_parser("generate", parents=[common], help="write a synthetic panel to CSV")
    generate.add_argument("--design", choices=["1", "2", "3", "4", "demand"], required=True)
    generate.add_argument("--n", type=int, required=True)
    generate.add_argument("--m", type=int, required=True)
    generate.add_argument("--out", required=True, help="CSV path")
    return parser


def _resolve_seed(args: argparse.Namespace) -> int:
    if args.seed is not None:
        return args.seed
    if args.subcommand == "simulate":
        return int(settings().get("simulation", {}).get("seed", 0))
    return 0


def _p_rule(args: argparse.Namespace) -> PRule:
    if args.full_sample:
        return PRule("full")
    if args.p is not None:
        return PRule("p", args.p)
    return PRule("c", args.c_over_cbar if args.c_over_cbar is not None else 1.0)


def _sketch(panel: TwoWayPanel, rule: PRule, config: RunConfig) -> SketchMask:
    config.p_rule = rule.label
    config.p = resolve_p_rule(rule, dims(panel))
    return generate_mask(panel, SketchConfig(p=config.p, seed=config.seed), config.threads)


def _load(args: argparse.Namespace, fields: Sequence[str]) -> TwoWayPanel:
    # fields in first-seen order without repeats, e.g. "trend" as regressor and instrument
    return load_panel(args.data, list(dict.fromkeys(fields)))


def cmd_mean(args: argparse.Namespace, config: RunConfig) -> dict[str, Any]:
    rule = _p_rule(args)
    panel = _load(args, [args.field])
    mask = _sketch(panel, rule, config)
    report = mean_inference(panel, mask, args.field, alpha=args.alpha, variance_mode=args.variance)
    result = report.to_dict()
    variance = result.pop("variance")
    result.update(
        ci=[result["ci_lower"], result["ci_upper"]],
        gamma_A=variance["gamma_A"],
        gamma_B=variance["gamma_B"],
        lambda_hat=variance["lambda_hat"],
        gamma=variance["gamma"],
    )
    return result


def cmd_gmm(args: argparse.Namespace, config: RunConfig) -> dict[str, Any]:
    rule = _p_rule(args)
    model = MOMENT_MODELS["linear_iv"](args.y, args.x, args.z)
    config.model = {"kind": model.kind, "y": args.y, "x": args.x, "z": args.z,
                    "two_step": args.two_step, "center_moments": args.center_moments}
    panel = _load(args, [args.y, *args.x, *args.z])
    mask = _sketch(panel, rule, config)
    options = GmmOptions(two_step=args.two_step, center_moments=args.center_moments, variance_mode=args.variance)
    return gmm_fit(panel, mask, model, options=options).to_dict()


def cmd_mfit(args: argparse.Namespace, config: RunConfig) -> dict[str, Any]:
    rule = _p_rule(args)
    model = LOSS_MODELS[args.loss](args.y, args.x)
    config.model = {"kind": model.kind, "y": args.y, "x": args.x}
    panel = _load(args, [args.y, *args.x])
    mask = _sketch(panel, rule, config)
    return m_fit(panel, mask, model, MOptions(variance_mode=args.variance)).to_dict()


def cmd_choose_p(args: argparse.Namespace, config: RunConfig) -> dict[str, Any]:
    config.model = {"c_pre": args.c_pre, "V_max": args.v_max}
    panel = _load(args, [args.field])
    return choose_c_star(panel, args.field, args.c_pre, args.v_max, config.seed).to_dict()


def cmd_simulate(args: argparse.Namespace, config: RunConfig) -> dict[str, Any]:
    from experiments.designs import load_designs
    from experiments.report import table_report, write_reports
    from experiments.runner import run_grid

    if args.reps < 2:
        raise UsageError(f"--reps must be at least 2, got {args.reps}")
    design = load_designs()[args.design]
    config.p_rule = ",".join(rule.label for rule in args.rules)
    config.model = {"sizes": args.sizes, "reps": args.reps}

    rows = run_grid(design, args.sizes, args.rules, args.reps, args.variance, config.seed, config.threads)
    report = table_report(rows)
    write_reports(report, _simulate_dir(args), config.to_dict())
    print(report.text, end="")
    return {"rows": [row.to_dict() for row in rows]}


def cmd_generate(args: argparse.Namespace, config: RunConfig) -> dict[str, Any]:
    from experiments.designs import load_designs

    design = load_designs()[args.design].at_size(args.n, args.m)
    panel = design.generate(config.seed)
    write_panel(panel, args.out)
    logger.info("[%s] Wrote %d cells to %s", design.label, panel.n_obs, args.out)
    return {"path": args.out, "N": panel.N, "M": panel.M, "n_obs": panel.n_obs, "fields": list(panel.field_names)}


COMMANDS: dict[str, Callable[[argparse.Namespace, RunConfig], dict[str, Any]]] = {
    "mean": cmd_mean,
    "gmm": cmd_gmm,
    "mfit": cmd_mfit,
    "choose-p": cmd_choose_p,
    "simulate": cmd_simulate,
    "generate": cmd_generate,
}


def _simulate_dir(args: argparse.Namespace) -> Path:
    return Path(args.out) if args.out else ROOT / settings()["out_dir"]


def _json_target(args: argparse.Namespace) -> Path | None:
    if args.subcommand == "simulate":
        return _simulate_dir(args) / "report.json"
    if args.subcommand == "generate":
        return None
    return Path(args.out) if args.out else None


def _emit(payload: dict[str, Any], target: Path | None) -> None:
    text = json.dumps(to_jsonable(payload), ensure_ascii=False, indent=2) + "\n"
    if target is None:
        sys.stdout.write(text)
        return
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(text, encoding="utf-8")


def dispatch(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except TwsketchError as exc:
        print(f"error: {exc.code.value}: {exc.message}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    verbosity = -1 if args.quiet else args.verbose
    setup_logging(verbosity)
    config = RunConfig(
        subcommand=args.subcommand,
        data=getattr(args, "data", None),
        design=getattr(args, "design", None),
        seed=_resolve_seed(args),
        alpha=getattr(args, "alpha", settings()["alpha"]),
        variance_mode=VarianceMode(args.variance).value if hasattr(args, "variance") else None,
        out=args.out,
        threads=max(1, args.threads) if args.threads else default_threads(),
        verbosity=verbosity,
    )

    try:
        try:
            result = COMMANDS[args.subcommand](args, config)
        except np.linalg.LinAlgError as exc:
            raise SingularDesign(f"linear algebra failure: {exc}") from exc
        except (OSError, ValueError) as exc:
            raise UsageError(str(exc)) from exc
    except TwsketchError as exc:
        print(f"error: {exc.code.value}: {exc.message}", file=sys.stderr)
        target = _json_target(args)
        if target is not None:
            _emit({"status": "error", "error": exc.to_dict(), "config": config.to_dict()}, target)
        return exc.exit_code

    if args.subcommand != "simulate":
        _emit({"status": "ok", "config": config.to_dict(), "result": result}, _json_target(args))
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
