from __future__ import annotations

import enum
import logging
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any

import numpy as np
import yaml
from dotenv import load_dotenv

ROOT = Path(__file__).resolve().parent.parent
logger = logging.getLogger("twsketch")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
LOG_DATEFMT = "%Y-%m-%d %H:%M:%S"

DEFAULT_SETTINGS: dict[str, Any] = {
    "out_dir": "results",
    "alpha": 0.05,
    "degeneracy_tol": 1e-12,
    "cond_max": 1e12,
    "max_iter": 200,
    "grad_tol": 1e-10,
    "fd_rel_step": 1e-6,
    "max_halvings": 30,
    "ridge": 1e-8,
    "separation_bound": 1e3,
    "empty_sketch_retries": 10,
    "min_expected_subsample": 30,
}


def load_config(path: Path | None = None) -> dict:
    with open(path or ROOT / "config.yaml", encoding="utf-8") as f:
        return yaml.safe_load(f)


@lru_cache(maxsize=1)
def settings() -> dict[str, Any]:
    """Numerical defaults from config.yaml, falling back to built-in values."""
    try:
        configured = load_config().get("settings", {})
    except FileNotFoundError:
        configured = {}
    return {**DEFAULT_SETTINGS, **configured}


def default_threads() -> int:
    load_dotenv(ROOT / ".env")
    value = os.environ.get("TWSKETCH_THREADS", "")
    if value.strip():
        return max(1, int(value))
    return os.cpu_count() or 1


def setup_logging(verbosity: int = 0) -> None:
    level = logging.INFO
    if verbosity > 0:
        level = logging.DEBUG
    elif verbosity < 0:
        level = logging.WARNING
    logging.basicConfig(level=level, format=LOG_FORMAT, datefmt=LOG_DATEFMT)


class ErrorCode(str, enum.Enum):
    DUPLICATE_CELL = "duplicate_cell"
    MISSING_FIELD = "missing_field"
    NON_FINITE_VALUE = "non_finite_value"
    EMPTY_PANEL = "empty_panel"
    INVALID_RATE = "invalid_rate"
    EMPTY_SKETCH = "empty_sketch"
    DIMENSION_MISMATCH = "dimension_mismatch"
    SINGULAR_DESIGN = "singular_design"
    SINGULAR_HESSIAN = "singular_hessian"
    NON_CONVERGENCE = "non_convergence"
    TARGET_BELOW_IRREDUCIBLE = "target_below_irreducible"
    DEGENERATE_PRELIMINARY = "degenerate_preliminary"
    EMPTY_REPORT = "empty_report"
    USAGE_ERROR = "usage_error"


class TwsketchError(Exception):
    code: ErrorCode = ErrorCode.USAGE_ERROR
    exit_code: int = 1

    def __init__(self, message: str, **details: Any) -> None:
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> dict[str, Any]:
        return {
            "code": self.code.value,
            "type": type(self).__name__,
            "message": self.message,
            "details": to_jsonable(self.details),
        }


class NumericalError(TwsketchError):
    exit_code = 2


class DuplicateCell(TwsketchError):
    code = ErrorCode.DUPLICATE_CELL


class MissingField(TwsketchError):
    code = ErrorCode.MISSING_FIELD


class NonFiniteValue(TwsketchError):
    code = ErrorCode.NON_FINITE_VALUE


class EmptyPanel(TwsketchError):
    code = ErrorCode.EMPTY_PANEL


class InvalidRate(TwsketchError):
    code = ErrorCode.INVALID_RATE


class DimensionMismatch(TwsketchError):
    code = ErrorCode.DIMENSION_MISMATCH


class EmptyReport(TwsketchError):
    code = ErrorCode.EMPTY_REPORT


class UsageError(TwsketchError):
    code = ErrorCode.USAGE_ERROR


class EmptySketch(NumericalError):
    code = ErrorCode.EMPTY_SKETCH


class SingularDesign(NumericalError):
    code = ErrorCode.SINGULAR_DESIGN


class SingularHessian(NumericalError):
    code = ErrorCode.SINGULAR_HESSIAN


class NonConvergence(NumericalError):
    code = ErrorCode.NON_CONVERGENCE


class TargetBelowIrreducible(NumericalError):
    code = ErrorCode.TARGET_BELOW_IRREDUCIBLE


class DegeneratePreliminary(NumericalError):
    code = ErrorCode.DEGENERATE_PRELIMINARY


def to_jsonable(value: Any) -> Any:
    """Convert numpy containers and scalars into plain JSON types."""
    if isinstance(value, Record):
        return value.to_dict()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    return value


@dataclass
class Record:
    """Base for result records that serialise to JSON-ready dicts."""

    def to_dict(self) -> dict[str, Any]:
        return {name: to_jsonable(getattr(self, name)) for name in self.__dataclass_fields__}


def as_matrix(value: Any) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return np.diag(arr) if arr.size > 1 else arr.reshape(1, 1)
    return arr


def check_condition(matrix: np.ndarray, error: type[NumericalError], what: str) -> None:
    cond = np.linalg.cond(matrix)
    if not np.isfinite(cond) or cond > settings()["cond_max"]:
        raise error(f"{what} is rank-deficient (condition number {cond:.3g})", condition_number=float(cond))


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)
