"""Render coverage tables as aligned text, CSV and JSON."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import pandas as pd
from jinja2 import Environment, FileSystemLoader

from experiments.runner import MetricsRow
from twsketch.base import EmptyReport, logger, to_jsonable

TEMPLATE_DIR = Path(__file__).resolve().parent / "templates"


@dataclass
class TableReport:
    text: str
    frame: pd.DataFrame
    rows: list[MetricsRow]


def _size_label(N: int, M: int) -> str:
    return f"N=M={N}" if N == M else f"{N}x{M}"


def wide_blocks(rows: list[MetricsRow]) -> list[dict[str, Any]]:
    """One block per design: sizes down, rules across, in first-seen order."""
    blocks: dict[str, dict[str, Any]] = {}
    for row in rows:
        block = blocks.setdefault(row.design, {"rules": [], "sizes": [], "cells": {}, "mode": row.variance_mode})
        size = (row.N, row.M)
        if row.p_rule not in block["rules"]:
            block["rules"].append(row.p_rule)
        if size not in block["sizes"]:
            block["sizes"].append(size)
        block["cells"][size, row.p_rule] = row.to_dict()

    return [
        {
            "title": f"Design {design} ({block['mode']} variance)",
            "rules": block["rules"],
            "lines": [
                {
                    "size": _size_label(*size),
                    "cells": [block["cells"].get((size, rule)) for rule in block["rules"]],
                }
                for size in block["sizes"]
            ],
        }
        for design, block in blocks.items()
    ]


def table_report(rows: list[MetricsRow]) -> TableReport:
    if not rows:
        raise EmptyReport("no metrics rows to report")
    env = Environment(loader=FileSystemLoader(str(TEMPLATE_DIR)), autoescape=False, keep_trailing_newline=True)
    text = env.get_template("table.txt.j2").render(
        rows=[row.to_dict() for row in rows],
        blocks=wide_blocks(rows),
    )
    frame = pd.DataFrame([row.to_dict() for row in rows])
    return TableReport(text=text, frame=frame, rows=list(rows))


def write_reports(report: TableReport, out_dir: Path, config: dict[str, Any] | None = None) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    table_txt = out_dir / "table.txt"
    table_csv = out_dir / "table.csv"
    report_json = out_dir / "report.json"

    table_txt.write_text(report.text, encoding="utf-8")
    report.frame.to_csv(table_csv, index=False)
    payload = {"status": "ok", "config": to_jsonable(config or {}), "rows": [r.to_dict() for r in report.rows]}
    report_json.write_text(json.dumps(payload, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")

    logger.info("Wrote %d rows to %s", len(report.rows), out_dir)
    return [table_txt, table_csv, report_json]
