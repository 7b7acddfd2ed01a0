"""실험 보고서: CSV 표, 정적 SVG 그림, report.json.

같은 입력이면 바이트 단위로 같은 파일을 씁니다 (SVG 해시 솔트 고정, 날짜 메타데이터 제거).
"""

from __future__ import annotations

import csv
import json
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any

import matplotlib

matplotlib.use("Agg")
from matplotlib.figure import Figure  # noqa: E402

from loguru import logger  # noqa: E402

from src.utils.exceptions import ValidationError  # noqa: E402

matplotlib.rcParams.update(
    {
        "svg.hashsalt": "twinflow",
        "svg.fonttype": "none",
        "font.size": 9,
        "axes.spines.top": False,
        "axes.spines.right": False,
    }
)

_SVG_METADATA = {"Date": None, "Creator": None}


def write_csv(path: Path, rows: Sequence[Mapping[str, Any]], columns: Sequence[str]) -> Path:
    """행 목록을 CSV로 씁니다. 실수는 6자리 유효숫자로 기록합니다."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            missing = [c for c in columns if c not in row]
            if missing:
                raise ValidationError(f"report row lacks columns {missing}")
            writer.writerow({c: _cell(row[c]) for c in columns})
    logger.info(f"Wrote {len(rows)} rows to {path}")
    return path


def _cell(value: Any) -> Any:
    if isinstance(value, float):
        return f"{value:.6g}"
    return value


def _save(fig: Figure, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_SVG_METADATA)
    logger.info(f"Wrote plot {path}")
    return path


def bar_chart(
    path: Path,
    labels: Sequence[str],
    values: Sequence[float],
    *,
    title: str,
    ylabel: str,
    errors: Sequence[float] | None = None,
    baseline: float | None = None,
) -> Path:
    """막대 그래프 SVG. baseline이 있으면 점선으로 표시합니다."""
    if len(labels) != len(values):
        raise ValidationError("bar chart needs one value per label")
    fig = Figure(figsize=(max(4.0, 1.1 * len(labels)), 3.0))
    ax = fig.add_subplot()
    positions = list(range(len(labels)))
    ax.bar(positions, values, yerr=errors, color="#4c72b0", capsize=3)
    ax.set_xticks(positions, labels, rotation=20, ha="right")
    if baseline is not None:
        ax.axhline(baseline, linestyle="--", color="#888888", linewidth=1)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def line_chart(
    path: Path,
    xs: Sequence[float],
    ys: Sequence[float],
    *,
    title: str,
    xlabel: str,
    ylabel: str,
) -> Path:
    """꺾은선 그래프 SVG."""
    if len(xs) != len(ys):
        raise ValidationError("line chart needs one y value per x value")
    fig = Figure(figsize=(4.0, 3.0))
    ax = fig.add_subplot()
    ax.plot(xs, ys, marker="o", color="#4c72b0")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    return _save(fig, path)


def write_report(
    path: Path,
    command: str,
    config_hash: str,
    checkpoints: Mapping[str, str],
    results: Mapping[str, Any],
) -> Path:
    """설정 해시와 체크포인트 해시를 포함한 report.json을 씁니다."""
    payload = {
        "command": command,
        "config_hash": config_hash,
        "checkpoints": dict(sorted(checkpoints.items())),
        "results": results,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Wrote report {path}")
    return path
