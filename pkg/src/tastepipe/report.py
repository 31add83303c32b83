"""Render coefficient tables and vector-graphics plots from pipeline outputs.

SVGs are written with a fixed hash salt and no creation date so identical
inputs reproduce identical bytes.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import TYPE_CHECKING

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

if TYPE_CHECKING:
    from .pipeline import StageRunner

plt.rcParams["svg.hashsalt"] = "tastepipe"


def _save_svg(fig, tmp_path: Path) -> None:
    fig.savefig(tmp_path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _exploration_vs_travel(frame: pd.DataFrame, tmp_path: Path) -> None:
    data = frame[["taste_exploration", "travel_distance_km"]].dropna()
    fig, ax = plt.subplots(figsize=(6, 4))
    if len(data) >= 10:
        travel = data["travel_distance_km"].to_numpy()
        sd = travel.std(ddof=1)
        z = (travel - travel.mean()) / (sd if sd > 0 else 1.0)
        y = data["taste_exploration"].to_numpy()
        edges = np.quantile(z, np.linspace(0, 1, 21))
        edges[-1] += 1e-9
        which = np.clip(np.searchsorted(edges, z, side="right") - 1, 0, 19)
        xs, ys = [], []
        for b in range(20):
            mask = which == b
            if mask.sum() >= 2:
                xs.append(z[mask].mean())
                ys.append(y[mask].mean())
        ax.scatter(xs, ys, color="#1f3f77", s=24, zorder=3, label="binned mean")
        slope, intercept = np.polyfit(z, y, 1)
        grid = np.linspace(min(xs), max(xs), 50)
        ax.plot(grid, intercept + slope * grid, color="#1f3f77", lw=2, label=f"slope {slope:.4f}")
        ax.legend(frameon=False)
    ax.set_xlabel("travel distance (z-score)")
    ax.set_ylabel("taste exploration")
    ax.set_title("Taste exploration vs travel distance")
    fig.tight_layout()
    _save_svg(fig, tmp_path)


def _monthly_trends(frame: pd.DataFrame, tmp_path: Path) -> None:
    grouped = frame.groupby("month").agg(
        exploration=("taste_exploration", "mean"),
        travel=("travel_distance_km", "mean"),
    )
    fig, ax = plt.subplots(figsize=(7, 4))
    months = list(grouped.index)
    ax.plot(months, grouped["exploration"], color="#1f3f77", marker="o", label="taste exploration")
    ax.set_ylabel("mean taste exploration", color="#1f3f77")
    ax2 = ax.twinx()
    ax2.plot(months, grouped["travel"], color="#b3442f", marker="s", label="travel distance")
    ax2.set_ylabel("mean travel distance (km)", color="#b3442f")
    ax.set_xlabel("month")
    ax.set_xticks(range(len(months)))
    ax.set_xticklabels(months, rotation=45, ha="right")
    ax.set_title("Monthly taste exploration and travel distance")
    fig.tight_layout()
    _save_svg(fig, tmp_path)


def _event_study_plot(frame: pd.DataFrame, tmp_path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    x = frame["relative_week"].to_numpy()
    coef = frame["coef"].to_numpy()
    lower = frame["ci_lower"].to_numpy()
    upper = frame["ci_upper"].to_numpy()
    ax.errorbar(
        x, coef,
        yerr=np.vstack([coef - lower, upper - coef]),
        fmt="o", color="#1f3f77", ecolor="#8ba3cc", capsize=3,
    )
    ax.axhline(0.0, color="0.4", lw=0.8)
    ax.axvline(-0.5, color="0.6", lw=0.8, linestyle="--")
    ax.set_xlabel("weeks relative to treatment")
    ax.set_ylabel("treatment effect")
    ax.set_title("Week-specific treatment effects (95% CI)")
    fig.tight_layout()
    _save_svg(fig, tmp_path)


def _did_table(results: dict, path: Path, delimiter: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(["statistic", "value"])
        for key in sorted(results):
            value = results[key]
            if isinstance(value, dict):
                for sub in sorted(value):
                    writer.writerow([f"{key}.{sub}", value[sub]])
            elif isinstance(value, list):
                writer.writerow([key, ";".join(str(v) for v in value)])
            else:
                writer.writerow([key, value])


def render(runner: "StageRunner") -> list[Path]:
    from .pipeline import MissingArtifactError, atomic_output

    cfg = runner.cfg
    out_dir = runner.path("report")
    outputs: list[Path] = []

    month_path = runner.path("metrics", "user_month.csv")
    if not month_path.exists():
        raise MissingArtifactError("metrics", month_path)
    month_frame = pd.read_csv(month_path, sep=cfg.delimiter, dtype={"user_id": str, "month": str})

    with atomic_output(out_dir / "exploration_vs_travel.svg") as tmp:
        _exploration_vs_travel(month_frame, tmp)
    outputs.append(out_dir / "exploration_vs_travel.svg")
    with atomic_output(out_dir / "monthly_trends.svg") as tmp:
        _monthly_trends(month_frame, tmp)
    outputs.append(out_dir / "monthly_trends.svg")

    if cfg.models:
        table_path = runner.path("regress", "regress_table.csv")
        if not table_path.exists():
            raise MissingArtifactError("regress", table_path)
        with atomic_output(out_dir / "coefficients.csv") as tmp:
            tmp.write_bytes(table_path.read_bytes())
        outputs.append(out_dir / "coefficients.csv")

    if cfg.did is not None:
        es_path = runner.path("did", "event_study.csv")
        results_path = runner.path("did", "did_results.json")
        for p in (es_path, results_path):
            if not p.exists():
                raise MissingArtifactError("did", p)
        es_frame = pd.read_csv(es_path, sep=cfg.delimiter)
        with atomic_output(out_dir / "event_study.svg") as tmp:
            _event_study_plot(es_frame, tmp)
        outputs.append(out_dir / "event_study.svg")
        with atomic_output(out_dir / "did_table.csv") as tmp:
            _did_table(json.loads(results_path.read_text()), tmp, cfg.delimiter)
        outputs.append(out_dir / "did_table.csv")

    return outputs
