"""Summary table: final-window means per (algorithm, scenario) plus step timings."""
from __future__ import annotations

import math
from pathlib import Path

import pandas as pd

from .plots import load_metrics

FINAL_FRACTION = 0.1
SUMMARY_COLUMNS = ["algo", "config_id", "energy_j", "worst_vu_frames", "reward", "train_reward",
                   "train_step_ms", "exec_step_ms", "seeds"]


def final_window(df: pd.DataFrame, fraction: float = FINAL_FRACTION) -> pd.DataFrame:
    """The last ``ceil(fraction * k)`` evaluation rows of each seed (k rows per seed)."""
    parts = []
    for _, cell in df.groupby(["algo", "config_id", "seed"], sort=True):
        cell = cell.sort_values("step")
        parts.append(cell.tail(max(1, math.ceil(fraction * len(cell)))))
    return pd.concat(parts) if parts else df.iloc[:0]


def _timings(directory: Path) -> pd.DataFrame:
    path = directory / "timings.csv"
    if not path.exists():
        return pd.DataFrame(columns=["algo", "config_id", "train_step_ms", "exec_step_ms"])
    t = pd.read_csv(path)
    parts = t["cell"].str.split("__", expand=True)
    t["algo"], t["config_id"] = parts[0], parts[1]
    return t


def summarize(directory) -> pd.DataFrame:
    directory = Path(directory)
    df = load_metrics(directory)
    win = final_window(df)
    g = win.groupby(["algo", "config_id"], sort=True)
    out = pd.DataFrame({
        "energy_j": g["sum_energy"].mean(),
        "worst_vu_frames": g["worst_vu_frames"].mean(),
        "reward": g["mean_reward"].mean(),
        "train_reward": g["train_reward"].mean(),
        "seeds": g["seed"].nunique(),
    }).reset_index()
    times = _timings(directory).groupby(["algo", "config_id"])[["train_step_ms", "exec_step_ms"]].mean()
    out = out.merge(times.reset_index(), on=["algo", "config_id"], how="left")
    return out[SUMMARY_COLUMNS]


def _cell(v) -> str:
    if isinstance(v, float):
        return "n/a" if math.isnan(v) else f"{v:.3f}"
    return str(v)


def report_table(directory) -> Path:
    """Writes ``summary.csv`` and a Markdown rendering ``summary.md``; returns the latter."""
    directory = Path(directory)
    table = summarize(directory)
    table.to_csv(directory / "summary.csv", index=False, na_rep="n/a", float_format="%.6g")
    lines = ["| " + " | ".join(SUMMARY_COLUMNS) + " |", "|" + "---|" * len(SUMMARY_COLUMNS)]
    for row in table.itertuples(index=False):
        lines.append("| " + " | ".join(_cell(v) for v in row) + " |")
    path = directory / "summary.md"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
