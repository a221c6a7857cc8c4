"""SVG figures computed from ``metrics.csv`` alone."""
from __future__ import annotations

import re
import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

CURVE_METRICS = {
    "mean_reward": "Evaluation reward",
    "train_reward": "Training episode reward",
    "worst_vu_frames": "Worst VU frames",
    "sum_energy": "Sum local energy (J)",
    "critic_loss_sum": "Critic loss (sum over heads)",
}
BANDS = ("minmax", "std")

# stable SVGs: no timestamps, fixed element ids
plt.rcParams["svg.hashsalt"] = "ucha"
_SVG_META = {"Date": None, "Creator": None}


def load_metrics(directory) -> pd.DataFrame:
    path = Path(directory) / "metrics.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run a sweep first")
    df = pd.read_csv(path) if path.stat().st_size else pd.DataFrame()
    if df.empty:
        raise ValueError(f"{path} holds no evaluation rows")
    return df


def band_stats(df: pd.DataFrame, metric: str) -> pd.DataFrame:
    """Per (algo, step): mean, min, max and population std of ``metric`` across seeds."""
    g = df.dropna(subset=[metric]).groupby(["algo", "step"])[metric]
    out = g.agg(["mean", "min", "max", "count"])
    out["std"] = g.std(ddof=0)
    return out.reset_index()


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def plot_curve(df: pd.DataFrame, metric: str, band: str, path: Path) -> Path:
    stats = band_stats(df, metric)
    fig, ax = plt.subplots(figsize=(6, 4))
    for algo, part in stats.groupby("algo", sort=True):
        line, = ax.plot(part["step"], part["mean"], label=algo)
        if band == "minmax":
            lo, hi = part["min"], part["max"]
        else:
            lo, hi = part["mean"] - part["std"], part["mean"] + part["std"]
        ax.fill_between(part["step"], lo, hi, color=line.get_color(), alpha=0.2, linewidth=0)
    ax.set_xlabel("training step")
    ax.set_ylabel(CURVE_METRICS.get(metric, metric))
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def _vu_columns(df: pd.DataFrame, pattern: str) -> dict[int, str]:
    rx = re.compile(pattern)
    found = {}
    for c in df.columns:
        m = rx.fullmatch(c)
        if m and df[c].notna().any():
            found[int(m.group(1))] = c
    return dict(sorted(found.items()))


def final_rows(df: pd.DataFrame) -> pd.DataFrame:
    """The last evaluation of every seed."""
    idx = df.groupby(["algo", "seed"])["step"].idxmax()
    return df.loc[sorted(idx)]


def plot_rungs(df: pd.DataFrame, path: Path, labels=None) -> Path:
    """Per-VU stacked bars of frames received at each rung, last evaluation, seed mean."""
    last = final_rows(df)
    rung_cols = sorted({int(m.group(1)) for c in df.columns if (m := re.fullmatch(r"rung(\d+)_vu\d+", c))})
    algos = sorted(last["algo"].unique())
    n_vus = len(_vu_columns(df, r"fps_vu(\d+)"))
    fig, axes = plt.subplots(1, len(algos), figsize=(3.2 * len(algos), 3.6), squeeze=False, sharey=True)
    for ax, algo in zip(axes[0], algos):
        part = last[last["algo"] == algo]
        bottom = np.zeros(n_vus)
        for j in rung_cols:
            vals = np.array([part[f"rung{j}_vu{v}"].mean() for v in range(n_vus)])
            name = "failed" if j == 0 else (labels[j - 1] if labels and j - 1 < len(labels) else f"rung {j}")
            ax.bar(np.arange(n_vus), vals, bottom=bottom, label=name)
            bottom += vals
        ax.set_title(algo)
        ax.set_xticks(np.arange(n_vus), [f"VU{v}" for v in range(n_vus)])
    axes[0][0].set_ylabel("frames per episode")
    axes[0][-1].legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_energy(df: pd.DataFrame, path: Path) -> Path:
    """Per-VU local energy and local-generation share, last evaluation, seed mean."""
    last = final_rows(df)
    algos = sorted(last["algo"].unique())
    n_vus = len(_vu_columns(df, r"energy_vu(\d+)"))
    width = 0.8 / max(len(algos), 1)
    fig, (ax_e, ax_l) = plt.subplots(1, 2, figsize=(9, 3.6))
    for k, algo in enumerate(algos):
        part = last[last["algo"] == algo]
        x = np.arange(n_vus) + k * width
        ax_e.bar(x, [part[f"energy_vu{v}"].mean() for v in range(n_vus)], width, label=algo)
        ax_l.bar(x, [part[f"local_frac_vu{v}"].mean() for v in range(n_vus)], width, label=algo)
    for ax, label in ((ax_e, "local energy (J)"), (ax_l, "share of slots generated locally")):
        ax.set_xticks(np.arange(n_vus) + 0.4 - width / 2, [f"VU{v}" for v in range(n_vus)])
        ax.set_ylabel(label)
    ax_e.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_critic_losses(df: pd.DataFrame, algo: str, path: Path) -> Path:
    part = df[df["algo"] == algo]
    cols = _vu_columns(part, r"critic_loss_vu(\d+)")
    fig, ax = plt.subplots(figsize=(6, 4))
    for v, col in cols.items():
        mean = part.groupby("step")[col].mean()
        ax.plot(mean.index, mean.values, label=f"VU{v}")
    ax.set_xlabel("training step")
    ax.set_ylabel("critic head loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def emit_plots(directory, labels=None) -> list[Path]:
    directory = Path(directory)
    df = load_metrics(directory)
    out_dir = directory / "plots"
    out_dir.mkdir(exist_ok=True)
    written = []
    for cid, part in df.groupby("config_id", sort=True):
        for metric in CURVE_METRICS:
            if metric not in part.columns or part[metric].isna().all():
                warnings.warn(f"{cid}: no '{metric}' values; plot skipped", stacklevel=2)
                continue
            for band in BANDS:
                written.append(plot_curve(part, metric, band, out_dir / f"{cid}_{metric}_{band}.svg"))
        if _vu_columns(part, r"rung\d+_vu(\d+)"):
            written.append(plot_rungs(part, out_dir / f"{cid}_rungs.svg", labels))
        else:
            warnings.warn(f"{cid}: no rung columns; plot skipped", stacklevel=2)
        if _vu_columns(part, r"energy_vu(\d+)") and _vu_columns(part, r"local_frac_vu(\d+)"):
            written.append(plot_energy(part, out_dir / f"{cid}_energy.svg"))
        else:
            warnings.warn(f"{cid}: no per-VU energy columns; plot skipped", stacklevel=2)
        for algo in sorted(part["algo"].unique()):
            if _vu_columns(part[part["algo"] == algo], r"critic_loss_vu(\d+)"):
                written.append(plot_critic_losses(part, algo, out_dir / f"{cid}_{algo}_critic_loss.svg"))
    return written
