"""Runs the (algorithm x VU count x seed) matrix and persists metrics.

Layout of an output directory::

    config.yaml           normalized copy of the experiment
    cells/<cell>.csv      one metrics row per evaluation (deterministic)
    metrics.csv           all cell rows, cells in sorted order
    timings.csv           wall-clock train/exec step times (not deterministic)
    failures.json         cells that raised, with their tracebacks
    checkpoints/<cell>/   agent snapshots taken at evaluation time
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..env import EnvConfig, make_profiles
from ..nn import save_checkpoint
from ..rng import RandomStream
from ..trainers import Agents, Algo, EvalEvent, agents_tensors, train
from .config import WORKERS_ENV, ExperimentConfig, config_to_dict, dump_config

log = logging.getLogger(__name__)

CSV_SCHEMA_VERSION = 1
BASE_COLUMNS = ["schema", "config_id", "algo", "n_vus", "n_channels", "seed", "step", "mean_reward",
                "train_reward", "worst_vu_frames", "sum_energy", "critic_loss_sum"]


def config_id(n_vus: int, n_channels: int) -> str:
    return f"m{n_channels}_n{n_vus}"


def cell_name(algo, n_vus: int, n_channels: int, seed: int) -> str:
    return f"{Algo(algo).value}__{config_id(n_vus, n_channels)}__s{seed}"


def per_vu_columns(n_vus: int, n_rungs: int) -> list[str]:
    cols = []
    for n in range(n_vus):
        cols += [f"fps_vu{n}", f"energy_vu{n}", f"local_frac_vu{n}", f"critic_loss_vu{n}"]
        cols += [f"rung{j}_vu{n}" for j in range(n_rungs + 1)]
    return cols


def cell_columns(n_vus: int, n_rungs: int) -> list[str]:
    return BASE_COLUMNS + per_vu_columns(n_vus, n_rungs)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if not np.isfinite(x):
        return "" if np.isnan(x) else repr(x)
    return repr(x)


def metrics_row(event: EvalEvent, algo, env_config: EnvConfig, seed: int) -> dict:
    rep = event.report
    n = env_config.n_vus
    losses = event.critic_loss_per_head
    row = {
        "schema": CSV_SCHEMA_VERSION,
        "config_id": config_id(n, env_config.n_channels),
        "algo": Algo(algo).value,
        "n_vus": n,
        "n_channels": env_config.n_channels,
        "seed": seed,
        "step": event.step,
        "mean_reward": rep.mean_reward,
        "train_reward": event.train_reward,
        "worst_vu_frames": rep.worst_vu_frames,
        "sum_energy": rep.sum_energy,
        "critic_loss_sum": None if losses is None else float(np.sum(losses)),
    }
    fps, energy, local, rungs = rep.fps, rep.energy_per_vu, rep.local_fraction, rep.rung_counts
    per_vu_loss = losses is not None and len(losses) == n
    for v in range(n):
        row[f"fps_vu{v}"] = fps[v]
        row[f"energy_vu{v}"] = energy[v]
        row[f"local_frac_vu{v}"] = local[v]
        row[f"critic_loss_vu{v}"] = losses[v] if per_vu_loss else None
        for j in range(rep.n_rungs + 1):
            row[f"rung{j}_vu{v}"] = rungs[v, j]
    return row


def write_rows(path: Path, columns: list[str], rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_rows(path: Path) -> tuple[list[str], list[dict]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return list(reader.fieldnames or []), list(reader)


@dataclass
class CellOutcome:
    cell: str
    ok: bool
    rows: int = 0
    train_step_ms: float = float("nan")
    exec_step_ms: float = float("nan")
    error: Optional[str] = None


def _checkpoint_hook(config: ExperimentConfig, env_config: EnvConfig, algo, seed: int, ckpt_dir: Path):
    mode = config.run.checkpoints
    if mode == "none":
        return None

    def hook(event: EvalEvent, agents: Agents) -> None:
        if agents.kind is Algo.RANDOM:
            tensors = {}
        else:
            tensors = agents_tensors(agents)
        meta = {"algo": Algo(algo).value, "seed": seed, "step": event.step,
                "env": env_config.model_dump(mode="json"),
                "vus": [v.model_dump(mode="json") for v in config.vus],
                "ppo": config.ppo.model_dump(mode="json"), "version": agents.version}
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        name = "latest.ckpt" if mode == "latest" else f"step_{event.step:09d}.ckpt"
        tmp = ckpt_dir / (name + ".tmp")
        save_checkpoint(tmp, tensors, meta)
        os.replace(tmp, ckpt_dir / name)

    return hook


def run_cell(config: ExperimentConfig, algo, n_vus: int, seed: int, out_dir) -> CellOutcome:
    out_dir = Path(out_dir)
    env_config = config.env_for(n_vus)
    name = cell_name(algo, n_vus, env_config.n_channels, seed)
    try:
        profiles = make_profiles(env_config, config.vus, RandomStream(seed).substream("profiles"))
        hook = _checkpoint_hook(config, env_config, algo, seed, out_dir / "checkpoints" / name)
        run = config.run
        res = train(algo, env_config, profiles, config.ppo, seed, run.total_steps,
                    eval_interval=run.eval_interval, eval_episodes=run.eval_episodes,
                    greedy_eval=run.greedy_eval, on_eval=hook)
        rows = [metrics_row(e, algo, env_config, seed) for e in res.events]
        (out_dir / "cells").mkdir(parents=True, exist_ok=True)
        write_rows(out_dir / "cells" / f"{name}.csv", cell_columns(n_vus, len(env_config.resolutions)), rows)
        return CellOutcome(cell=name, ok=True, rows=len(rows), train_step_ms=res.train_step_ms,
                           exec_step_ms=res.exec_step_ms)
    except Exception:  # a broken cell must not take the sweep down
        log.exception("cell %s failed", name)
        return CellOutcome(cell=name, ok=False, error=traceback.format_exc())


def _run_cell_args(args):
    config_dict, algo, n_vus, seed, out_dir = args
    return run_cell(ExperimentConfig.model_validate(config_dict), algo, n_vus, seed, out_dir)


def worker_count(config: ExperimentConfig) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw:
        try:
            value = int(raw)
        except ValueError:
            raise ValueError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}") from None
        if value < 1:
            raise ValueError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}")
        return value
    return config.run.workers


def matrix_cells(config: ExperimentConfig) -> list[tuple[Algo, int, int]]:
    return [(Algo(a), n, s) for a in config.run.algos for n in config.scenarios() for s in config.run.seeds]


def merge_cells(out_dir) -> Path:
    """Concatenate every cell file (sorted by name) under the union of columns."""
    out_dir = Path(out_dir)
    columns: list[str] = []
    rows: list[dict] = []
    for path in sorted((out_dir / "cells").glob("*.csv")):
        cols, cell_rows = read_rows(path)
        columns += [c for c in cols if c not in columns]
        rows += cell_rows
    base = [c for c in BASE_COLUMNS if c in columns]
    rest = sorted((c for c in columns if c not in BASE_COLUMNS), key=_column_key)
    merged = out_dir / "metrics.csv"
    write_rows(merged, base + rest, rows)
    return merged


def _column_key(col: str):
    # order per-VU columns by VU index, then by name
    stem, _, vu = col.rpartition("_vu")
    return (int(vu), stem) if vu.isdigit() else (10**9, col)


def run_matrix(config: ExperimentConfig, out_dir=None, workers: Optional[int] = None) -> list[CellOutcome]:
    out_dir = Path(out_dir or config.run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(dump_config(config), encoding="utf-8")
    cells = matrix_cells(config)
    workers = workers or worker_count(config)
    if workers == 1 or len(cells) == 1:
        outcomes = [run_cell(config, a, n, s, out_dir) for a, n, s in cells]
    else:
        payload = config_to_dict(config)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_cell_args, [(payload, a.value, n, s, str(out_dir)) for a, n, s in cells]))
    merge_cells(out_dir)
    _write_timings(out_dir, outcomes)
    failures = {o.cell: o.error for o in outcomes if not o.ok}
    (out_dir / "failures.json").write_text(json.dumps(failures, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    return outcomes


def _write_timings(out_dir: Path, outcomes: list[CellOutcome]) -> None:
    path = out_dir / "timings.csv"
    known = {}
    if path.exists():
        _, old = read_rows(path)
        known = {r["cell"]: r for r in old}
    for o in outcomes:
        if o.ok:
            known[o.cell] = {"cell": o.cell, "train_step_ms": _fmt(o.train_step_ms),
                             "exec_step_ms": _fmt(o.exec_step_ms)}
    write_rows(path, ["cell", "train_step_ms", "exec_step_ms"], [known[k] for k in sorted(known)])
