import json
import subprocess
import sys

import pandas as pd
import pytest

from ucha.cli import main

TINY = """\
env: {n_vus: 2, n_channels: 2}
ppo: {segment_length: 32, batch_size: 16, epochs: 1, hidden: [8, 8]}
run: {algos: [ucha, random], seeds: [0], total_steps: 80, eval_interval: 40, eval_episodes: 1}
"""


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY)
    return path


# 80 steps is shorter than one training episode, so the train_reward curve is empty
@pytest.mark.filterwarnings("ignore:.*train_reward")
def test_train_eval_plot_report(cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--algo", "ippo", "--seed", "4", "--out", str(out)]) == 0
    df = pd.read_csv(out / "metrics.csv")
    assert set(df.algo) == {"ippo"} and set(df.seed) == {4} and df.step.tolist() == [40, 80]

    ckpt = out / "checkpoints" / "ippo__m2_n2__s4" / "latest.ckpt"
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ckpt), "--episodes", "1"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["algo"] == "ippo" and summary["step"] == 80 and len(summary["fps"]) == 2
    # same checkpoint, same seed and episode count: the reading matches the final CSV row
    assert summary["mean_reward"] == pytest.approx(df.mean_reward.iloc[-1])

    assert main(["plot", "--dir", str(out)]) == 0
    assert (out / "plots" / "m2_n2_mean_reward_minmax.svg").exists()
    assert main(["report", "--dir", str(out)]) == 0
    assert "ippo" in capsys.readouterr().out


def test_sweep_with_override(cfg, tmp_path, monkeypatch):
    monkeypatch.setenv("UCHA_WORKERS", "1")
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(cfg), "--set", "run.seeds=[0, 1]", "--out", str(out)]) == 0
    assert len(list((out / "cells").glob("*.csv"))) == 4


def test_train_with_vu_count(cfg, tmp_path):
    out = tmp_path / "n1"
    assert main(["train", "--config", str(cfg), "--algo", "happo", "--seed", "0", "--n-vus", "1",
                 "--out", str(out)]) == 0
    assert set(pd.read_csv(out / "metrics.csv").config_id) == {"m2_n1"}


def test_errors_exit_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("env: {p_max: -1}\n")
    assert main(["sweep", "--config", str(bad)]) == 2
    assert "env.p_max" in capsys.readouterr().err
    assert main(["plot", "--dir", str(tmp_path / "nothing")]) == 2
    assert main(["report", "--dir", str(tmp_path / "nothing")]) == 2
    with pytest.raises(SystemExit):
        main(["train", "--algo", "nope", "--seed", "0"])


def test_console_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "ucha.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("train", "sweep", "eval", "plot", "report", "UCHA_WORKERS"):
        assert cmd in res.stdout
