import json
import os

import numpy as np
import pytest

from abnvar.cli import EXIT_CENSORED, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from abnvar.experiment import CurveBundle

TINY = """\
env: {name: catch, params: {height: 7, width: 7}}
noise: {sigma2: 0.05}
network:
  extractor_channels: [4, 4]
  value_channels: [4, 4, 1]
  variance_channels: [4, 4, 1]
  policy_channels: 4
  lstm_hidden: 8
trainer: {workers: 1, total_steps: 20, eval_period: 10, eval_episodes: 2}
seeds: [0]
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.yaml").write_text(TINY)
    out = root / "run"
    assert main(["train", str(root / "tiny.yaml"), "--mode", "both", "--seeds", "0:2", "--out", str(out)]) == EXIT_OK
    return out


def test_train_writes_cells(run_dir):
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert {(c["mode"], c["seed"]) for c in manifest["cells"]} == {
        ("variance", 0), ("variance", 1), ("baseline", 0), ("baseline", 1)}


def test_eval_prints_json(run_dir, capsys):
    ckpt = run_dir / "variance" / "seed0" / "checkpoint.npz"
    assert main(["eval", str(ckpt), "--episodes", "3"]) == EXIT_OK
    row = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert 0.0 <= row["mean_return"] <= 1.0


def test_aggregate_from_run(run_dir, tmp_path):
    out = tmp_path / "agg.csv"
    assert main(["aggregate", "--run", str(run_dir), "--mode", "baseline", "--out", str(out)]) == EXIT_OK
    assert CurveBundle.read_csv(out).series.shape[0] == 2


def test_export_map(run_dir, tmp_path):
    ckpt = run_dir / "variance" / "seed0" / "checkpoint.npz"
    np.save(tmp_path / "obs.npy", np.zeros((4, 7, 7)))
    base = str(tmp_path / "m")
    assert main(["export-map", str(ckpt), "--which", "variance", "--obs", str(tmp_path / "obs.npy"),
                 "--out", base]) == EXIT_OK
    assert os.path.exists(base + ".pgm") and os.path.exists(base + "_overlay.pgm")
    assert main(["export-map", str(ckpt), "--no-overlay", "--out", base + "2"]) == EXIT_OK
    assert not os.path.exists(base + "2_overlay.pgm")


def test_compare_exit_codes(tmp_path):
    steps = np.arange(0, 301, 100)
    fast = CurveBundle(steps, np.array([[0, 1, 1, 1]] * 3, dtype=float))
    never = CurveBundle(steps, np.zeros((3, 4)))
    fast.write_csv(tmp_path / "fast.csv")
    never.write_csv(tmp_path / "never.csv")
    args = ["compare", "--bundle", f"variance={tmp_path / 'fast.csv'}", "--out", str(tmp_path / "s.csv")]
    assert main(args + ["--bundle", f"baseline={tmp_path / 'fast.csv'}"]) == EXIT_OK
    assert main(args + ["--bundle", f"baseline={tmp_path / 'never.csv'}"]) == EXIT_CENSORED


def test_compare_from_run(run_dir, tmp_path):
    code = main(["compare", "--run", str(run_dir), "--threshold", "-1", "--out", str(tmp_path / "s.csv")])
    assert code == EXIT_OK and (tmp_path / "s.csv").exists()


def test_config_errors_exit_2(tmp_path, capsys):
    (tmp_path / "bad.yaml").write_text("env: catch\nnoise: {sigma2: -1}\n")
    assert main(["train", str(tmp_path / "bad.yaml")]) == EXIT_CONFIG
    assert "line 2" in capsys.readouterr().err
    assert main(["train"]) == EXIT_CONFIG
    assert main(["train", "--env", "catch", "--sigma2", "-0.5"]) == EXIT_CONFIG
    assert main(["compare", "--bundle", "nonsense", "--out", str(tmp_path / "x.csv")]) == EXIT_CONFIG


def test_runtime_errors_exit_3(tmp_path):
    assert main(["eval", str(tmp_path / "missing.npz"), "--config", "configs/catch_desk.yaml"]) == EXIT_RUNTIME
    (tmp_path / "m.csv").write_text("global_step,episode_return\n")
    assert main(["aggregate", str(tmp_path / "m.csv"), "--out", str(tmp_path / "o.csv")]) == EXIT_RUNTIME


def test_bad_seed_list_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["train", "--env", "catch", "--seeds", "a,b"])
    assert info.value.code == 2
