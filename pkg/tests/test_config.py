import numpy as np
import pytest

from abnvar.config import ConfigError, RunConfig, dump_config, parse_config, parse_config_text

MINIMAL = "env: catch\n"


def test_minimal_config_defaults():
    cfg = parse_config_text(MINIMAL)
    assert cfg.env_name == "catch" and cfg.mode == "variance"
    assert (cfg.trainer.k, cfg.trainer.gamma, cfg.trainer.lr) == (5, 0.99, 7e-4)
    assert cfg.noise.sigma2 == 0.0 and cfg.seeds == (0, 1, 2, 3, 4)
    assert cfg.network.variance_branch and cfg.trainer.use_nll
    assert (cfg.network.height, cfg.network.width, cfg.network.n_actions) == (10, 10, 3)


def test_env_mapping_sets_network_dims():
    cfg = parse_config_text("env:\n  name: grid_collect\n  params: {size: 8}\n")
    assert (cfg.network.height, cfg.network.width, cfg.network.n_actions) == (8, 8, 4)


def test_negative_variance_names_line():
    with pytest.raises(ConfigError) as info:
        parse_config_text("env: catch\nnoise:\n  sigma2: -0.1\n")
    assert info.value.line == 3 and "sigma2" in str(info.value)


def test_unknown_key_names_line():
    with pytest.raises(ConfigError) as info:
        parse_config_text("env: catch\ntrainer:\n  workers: 2\n  learning_rate: 0.1\n")
    assert info.value.line == 4 and "learning_rate" in str(info.value)


def test_unknown_top_level_key():
    with pytest.raises(ConfigError) as info:
        parse_config_text("env: catch\noptimiser: adam\n")
    assert info.value.line == 2


def test_baseline_with_variance_branch_rejected():
    with pytest.raises(ConfigError) as info:
        parse_config_text("env: catch\nmode: baseline\nnetwork:\n  variance_branch: true\n")
    assert info.value.line == 4


def test_baseline_mode_flags():
    cfg = parse_config_text("env: catch\nmode: baseline\n")
    assert not cfg.network.variance_branch and not cfg.trainer.use_nll


@pytest.mark.parametrize("text", [
    "",
    "noise: {sigma2: 0.1}\n",
    "env: pong\n",
    "env: catch\nmode: both\n",
    "env: catch\nseeds: []\n",
    "env: catch\ntrainer: {workers: 0}\n",
    "env: catch\n  bad: [\n",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_seed_count_shorthand():
    assert parse_config_text("env: catch\nseeds: 3\n").seeds == (0, 1, 2)


def test_loss_section_feeds_trainer():
    cfg = parse_config_text("env: catch\nloss: {value_weight: 0.25, entropy_beta: 0.0}\n")
    assert cfg.trainer.value_weight == 0.25 and cfg.trainer.entropy_beta == 0.0


def test_for_mode_switches_flags():
    cfg = parse_config_text(MINIMAL).for_mode("baseline")
    assert cfg.mode == "baseline" and not cfg.network.variance_branch and not cfg.trainer.use_nll
    with pytest.raises(ConfigError):
        RunConfig("catch", mode="both")


def test_dump_round_trip(tmp_path):
    cfg = parse_config("configs/catch_desk.yaml")
    for c in (cfg, cfg.for_mode("baseline"), cfg.for_seed(3)):
        dump_config(c, tmp_path / "c.yaml")
        back = parse_config(tmp_path / "c.yaml")
        assert back.to_dict() == c.to_dict() and back.hash() == c.hash()


def test_hash_changes_with_config():
    a = parse_config_text(MINIMAL)
    b = parse_config_text("env: catch\nnoise: {sigma2: 0.05}\n")
    assert a.hash() != b.hash() and a.hash() == parse_config_text(MINIMAL).hash()


def test_desk_preset_values():
    cfg = parse_config("configs/catch_desk.yaml")
    assert cfg.noise.sigma2 == 0.05 and cfg.threshold == 0.8
    assert (cfg.network.height, cfg.network.width) == (7, 7)
    assert np.isclose(cfg.trainer.lr, 2e-3)
