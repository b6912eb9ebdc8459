"""Actor-critic with an attention branch and a reward-variance head, on a small numpy autodiff core."""

from .config import ConfigError, RunConfig, parse_config, parse_config_text
from .envs import (CatchEnv, ChainEnv, ChainMdp, FixedStateBandit, GridCollectEnv, NoiseSpec, make_env,
                   noisy_reward, value_iteration_oracle)
from .estimator import ABNVarianceAgent
from .experiment import (CurveBundle, aggregate_curves, compare_report, export_feature_map,
                         run_experiment)
from .losses import (Trajectory, advantage, n_step_returns, policy_loss, squared_error_loss, total_loss,
                     value_nll_loss)
from .model import ABNVarianceNet, NetworkConfig, NetworkOutputs, attention_compose
from .optim import GlobalParams, RMSpropConfig, SharedRMSprop, rmsprop_step
from .trainer import TrainerConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "ABNVarianceAgent", "ABNVarianceNet", "CatchEnv", "ChainEnv", "ChainMdp", "ConfigError", "CurveBundle",
    "FixedStateBandit", "GlobalParams", "GridCollectEnv", "NetworkConfig", "NetworkOutputs", "NoiseSpec",
    "RMSpropConfig", "RunConfig", "SharedRMSprop", "TrainerConfig", "Trajectory", "advantage",
    "aggregate_curves", "attention_compose", "compare_report", "evaluate", "export_feature_map",
    "load_checkpoint", "make_env", "n_step_returns", "noisy_reward", "parse_config", "parse_config_text",
    "policy_loss", "rmsprop_step", "run_experiment", "save_checkpoint", "squared_error_loss", "total_loss",
    "train", "value_iteration_oracle", "value_nll_loss",
]
