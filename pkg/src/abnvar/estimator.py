"""scikit-learn style wrapper around a full training run."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import nn
from .config import MODES, _env_dims
from .envs import ENVIRONMENTS, make_env
from .model import NetworkConfig
from .trainer import TrainerConfig, evaluate, train


class ABNVarianceAgent(BaseEstimator):
    """Actor-critic agent with an optional reward-variance head.

    ``fit`` trains on the configured environment (``X`` and ``y`` are
    ignored, as for unsupervised estimators).  Prediction methods take a batch
    of stacked-frame observations shaped (N, frames, H, W).
    """

    def __init__(self, env="catch", env_params=None, sigma2=0.0, mode="variance", workers=1,
                 total_steps=20_000, k=5, gamma=0.99, lr=7e-4, lr_anneal=False, value_weight=0.5, entropy_beta=0.01,
                 max_grad_norm=40.0, eval_period=0, eval_episodes=10, network=None, random_state=0):
        self.env = env
        self.env_params = env_params
        self.sigma2 = sigma2
        self.mode = mode
        self.workers = workers
        self.total_steps = total_steps
        self.k = k
        self.gamma = gamma
        self.lr = lr
        self.lr_anneal = lr_anneal
        self.value_weight = value_weight
        self.entropy_beta = entropy_beta
        self.max_grad_norm = max_grad_norm
        self.eval_period = eval_period
        self.eval_episodes = eval_episodes
        self.network = network
        self.random_state = random_state

    def _configs(self):
        if self.env not in ENVIRONMENTS:
            raise ValueError(f"unknown environment {self.env!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not (np.isfinite(self.sigma2) and self.sigma2 >= 0):
            raise ValueError("sigma2 must be >= 0")
        params = dict(self.env_params or {})
        net_kw = {**_env_dims(self.env, params, ENVIRONMENTS[self.env]), **(self.network or {})}
        net_kw["variance_branch"] = self.mode == "variance"
        net = NetworkConfig(**net_kw)
        seed = int(self.random_state or 0)
        cfg = TrainerConfig(workers=self.workers, k=self.k, gamma=self.gamma, lr=self.lr, lr_anneal=self.lr_anneal,
                            max_grad_norm=self.max_grad_norm, total_steps=self.total_steps,
                            eval_period=self.eval_period, eval_episodes=self.eval_episodes,
                            value_weight=self.value_weight, entropy_beta=self.entropy_beta,
                            use_nll=self.mode == "variance", seed=seed)
        return params, net, cfg

    def fit(self, X=None, y=None):
        params, net_cfg, cfg = self._configs()
        result = train(self.env, params, float(self.sigma2), net_cfg, cfg)
        self.result_ = result
        self.network_ = result.network(cfg.seed)
        self.metrics_ = result.metrics
        self.n_steps_ = result.store.global_step
        self.n_features_in_ = int(np.prod((net_cfg.frames, net_cfg.height, net_cfg.width)))
        return self

    def _check_obs(self, X):
        check_is_fitted(self, "network_")
        X = np.asarray(X, dtype=float)
        c = self.network_.config
        expect = (c.frames, c.height, c.width)
        if X.ndim == 3:
            X = X[None]
        if X.ndim != 4 or X.shape[1:] != expect:
            raise ValueError(f"expected observations shaped (N, {', '.join(map(str, expect))}), got {X.shape}")
        if X.shape[0] == 0:
            raise ValueError("empty observation batch")
        if not np.all(np.isfinite(X)):
            raise ValueError("observations contain NaN or inf")
        return X

    def _forward(self, X):
        """Each observation is scored independently from a fresh recurrent state."""
        X = self._check_obs(X)
        outs = []
        with nn.no_grad():
            for obs in X:
                outs.append(self.network_.forward(obs[None], mode="eval", update_stats=False))
        return outs

    def predict_proba(self, X):
        return np.stack([nn.softmax_array(o.policy_logits.data[0]) for o in self._forward(X)])

    def predict(self, X):
        """Greedy action per observation."""
        return np.argmax(self.predict_proba(X), axis=1)

    def predict_value(self, X):
        return np.array([o.value.data[0] for o in self._forward(X)])

    def predict_variance(self, X):
        """Predicted reward variance; exactly 1 for the baseline mode, which has no head."""
        return np.array([o.nu.data[0] for o in self._forward(X)])

    def transform(self, X, which="value"):
        """Attention (value) or variance feature maps, shaped (N, H', W')."""
        if which not in ("value", "variance"):
            raise ValueError("which must be 'value' or 'variance'")
        outs = self._forward(X)
        if which == "variance" and outs[0].variance_map is None:
            raise ValueError("baseline mode has no variance map")
        key = "value_map" if which == "value" else "variance_map"
        return np.stack([getattr(o, key).data[0, 0] for o in outs])

    def score(self, X=None, y=None, episodes=None):
        """Mean greedy return on the noise-free environment."""
        check_is_fitted(self, "network_")
        env = make_env(self.env, dict(self.env_params or {}), 0.0, seed=[int(self.random_state or 0), 10_000])
        mean, _ = evaluate(self.network_, env, episodes or self.eval_episodes, True, int(self.random_state or 0))
        return mean
