"""ABN-A3C actor-critic with an optional reward-variance branch.

Layout (all maps are NCHW)::

    obs --conv/BN/ReLU x2--> g
    g --value convs--> f --global max--> V
    g --variance convs--> m --global mean, clamp, exp--> nu
    (1 + f) * g --conv/BN/ReLU--> flatten --LSTM--> dense --> policy logits
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .nn import BatchNorm, Conv2d, ContractError, Dense, LSTMCell, Module, Tensor


@dataclass
class NetworkConfig:
    frames: int = 4
    height: int = 10
    width: int = 10
    n_actions: int = 3
    extractor_channels: tuple = (16, 32)
    extractor_kernels: tuple = (3, 3)
    extractor_strides: tuple = (1, 1)
    value_channels: tuple = (32, 64, 1)
    variance_channels: tuple = (32, 64, 1)
    branch_kernel: int = 3
    policy_channels: int = 32
    policy_kernel: int = 3
    lstm_hidden: int = 64
    variance_branch: bool = True
    batchnorm: bool = True
    detach_variance_trunk: bool = False
    log_var_bounds: tuple = (-10.0, 10.0)
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5
    bn_stats: str = "step"

    def __post_init__(self):
        for name in ("extractor_channels", "extractor_kernels", "extractor_strides",
                     "value_channels", "variance_channels", "log_var_bounds"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        if self.n_actions < 2:
            raise ValueError(f"n_actions must be >= 2, got {self.n_actions}")
        if self.value_channels[-1] != 1 or self.variance_channels[-1] != 1:
            raise ValueError("value and variance branches must end in a single channel")
        lo, hi = self.log_var_bounds
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise ValueError(f"log_var_bounds must be finite with lower < upper, got {self.log_var_bounds}")
        if self.bn_stats not in ("step", "rollout"):
            raise ValueError(f"bn_stats must be 'step' or 'rollout', got {self.bn_stats!r}")
        if self.branch_kernel % 2 != 1:
            raise ValueError("branch_kernel must be odd so branch maps keep the trunk's spatial size")
        if not (len(self.extractor_channels) == len(self.extractor_kernels) == len(self.extractor_strides)):
            raise ValueError("extractor channels/kernels/strides must have equal length")
        h, w = self.trunk_size()
        if h - self.policy_kernel + 1 < 1 or w - self.policy_kernel + 1 < 1:
            raise ValueError(f"observation {self.height}x{self.width} too small for the conv stack")

    def trunk_size(self):
        h, w = self.height, self.width
        for k, s in zip(self.extractor_kernels, self.extractor_strides):
            h, w = (h - k) // s + 1, (w - k) // s + 1
            if h < 1 or w < 1:
                raise ValueError(f"observation {self.height}x{self.width} too small for the conv stack")
        return h, w

    @classmethod
    def paper_scale(cls, n_actions, **overrides):
        """84x84x4 input, LSTM@256; kernels/strides are our choice."""
        base = dict(height=84, width=84, n_actions=n_actions, extractor_kernels=(8, 4),
                    extractor_strides=(4, 2), lstm_hidden=256)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return asdict(self)


@dataclass
class NetworkOutputs:
    policy_logits: Tensor
    value: Tensor
    nu: Tensor
    log_nu: Tensor | None
    value_map: Tensor
    variance_map: Tensor | None
    features: Tensor
    lstm_state: tuple = field(repr=False)


def attention_compose(f: Tensor, g: Tensor) -> Tensor:
    """g' = (1 + f) * g with a single-channel ``f`` broadcast over g's channels."""
    if f.ndim != 4 or g.ndim != 4 or f.shape[1] != 1 or f.shape[2:] != g.shape[2:] or f.shape[0] != g.shape[0]:
        raise ContractError(f"attention map {f.shape} does not align with features {g.shape}")
    return (f + 1.0) * g


def _layer_rng(seed, name):
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class _ConvBlock(Module):
    """conv -> BN -> optional ReLU."""

    def __init__(self, c_in, c_out, kernel, stride, padding, seed, name, cfg, relu=True):
        super().__init__()
        self.conv = self.add_child("conv", Conv2d(c_in, c_out, kernel, _layer_rng(seed, name),
                                                 stride=stride, padding=padding))
        self.bn = (self.add_child("bn", BatchNorm(c_out, cfg.bn_momentum, cfg.bn_eps,
                                                    per_sample=cfg.bn_stats == "step"))
                   if cfg.batchnorm else None)
        self.relu = relu

    def __call__(self, x, training, update_stats):
        y = self.conv(x)
        if self.bn is not None:
            y = self.bn(y, training, update_stats)
        return nn.relu(y) if self.relu else y


class _Branch(Module):
    """Size-preserving conv stack ending in a single-channel map (no final ReLU)."""

    def __init__(self, c_in, channels, kernel, seed, prefix, cfg):
        super().__init__()
        self.blocks = []
        for i, c_out in enumerate(channels):
            last = i == len(channels) - 1
            block = _ConvBlock(c_in, c_out, kernel, 1, kernel // 2, seed, f"{prefix}.{i}", cfg, relu=not last)
            self.blocks.append(self.add_child(str(i), block))
            c_in = c_out

    def __call__(self, x, training, update_stats):
        for block in self.blocks:
            x = block(x, training, update_stats)
        return x


class ABNVarianceNet(Module):
    """Feature extractor, value/variance branches, and recurrent policy branch."""

    def __init__(self, config: NetworkConfig, seed=0):
        super().__init__()
        self.config = cfg = config
        self.seed = seed
        self.extractor = []
        c_in = cfg.frames
        for i, (c, k, s) in enumerate(zip(cfg.extractor_channels, cfg.extractor_kernels, cfg.extractor_strides)):
            self.extractor.append(self.add_child(f"extractor{i}", _ConvBlock(c_in, c, k, s, 0, seed, f"extractor{i}", cfg)))
            c_in = c
        trunk_c = c_in
        self.value_head = self.add_child("value", _Branch(trunk_c, cfg.value_channels, cfg.branch_kernel, seed, "value", cfg))
        self.variance_head = (self.add_child("variance", _Branch(trunk_c, cfg.variance_channels, cfg.branch_kernel, seed, "variance", cfg))
                              if cfg.variance_branch else None)
        self.policy_conv = self.add_child("policy_conv", _ConvBlock(trunk_c, cfg.policy_channels, cfg.policy_kernel, 1, 0, seed, "policy_conv", cfg))
        th, tw = cfg.trunk_size()
        flat = cfg.policy_channels * (th - cfg.policy_kernel + 1) * (tw - cfg.policy_kernel + 1)
        self.lstm = self.add_child("lstm", LSTMCell(flat, cfg.lstm_hidden, _layer_rng(seed, "lstm")))
        self.head = self.add_child("policy_out", Dense(cfg.lstm_hidden, cfg.n_actions, _layer_rng(seed, "policy_out")))

    def initial_state(self):
        return self.lstm.zero_state(1)

    # -- branches ------------------------------------------------------------

    def feature_extract(self, obs, training=True, update_stats=True) -> Tensor:
        x = nn.as_tensor(obs)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        if x.shape[1:] != (self.config.frames, self.config.height, self.config.width):
            raise ContractError(f"observation shape {x.shape[1:]} does not match network input")
        for block in self.extractor:
            x = block(x, training, update_stats)
        return x

    def value_branch(self, g, training=True, update_stats=True):
        f = self.value_head(g, training, update_stats)
        return f, nn.global_max_pool(f).reshape(-1)

    def variance_branch(self, g, training=True, update_stats=True):
        if self.variance_head is None:
            raise ContractError("variance branch is disabled in this network")
        if self.config.detach_variance_trunk:
            g = g.detach()
        m = self.variance_head(g, training, update_stats)
        lo, hi = self.config.log_var_bounds
        log_nu = nn.clamp(nn.global_avg_pool(m).reshape(-1), lo, hi)
        return m, log_nu, nn.exp(log_nu)

    def policy_branch(self, g_prime, lstm_state, training=True, update_stats=True):
        """Run the LSTM over the batch axis as consecutive time steps of one episode."""
        p = self.policy_conv(g_prime, training, update_stats)
        p = p.reshape(p.shape[0], -1)
        h, c = (nn.as_tensor(s) for s in lstm_state)
        seq, (h, c) = self.lstm.sequence(p, h, c)
        return self.head(seq), (h.data.copy(), c.data.copy())

    def forward(self, obs, lstm_state=None, mode="train", update_stats=True) -> NetworkOutputs:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        training = mode == "train"
        if lstm_state is None:
            lstm_state = self.initial_state()
        g = self.feature_extract(obs, training, update_stats)
        f, value = self.value_branch(g, training, update_stats)
        if self.variance_head is not None:
            m, log_nu, nu = self.variance_branch(g, training, update_stats)
        else:
            m, log_nu, nu = None, None, Tensor(np.ones(value.shape))
        logits, new_state = self.policy_branch(attention_compose(f, g), lstm_state, training, update_stats)
        return NetworkOutputs(logits, value, nu, log_nu, f, m, g, new_state)

    __call__ = forward
