"""n-step advantage, Gaussian NLL critic loss and the policy-gradient loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import ContractError, Tensor

@dataclass
class Trajectory:
    """One rollout of at most k steps from a single worker.

    ``values`` holds V(s_t) for the rollout states only; the bootstrap value
    V(s_{t+k}) is carried separately and must be 0 when ``terminal``.
    """

    rewards: np.ndarray
    values: np.ndarray
    bootstrap: float = 0.0
    terminal: bool = False
    actions: np.ndarray | None = None
    nus: np.ndarray | None = None
    observations: np.ndarray | None = None

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.rewards.size == 0:
            raise ContractError("empty trajectory")
        if self.values.shape != self.rewards.shape:
            raise ContractError(f"values {self.values.shape} and rewards {self.rewards.shape} disagree")
        if self.terminal and self.bootstrap != 0.0:
            raise ContractError("terminal trajectory must bootstrap from 0")

    def __len__(self):
        return self.rewards.size


@dataclass
class LossBreakdown:
    policy_loss: Tensor
    value_nll_loss: Tensor
    entropy_bonus: Tensor
    total: Tensor
    advantages: np.ndarray = field(repr=False)
    returns: np.ndarray = field(repr=False)

    def scalars(self):
        return {
            "policy_loss": self.policy_loss.item(),
            "value_nll_loss": self.value_nll_loss.item(),
            "entropy": self.entropy_bonus.item(),
            "total": self.total.item(),
        }


def n_step_returns(rewards, bootstrap, gamma) -> np.ndarray:
    """R_t = r_t + gamma * R_{t+1}, seeded with the bootstrap value."""
    if not 0.0 < gamma <= 1.0:
        raise ContractError(f"gamma must lie in (0, 1], got {gamma}")
    rewards = np.asarray(rewards, dtype=float)
    if rewards.size == 0:
        raise ContractError("empty trajectory")
    out = np.empty_like(rewards)
    running = float(bootstrap)
    for t in range(rewards.size - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def advantage(traj: Trajectory, gamma) -> np.ndarray:
    return n_step_returns(traj.rewards, traj.bootstrap, gamma) - traj.values


def value_nll_loss(value: Tensor, nu: Tensor, target) -> Tensor:
    """Sum over steps of 0.5*ln(2*pi*nu) + (V - R)^2 / (2*nu)."""
    nu = nn.as_tensor(nu)
    if np.any(nu.data <= 0):
        raise ContractError("predicted variance must be positive")
    sq = (value - target) ** 2
    return (nn.log(nu * (2.0 * math.pi)) * 0.5 + sq / (nu * 2.0)).sum()


def squared_error_loss(value: Tensor, target) -> Tensor:
    """The ABN-A3C critic loss: sum of 0.5*(V - R)^2."""
    sq = (value - target) ** 2
    return (sq * 0.5).sum()


def policy_entropy(logits: Tensor) -> Tensor:
    """Per-row entropy of softmax(logits)."""
    logp = nn.log_softmax(logits)
    return -(nn.softmax(logits) * logp).sum(axis=-1)


def policy_loss(logits: Tensor, actions, advantages, entropy_beta=0.0) -> Tensor:
    """-sum_t log pi(a_t|s_t) * adv_t - beta * sum_t H(pi(.|s_t)).

    ``advantages`` are plain arrays, so no gradient reaches the critic here.
    """
    actions = np.asarray(actions, dtype=int)
    adv = np.asarray(advantages, dtype=float)
    logp = nn.log_softmax(logits)
    chosen = logp[np.arange(actions.size), actions]
    loss = -(chosen * adv).sum()
    if entropy_beta:
        loss = loss - policy_entropy(logits).sum() * entropy_beta
    return loss


def _first(t: Tensor, n: int) -> Tensor:
    return t if t.shape[0] == n else t[:n]


def total_loss(outputs, actions, rewards, bootstrap, terminal, gamma, *, value_weight=0.5,
               entropy_beta=0.01, use_nll=True, fixed_nu=None, targets=None) -> LossBreakdown:
    """Compose the A3C loss for one rollout.

    ``outputs`` is the network output over the rollout states (batch = time);
    rows past ``len(rewards)`` (a bootstrap state) are ignored.  With
    ``use_nll=False`` the critic term is the squared-error baseline, and
    ``fixed_nu`` replaces the predicted variance with a constant.
    ``targets=(returns, advantages)`` pins the stop-gradient quantities,
    which makes the loss a smooth function of the parameters alone.
    """
    n = len(rewards)
    values = _first(outputs.value, n)
    logits = _first(outputs.policy_logits, n)
    traj = Trajectory(rewards, values.data, bootstrap=bootstrap, terminal=terminal)
    if targets is None:
        returns = n_step_returns(traj.rewards, traj.bootstrap, gamma)
        adv = returns - traj.values
    else:
        returns, adv = (np.asarray(t, dtype=float) for t in targets)
    pg = policy_loss(logits, actions, adv)
    if not use_nll:
        vloss = squared_error_loss(values, returns)
    else:
        nu = Tensor(np.full(n, float(fixed_nu))) if fixed_nu is not None else _first(outputs.nu, n)
        vloss = value_nll_loss(values, nu, returns)
    ent = policy_entropy(logits).sum()
    total = pg + vloss * value_weight - ent * entropy_beta
    return LossBreakdown(pg, vloss, ent, total, adv, returns)
