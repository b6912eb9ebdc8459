"""Toy image-observation environments with Gaussian reward noise.

Every environment exposes the same training-facing interface::

    obs = env.reset()
    obs, reward, done = env.step(action)

``reward`` is the observed (noisy) reward.  The noise-free value is only
reachable through the telemetry attributes ``last_true_reward`` and
``episode_true_return``.
"""

from __future__ import annotations

import csv
import itertools
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .nn import ContractError

SIGMA2_PRESETS = (0.0, 0.03, 0.05)


@dataclass(frozen=True)
class NoiseSpec:
    sigma2: float = 0.0
    nonzero_only: bool = False

    def __post_init__(self):
        if not (self.sigma2 >= 0.0 and np.isfinite(self.sigma2)):
            raise ValueError(f"sigma2 must be a finite non-negative number, got {self.sigma2}")


def noisy_reward(r_true: float, spec: NoiseSpec, rng: np.random.Generator) -> float:
    """r_true + N(0, sigma2).  Exact identity (and no draw) when sigma2 == 0."""
    if spec.sigma2 == 0.0 or (spec.nonzero_only and r_true == 0.0):
        return float(r_true)
    return float(r_true + rng.normal(0.0, np.sqrt(spec.sigma2)))


class Env:
    """Base class: frame stacking, noise injection, telemetry and tracing."""

    n_actions: int
    frames = 4

    def __init__(self, height, width, noise: NoiseSpec | None = None, seed=0, frames=4):
        self.height, self.width, self.frames = height, width, frames
        self.noise = noise or NoiseSpec()
        self.seed = seed
        dyn, noise_ss = np.random.SeedSequence(seed).spawn(2)
        self.rng = np.random.default_rng(dyn)
        self.noise_rng = np.random.default_rng(noise_ss)
        self._stack = deque(maxlen=frames)
        self.last_true_reward = 0.0
        self.episode_true_return = 0.0
        self.episode_length = 0
        self.trace = None

    @property
    def obs_shape(self):
        return (self.frames, self.height, self.width)

    def enable_trace(self):
        self.trace = []

    def _observe(self):
        return np.stack(self._stack).astype(np.float64)

    def reset(self):
        self.episode_true_return = 0.0
        self.episode_length = 0
        frame = self._reset()
        self._stack.clear()
        for _ in range(self.frames):
            self._stack.append(frame)
        return self._observe()

    def step(self, action):
        if not 0 <= int(action) < self.n_actions:
            raise ContractError(f"action {action} out of range for {self.n_actions} actions")
        frame, r_true, done = self._step(int(action))
        r_obs = noisy_reward(r_true, self.noise, self.noise_rng)
        self.last_true_reward = r_true
        self.episode_true_return += r_true
        self.episode_length += 1
        self._stack.append(frame)
        if self.trace is not None:
            self.trace.append((self.episode_length, int(action), r_true, r_obs, bool(done)))
        return self._observe(), r_obs, done

    def write_trace(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "action", "true_reward", "reward", "terminal"])
            w.writerows(self.trace or [])

    def _reset(self):
        raise NotImplementedError

    def _step(self, action):
        raise NotImplementedError


class CatchEnv(Env):
    """A ball falls one row per step; a one-pixel paddle on the bottom row catches it.

    Actions: 0 left, 1 stay, 2 right.  Reward 1 on catch, 0 on miss; the
    episode ends when the ball reaches the paddle row (height - 1 steps).
    """

    n_actions = 3

    def __init__(self, height=10, width=10, noise=None, seed=0, frames=4):
        if height < 5 or width < 5:
            raise ValueError("catch grid must be at least 5x5")
        super().__init__(height, width, noise, seed, frames)

    def _frame(self):
        f = np.zeros((self.height, self.width))
        f[self.ball_row, self.ball_col] = 1.0
        f[self.height - 1, self.paddle] = 1.0
        return f

    def _reset(self):
        self.ball_row = 0
        self.ball_col = int(self.rng.integers(self.width))
        self.paddle = self.width // 2
        return self._frame()

    def _step(self, action):
        self.paddle = int(np.clip(self.paddle + action - 1, 0, self.width - 1))
        self.ball_row += 1
        done = self.ball_row == self.height - 1
        reward = float(done and self.paddle == self.ball_col)
        return self._frame(), reward, done

    def greedy_action(self):
        return int(np.sign(self.ball_col - self.paddle)) + 1


def catch_random_policy_return(height, width) -> float:
    """Expected return of the uniform random policy by enumerating every action sequence."""
    steps = height - 1
    start = width // 2
    total = 0.0
    for col in range(width):
        caught = 0
        for seq in itertools.product((-1, 0, 1), repeat=steps):
            p = start
            for a in seq:
                p = min(max(p + a, 0), width - 1)
            caught += p == col
        total += caught / 3 ** steps
    return total / width


class GridCollectEnv(Env):
    """Move in four directions collecting pellets (+0.1) on the way to a goal (+1, terminal).

    The layout is fixed by ``layout_seed``; hitting ``step_limit`` ends the
    episode with no bootstrap.
    """

    n_actions = 4
    MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))

    def __init__(self, size=6, n_pellets=3, step_limit=30, noise=None, seed=0, layout_seed=0,
                 layout=None, frames=4):
        if size < 6:
            raise ValueError("grid must be at least 6x6")
        super().__init__(size, size, noise, seed, frames)
        self.step_limit = step_limit
        if layout is None:
            cells = np.random.default_rng(layout_seed).permutation(size * size)[: n_pellets + 2]
            cells = [divmod(int(c), size) for c in cells]
            layout = {"start": cells[0], "goal": cells[1], "pellets": cells[2:]}
        self.start = tuple(layout["start"])
        self.goal = tuple(layout["goal"])
        self.pellets = tuple(tuple(p) for p in layout["pellets"])

    def _frame(self):
        f = np.zeros((self.height, self.width))
        for i, p in enumerate(self.pellets):
            if not self.collected[i]:
                f[p] = 0.5
        f[self.goal] = 0.75
        f[self.pos] = 1.0
        return f

    def _reset(self):
        self.pos = self.start
        self.collected = [False] * len(self.pellets)
        self.t = 0
        return self._frame()

    def _step(self, action):
        dr, dc = self.MOVES[action]
        self.pos = (min(max(self.pos[0] + dr, 0), self.height - 1), min(max(self.pos[1] + dc, 0), self.width - 1))
        self.t += 1
        reward = 0.0
        if self.pos in self.pellets:
            i = self.pellets.index(self.pos)
            if not self.collected[i]:
                self.collected[i] = True
                reward += 0.1
        done = False
        if self.pos == self.goal:
            reward += 1.0
            done = True
        elif self.t >= self.step_limit:
            done = True
        return self._frame(), reward, done

    def tabular_mdp(self, gamma=0.99) -> "ChainMdp":
        """States are (cell, collected-pellet mask) plus one absorbing end state."""
        n_cells = self.height * self.width
        n_masks = 2 ** len(self.pellets)
        n = n_cells * n_masks + 1
        end = n - 1
        P = np.zeros((n, 4, n))
        R = np.zeros((n, 4))
        for cell in range(n_cells):
            r0, c0 = divmod(cell, self.width)
            for mask in range(n_masks):
                s = cell * n_masks + mask
                for a, (dr, dc) in enumerate(self.MOVES):
                    r1 = min(max(r0 + dr, 0), self.height - 1)
                    c1 = min(max(c0 + dc, 0), self.width - 1)
                    m1, rew = mask, 0.0
                    if (r1, c1) in self.pellets:
                        bit = 1 << self.pellets.index((r1, c1))
                        if not mask & bit:
                            m1, rew = mask | bit, 0.1
                    if (r1, c1) == self.goal:
                        P[s, a, end] = 1.0
                        rew += 1.0
                    else:
                        P[s, a, (r1 * self.width + c1) * n_masks + m1] = 1.0
                    R[s, a] = rew
        P[end, :, end] = 1.0
        start = (self.start[0] * self.width + self.start[1]) * n_masks
        return ChainMdp(P, R, gamma, start=start, terminal=(end,))

    def state_index(self):
        mask = sum(1 << i for i, c in enumerate(self.collected) if c)
        return (self.pos[0] * self.width + self.pos[1]) * 2 ** len(self.pellets) + mask


@dataclass
class ChainMdp:
    """Finite MDP: ``transitions[s, a, s']`` and mean ``rewards[s, a]``."""

    transitions: np.ndarray
    rewards: np.ndarray
    gamma: float = 0.99
    start: int = 0
    terminal: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=float)
        self.rewards = np.asarray(self.rewards, dtype=float)
        if self.transitions.ndim != 3 or self.transitions.shape[:2] != self.rewards.shape:
            raise ContractError("transitions must be (S, A, S) and rewards (S, A)")
        rows = self.transitions.sum(axis=2)
        if np.any(self.transitions < 0) or not np.allclose(rows, 1.0, atol=1e-12):
            raise ContractError("every transition row must be a probability distribution")

    @property
    def n_states(self):
        return self.transitions.shape[0]

    @classmethod
    def two_state(cls, gamma=0.99):
        """s0 -> s1 with reward 1; s1 absorbing with reward 0."""
        P = np.zeros((2, 1, 2))
        P[0, 0, 1] = 1.0
        P[1, 0, 1] = 1.0
        return cls(P, np.array([[1.0], [0.0]]), gamma, start=0, terminal=(1,))


def value_iteration_oracle(mdp: ChainMdp, tol=1e-10, max_iter=100_000):
    """Successive approximation of V*; returns (V*, greedy policy).

    Stops when the sup-norm change falls below ``tol * (1 - gamma) / gamma``,
    which bounds the distance to V* by ``tol`` for gamma < 1.
    """
    P, R, g = mdp.transitions, mdp.rewards, mdp.gamma
    if not 0.0 < g <= 1.0:
        raise ContractError("gamma must lie in (0, 1]")
    v = np.zeros(mdp.n_states)
    thresh = tol * (1 - g) / g if g < 1 else tol
    for _ in range(max_iter):
        q = R + g * P @ v
        v_new = q.max(axis=1)
        done = np.max(np.abs(v_new - v)) < thresh
        v = v_new
        if done:
            break
    q = R + g * P @ v
    return v, q.argmax(axis=1)


class ChainEnv(Env):
    """Episodic wrapper over a ChainMdp; state s is drawn as a bright column ``s``.

    Episodes end on entering a state listed in ``mdp.terminal``.
    """

    def __init__(self, mdp: ChainMdp, height=6, width=6, noise=None, seed=0, frames=4, n_actions=2):
        if mdp.n_states > width:
            raise ValueError("observation too narrow for the number of states")
        super().__init__(height, width, noise, seed, frames)
        self.mdp = mdp
        self.n_actions = max(n_actions, mdp.transitions.shape[1])

    def _frame(self):
        f = np.zeros((self.height, self.width))
        f[:, self.state] = 1.0
        return f

    def _reset(self):
        self.state = self.mdp.start
        return self._frame()

    def _step(self, action):
        a = action % self.mdp.transitions.shape[1]
        reward = float(self.mdp.rewards[self.state, a])
        self.state = int(self.rng.choice(self.mdp.n_states, p=self.mdp.transitions[self.state, a]))
        return self._frame(), reward, self.state in self.mdp.terminal

    def observation_for(self, state):
        f = np.zeros((self.height, self.width))
        f[:, state] = 1.0
        return np.stack([f] * self.frames)


class FixedStateBandit(Env):
    """One fixed observation, one step per episode, reward ~ N(mu, sigma2).

    All actions pay the same, so the optimal value is ``mu``.
    """

    def __init__(self, sigma2=0.05, mu=0.5, height=6, width=6, noise=None, seed=0, frames=4,
                 n_actions=2, nonzero_only=False):
        noise = noise or NoiseSpec(sigma2, nonzero_only)
        super().__init__(height, width, noise, seed, frames)
        self.mu = mu
        self.n_actions = n_actions
        pattern = np.random.default_rng(12345).random((height, width))
        self._pattern = pattern

    def _reset(self):
        return self._pattern

    def _step(self, action):
        return self._pattern, self.mu, True


ENVIRONMENTS = {
    "catch": CatchEnv,
    "grid_collect": GridCollectEnv,
    "bandit": FixedStateBandit,
    "chain": ChainEnv,
}


def make_env(name, params=None, sigma2=0.0, seed=0):
    """Build an environment by registry name with a Gaussian noise level."""
    params = dict(params or {})
    if name not in ENVIRONMENTS:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}")
    if name == "chain":
        params.setdefault("mdp", ChainMdp.two_state(params.pop("gamma", 0.99)))
    if name == "bandit":
        return FixedStateBandit(sigma2=sigma2, seed=seed, **params)
    return ENVIRONMENTS[name](noise=NoiseSpec(sigma2), seed=seed, **params)
