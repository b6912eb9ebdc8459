"""Asynchronous advantage actor-critic training.

Each worker owns a network copy, an environment and an RNG.  Per rollout it
snapshots the shared parameters, acts for at most ``k`` steps, recomputes the
rollout as one batch on a tape, and pushes clipped gradients into the shared
RMSprop store.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import queue
import threading
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .envs import make_env
from .losses import total_loss
from .model import ABNVarianceNet, NetworkConfig
from .nn import NonFiniteError
from .optim import GlobalParams, RMSpropConfig, clip_gradients

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("global_step", "worker_id", "episode_return", "episode_length", "policy_loss",
                  "value_nll_loss", "entropy", "mean_nu", "grad_norm")
EVAL_COLUMNS = ("global_step", "mean_return", "min_return", "max_return")


@dataclass
class TrainerConfig:
    workers: int = 8
    k: int = 5
    gamma: float = 0.99
    lr: float = 7e-4
    lr_anneal: bool = False
    rms_alpha: float = 0.99
    rms_eps: float = 1e-8
    max_grad_norm: float | None = 40.0
    total_steps: int = 100_000
    eval_period: int = 0
    eval_episodes: int = 10
    eval_greedy: bool = True
    value_weight: float = 0.5
    entropy_beta: float = 0.01
    use_nll: bool = True
    fixed_nu: float | None = None
    stop_return: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")

    def lr_at(self, step):
        """Learning rate at ``step``: constant, or decayed linearly to zero at the budget."""
        if not self.lr_anneal or not self.total_steps:
            return self.lr
        return self.lr * max(0.0, 1.0 - step / self.total_steps)

    def rmsprop(self):
        return RMSpropConfig(self.lr, self.rms_alpha, self.rms_eps, self.max_grad_norm)

    @classmethod
    def paper_scale(cls, **overrides):
        return cls(**{"workers": 32, **overrides})


@dataclass
class TrainMetrics:
    episodes: list = field(default_factory=list)
    updates: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    skipped: int = 0

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_COLUMNS)
            for row in self.episodes:
                w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])

    def write_eval_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(EVAL_COLUMNS)
            for row in self.evals:
                w.writerow([_fmt(row[c]) for c in EVAL_COLUMNS])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


@dataclass
class TrainResult:
    store: GlobalParams
    metrics: TrainMetrics
    net_config: NetworkConfig
    trainer_config: TrainerConfig

    def network(self, seed=0) -> ABNVarianceNet:
        """A fresh network loaded with the final parameters and published BN statistics."""
        net = ABNVarianceNet(self.net_config, seed)
        params, _ = self.store.snapshot()
        buffers = self.store.buffer_snapshot()
        net.load_arrays(params, buffers or None)
        return net


def sample_action(logits: np.ndarray, rng: np.random.Generator) -> int:
    p = nn.softmax_array(logits)
    u = rng.random()
    return int(min(np.searchsorted(np.cumsum(p), u, side="right"), p.size - 1))


def init_store(net_config: NetworkConfig, cfg: TrainerConfig) -> GlobalParams:
    net = ABNVarianceNet(net_config, cfg.seed)
    return GlobalParams(net.state_arrays(), dict(net.named_buffers()), cfg.rmsprop())


class _Schedule:
    """Hands each eval milestone to exactly one worker."""

    def __init__(self, period):
        self.period = period
        self.next = period
        self.lock = threading.Lock()

    def claim(self, step):
        if not self.period:
            return False
        with self.lock:
            if step >= self.next:
                while self.next <= step:
                    self.next += self.period
                return True
        return False


def run_worker(worker_id, store: GlobalParams, env, net_config: NetworkConfig, cfg: TrainerConfig,
               emit, stop: threading.Event | None = None, eval_hook=None):
    """Roll out, learn and push updates until the shared step budget is spent.

    ``emit(kind, row)`` receives ``("episode", ...)`` and ``("update", ...)``
    rows in emission order.
    """
    net = ABNVarianceNet(net_config, cfg.seed)
    rng = np.random.default_rng([cfg.seed, worker_id, 101])
    obs = env.reset()
    state = net.initial_state()
    ep_stats = []
    while store.global_step < cfg.total_steps and not (stop is not None and stop.is_set()):
        params, version = store.snapshot()
        net.load_arrays(params)
        start_state = state
        batch, actions, rewards = [obs], [], []
        done = False
        for _ in range(cfg.k):
            with nn.no_grad():
                out = net.forward(obs[None], state, mode="train", update_stats=False)
            a = sample_action(out.policy_logits.data[0], rng)
            obs, r, done = env.step(a)
            state = out.lstm_state
            actions.append(a)
            rewards.append(r)
            if done:
                break
            batch.append(obs)
        n = len(rewards)
        try:
            out = net.forward(np.stack(batch), start_state, mode="train", update_stats=True)
            bootstrap = 0.0 if done else float(out.value.data[n])
            parts = total_loss(out, actions, rewards, bootstrap, done, cfg.gamma,
                               value_weight=cfg.value_weight, entropy_beta=cfg.entropy_beta,
                               use_nll=cfg.use_nll, fixed_nu=cfg.fixed_nu)
            nn.check_finite(parts.total, "loss")
            net.zero_grad()
            parts.total.backward()
        except NonFiniteError as exc:
            logger.warning("worker %d: skipping update: %s", worker_id, exc)
            emit("skip", {"worker_id": worker_id})
            if done:
                obs, state = env.reset(), net.initial_state()
            continue
        grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for name, p in net.named_parameters()}
        grads, norm = clip_gradients(grads, cfg.max_grad_norm)
        applied = store.apply_gradients(grads, n, cfg.lr_at(store.global_step))
        store.publish_buffers(dict(net.named_buffers()))
        stats = parts.scalars()
        update_row = {
            "global_step": store.global_step, "worker_id": worker_id, "version": version,
            "applied": applied, "steps": n, "grad_norm": norm,
            "mean_nu": float(np.mean(out.nu.data[:n])), **stats,
        }
        emit("update", update_row)
        ep_stats.append(update_row)
        if done:
            emit("episode", {
                "global_step": store.global_step, "worker_id": worker_id,
                "episode_return": env.episode_true_return, "episode_length": env.episode_length,
                **{c: float(np.mean([u[c] for u in ep_stats]))
                   for c in ("policy_loss", "value_nll_loss", "entropy", "mean_nu", "grad_norm")},
            })
            ep_stats = []
            obs = env.reset()
            state = net.initial_state()
        if eval_hook is not None:
            eval_hook(store.global_step)


def evaluate(net: ABNVarianceNet, env, episodes=10, greedy=True, seed=0):
    """Score a frozen network on true (noise-free) rewards with eval-mode batch norm.

    Returns (mean return, per-episode returns).
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = np.random.default_rng([seed, 202])
    returns = []
    with nn.no_grad():
        for _ in range(episodes):
            obs = env.reset()
            state = net.initial_state()
            done = False
            while not done:
                out = net.forward(obs[None], state, mode="eval", update_stats=False)
                logits = out.policy_logits.data[0]
                a = int(np.argmax(logits)) if greedy else sample_action(logits, rng)
                obs, _, done = env.step(a)
                state = out.lstm_state
            returns.append(env.episode_true_return)
    return float(np.mean(returns)), returns


def train(env_name, env_params, sigma2, net_config: NetworkConfig, cfg: TrainerConfig,
          on_event=None, store: GlobalParams | None = None) -> TrainResult:
    """Run ``cfg.workers`` asynchronous workers until ``cfg.total_steps`` env steps.

    Worker ``i`` gets environment seed ``(seed, i)``.  Evaluation, when
    ``eval_period`` > 0, uses a fresh noise-free environment seeded the same
    way every time.  ``store`` may be a pre-built parameter store from
    ``init_store``.  With ``stop_return`` set, training ends early once an
    evaluation reaches it.
    """
    store = store if store is not None else init_store(net_config, cfg)
    metrics = TrainMetrics()
    if cfg.total_steps == 0:
        return TrainResult(store, metrics, net_config, cfg)
    events: queue.Queue = queue.Queue()
    stop = threading.Event()
    schedule = _Schedule(cfg.eval_period)
    errors = []

    def emit(kind, row):
        events.put((kind, row))

    def eval_hook(step):
        if schedule.claim(step):
            net = ABNVarianceNet(net_config, cfg.seed)
            params, _ = store.snapshot()
            net.load_arrays(params, store.buffer_snapshot())
            env = make_env(env_name, env_params, 0.0, seed=[cfg.seed, 10_000])
            mean, rets = evaluate(net, env, cfg.eval_episodes, cfg.eval_greedy, seed=cfg.seed)
            emit("eval", {"global_step": step, "mean_return": mean,
                          "min_return": float(np.min(rets)), "max_return": float(np.max(rets))})
            if cfg.stop_return is not None and mean >= cfg.stop_return:
                stop.set()

    def target(wid):
        try:
            env = make_env(env_name, env_params, sigma2, seed=[cfg.seed, wid])
            run_worker(wid, store, env, net_config, cfg, emit, stop, eval_hook)
        except BaseException as exc:  # noqa: BLE001 - reported to the caller below
            errors.append((wid, exc))
            stop.set()

    threads = [threading.Thread(target=target, args=(i,), name=f"a3c-worker-{i}", daemon=True)
               for i in range(cfg.workers)]
    for t in threads:
        t.start()

    def drain():
        while True:
            try:
                kind, row = events.get_nowait()
            except queue.Empty:
                return
            if kind == "episode":
                metrics.episodes.append(row)
            elif kind == "update":
                metrics.updates.append(row)
            elif kind == "eval":
                metrics.evals.append(row)
            else:
                metrics.skipped += 1
            if on_event is not None:
                on_event(kind, row)

    while any(t.is_alive() for t in threads):
        for t in threads:
            t.join(timeout=0.05)
        drain()
    drain()
    if cfg.eval_period and not errors and (not metrics.evals or metrics.evals[-1]["global_step"] < store.global_step):
        schedule.next = store.global_step
        eval_hook(store.global_step)
        drain()
    if errors:
        wid, exc = errors[0]
        raise RuntimeError(f"worker {wid} failed after {store.global_step} steps: {exc!r}") from exc
    return TrainResult(store, metrics, net_config, cfg)


# -- checkpoints ----------------------------------------------------------------


def config_hash(*configs) -> str:
    payload = json.dumps([c if isinstance(c, dict) else asdict(c) for c in configs], sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def save_checkpoint(path, result: TrainResult, extra_hash=None):
    params, _ = result.store.snapshot()
    buffers = result.store.buffer_snapshot()
    chash = extra_hash or config_hash(result.net_config, result.trainer_config)
    arrays = {f"param/{k}": v for k, v in params.items()}
    arrays.update({f"buffer/{k}": v for k, v in buffers.items()})
    meta = {"format": 1, "config_hash": chash, "net_config": result.net_config.to_dict(),
            "global_step": result.store.global_step}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    return chash


def load_checkpoint(path, expected_hash=None):
    """Returns (network, meta).  Raises ValueError when the config hash does not match."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if expected_hash is not None and meta["config_hash"] != expected_hash:
            raise ValueError(f"checkpoint hash {meta['config_hash']} != expected {expected_hash}")
        params = {k[6:]: z[k] for k in z.files if k.startswith("param/")}
        buffers = {k[7:]: z[k] for k in z.files if k.startswith("buffer/")}
    net = ABNVarianceNet(NetworkConfig(**meta["net_config"]))
    net.load_arrays(params, buffers or None)
    return net, meta
