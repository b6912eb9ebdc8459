"""Run configuration: YAML file <-> RunConfig with strict key checking."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

import yaml

from .envs import ENVIRONMENTS, NoiseSpec
from .model import NetworkConfig
from .trainer import TrainerConfig, config_hash

MODES = ("variance", "baseline")
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
CATCH_THRESHOLD = 0.8


class ConfigError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class RunConfig:
    env_name: str
    env_params: dict = field(default_factory=dict)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    mode: str = "variance"
    seeds: tuple = DEFAULT_SEEDS
    output_dir: str = "runs"
    threshold: float = CATCH_THRESHOLD
    map_period: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.seeds:
            raise ConfigError("seed list must not be empty")
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.mode == "baseline":
            if self.network.variance_branch:
                raise ConfigError("mode=baseline conflicts with network.variance_branch=true")
            if self.trainer.use_nll:
                raise ConfigError("mode=baseline conflicts with trainer.use_nll=true")

    def for_mode(self, mode) -> "RunConfig":
        """Copy of this config switched to ``mode`` with the matching branch/loss flags."""
        variance = mode == "variance"
        return dataclasses.replace(
            self, mode=mode,
            network=dataclasses.replace(self.network, variance_branch=variance),
            trainer=dataclasses.replace(self.trainer, use_nll=variance),
        )

    def for_seed(self, seed) -> "RunConfig":
        return dataclasses.replace(self, seeds=(seed,), trainer=dataclasses.replace(self.trainer, seed=seed))

    def to_dict(self):
        return {
            "env": {"name": self.env_name, "params": dict(self.env_params)},
            "noise": {"sigma2": self.noise.sigma2},
            "network": self.network.to_dict(),
            "trainer": dataclasses.asdict(self.trainer),
            "mode": self.mode,
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "threshold": self.threshold,
            "map_period": self.map_period,
        }

    def hash(self) -> str:
        return config_hash(self.to_dict())


_TOP = {"env", "noise", "network", "trainer", "loss", "mode", "seeds", "output_dir", "threshold", "map_period"}
_LOSS_KEYS = {"value_weight", "entropy_beta"}


def _line(node):
    return node.start_mark.line + 1


def _mapping(node, what):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{what} must be a mapping", _line(node))
    return {k.value: (k, v) for k, v in node.value}


def _check_keys(items, allowed, what):
    for name, (knode, _) in items.items():
        if name not in allowed:
            raise ConfigError(f"unknown key {what}{name!r}; allowed: {sorted(allowed)}", _line(knode))


def _section(items, key, allowed, what):
    if key not in items:
        return {}, {}
    _, node = items[key]
    sub = _mapping(node, what)
    _check_keys(sub, allowed, f"{what}.")
    loader = yaml.SafeLoader("")
    values = {k: loader.construct_object(v, deep=True) for k, (_, v) in sub.items()}
    lines = {k: _line(v) for k, (_, v) in sub.items()}
    return values, lines


def _build(cls, values, lines, what):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        line = next(iter(lines.values()), None)
        for k in values:
            if k in str(exc):
                line = lines[k]
        raise ConfigError(f"invalid {what}: {exc}", line) from None


def parse_config_text(text: str) -> RunConfig:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed YAML: {exc}", mark.line + 1 if mark else None) from None
    if root is None:
        raise ConfigError("empty config; 'env' is required")
    items = _mapping(root, "config")
    _check_keys(items, _TOP, "")
    loader = yaml.SafeLoader("")

    def scalar(key, default):
        if key not in items:
            return default, None
        _, node = items[key]
        return loader.construct_object(node, deep=True), _line(node)

    if "env" not in items:
        raise ConfigError("missing required key 'env'", 1)
    env_node = items["env"][1]
    if isinstance(env_node, yaml.ScalarNode):
        env_name, env_params, env_line = env_node.value, {}, _line(env_node)
    else:
        env_vals, env_lines = _section(items, "env", {"name", "params"}, "env")
        if "name" not in env_vals:
            raise ConfigError("missing required key 'env.name'", _line(env_node))
        env_name, env_params, env_line = env_vals["name"], env_vals.get("params") or {}, env_lines["name"]
    if env_name not in ENVIRONMENTS:
        raise ConfigError(f"unknown environment {env_name!r}; choose from {sorted(ENVIRONMENTS)}", env_line)

    noise_vals, noise_lines = _section(items, "noise", {"sigma2"}, "noise")
    try:
        noise = NoiseSpec(float(noise_vals.get("sigma2", 0.0)))
    except ValueError as exc:
        raise ConfigError(str(exc), noise_lines.get("sigma2")) from None

    mode, mode_line = scalar("mode", "variance")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}", mode_line)
    variance = mode == "variance"

    probe = ENVIRONMENTS[env_name]
    net_fields = {f.name for f in fields(NetworkConfig)}
    net_vals, net_lines = _section(items, "network", net_fields, "network")
    if not variance and net_vals.get("variance_branch"):
        raise ConfigError("mode=baseline conflicts with network.variance_branch=true", net_lines["variance_branch"])
    net_vals.setdefault("variance_branch", variance)
    dims = _env_dims(env_name, env_params, probe)
    for k, v in dims.items():
        net_vals.setdefault(k, v)
    network = _build(NetworkConfig, net_vals, net_lines, "network")

    tr_fields = {f.name for f in fields(TrainerConfig)} - {"use_nll", "seed"}
    tr_vals, tr_lines = _section(items, "trainer", tr_fields, "trainer")
    loss_vals, loss_lines = _section(items, "loss", _LOSS_KEYS, "loss")
    tr_vals.update(loss_vals)
    tr_lines.update(loss_lines)
    tr_vals["use_nll"] = variance
    trainer = _build(TrainerConfig, tr_vals, tr_lines, "trainer")

    seeds, seeds_line = scalar("seeds", list(DEFAULT_SEEDS))
    if isinstance(seeds, int):
        seeds = list(range(seeds))
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers (or a count)", seeds_line)
    out, _ = scalar("output_dir", "runs")
    threshold, _ = scalar("threshold", CATCH_THRESHOLD)
    map_period, _ = scalar("map_period", 0)
    trainer = dataclasses.replace(trainer, seed=seeds[0])
    return RunConfig(env_name, dict(env_params), noise, network, trainer, mode, tuple(seeds), str(out),
                     float(threshold), int(map_period))


def _env_dims(name, params, cls):
    if name == "catch":
        h, w = params.get("height", 10), params.get("width", 10)
    elif name == "grid_collect":
        h = w = params.get("size", 6)
    else:
        h, w = params.get("height", 6), params.get("width", 6)
    n_actions = params.get("n_actions", getattr(cls, "n_actions", 2))
    return {"height": h, "width": w, "n_actions": n_actions, "frames": params.get("frames", 4)}


def parse_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config_text(fh.read())


def dump_config(cfg: RunConfig, path):
    """Write ``cfg`` as YAML that ``parse_config`` reads back to an equal config."""
    d = cfg.to_dict()
    for derived in ("use_nll", "seed"):
        d["trainer"].pop(derived)
    with open(path, "w") as fh:
        yaml.safe_dump(_plain(d), fh, sort_keys=False)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj
