"""Run configuration: one JSON document with a section per component.

Layout::

    {
      "seed": 0,
      "benchmark": {...BenchmarkSpec fields..., "holdout": 0.25},
      "model": {...ModelConfig fields...},
      "train": {...TrainConfig fields, "sgld": {...}, "weights": {...}},
      "eval": {"num_chains": 5, "latent_mode": "prior", "aggregations": [...], "num_steps": null},
      "sweep": {"steps": [...], "modes": [...]}
    }

Every section and field is optional; unknown keys are rejected. The run seed
lives at the top level and is copied into the training config.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .data import BenchmarkSpec
from .inference import AGGREGATIONS, LatentMode
from .objective import LossWeights
from .sgld import SgldConfig
from .trainer import ModelConfig, TrainConfig

# Step size for the synthetic benchmark. The library default (50) is sized
# for large backbone features; trunk features here are much smaller.
BENCHMARK_STEP_SIZE = 2.0


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    num_chains: int = 5
    latent_mode: str = "prior"
    aggregations: tuple = ("ensemble",)
    num_steps: int | None = None      # defaults to the training chain length

    def __post_init__(self):
        self.aggregations = tuple(self.aggregations)
        if self.num_chains < 1:
            raise ValueError("num_chains must be >= 1")
        LatentMode(self.latent_mode)
        for a in self.aggregations:
            if a not in AGGREGATIONS:
                raise ValueError(f"unknown aggregation {a!r}; choose from {AGGREGATIONS}")
        if self.num_steps is not None and self.num_steps < 0:
            raise ValueError("num_steps must be >= 0")


@dataclass
class SweepConfig:
    steps: tuple = (0, 5, 10, 20, 50)
    modes: tuple = ("none", "prior", "oracle")

    def __post_init__(self):
        self.steps = tuple(int(s) for s in self.steps)
        self.modes = tuple(self.modes)
        if not self.steps or min(self.steps) < 0:
            raise ValueError("sweep steps must be a non-empty list of non-negative integers")
        for m in self.modes:
            LatentMode(m)


@dataclass
class RunConfig:
    seed: int = 0
    benchmark: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    holdout: float = 0.25
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        sgld=SgldConfig(step_size=BENCHMARK_STEP_SIZE)))
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def to_dict(self):
        d = asdict(self)
        d["benchmark"]["holdout"] = d.pop("holdout")
        d["train"].pop("seed")
        return _jsonable(d)

    def hash(self):
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()

    def sgld_for_eval(self):
        k = self.train.sgld.num_steps if self.eval.num_steps is None else self.eval.num_steps
        s = self.train.sgld
        return SgldConfig(s.step_size, k, s.noise_std, s.grad_clip)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _check_keys(section, data, cls, extra=()):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    allowed = {f.name for f in fields(cls)} | set(extra)
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")


def from_dict(data):
    """Build a ``RunConfig`` from a parsed JSON document."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    data = copy.deepcopy(data)
    top = {"seed", "benchmark", "model", "train", "eval", "sweep"}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    cfg = RunConfig()
    try:
        if "seed" in data:
            cfg.seed = int(data["seed"])
        bench = data.get("benchmark", {})
        _check_keys("benchmark", bench, BenchmarkSpec, extra=("holdout",))
        cfg.holdout = float(bench.pop("holdout", cfg.holdout))
        for key in ("source_angles", "target_angles"):
            if key in bench:
                bench[key] = tuple(float(a) for a in bench[key])
        cfg.benchmark = BenchmarkSpec(**bench)
        cfg.benchmark.validate()
        if not 0.0 < cfg.holdout < 1.0:
            raise ValueError("holdout must lie in (0, 1)")

        model = data.get("model", {})
        _check_keys("model", model, ModelConfig)
        cfg.model = ModelConfig(**model)

        train = data.get("train", {})
        _check_keys("train", train, TrainConfig)
        if "seed" in train:
            raise ConfigError("set the run seed at the top level, not in 'train'")
        sgld = {**asdict(cfg.train.sgld), **train.pop("sgld", {})}
        _check_keys("train.sgld", sgld, SgldConfig)
        weights = train.pop("weights", {})
        _check_keys("train.weights", weights, LossWeights)
        base = asdict(cfg.train)
        base.pop("sgld"), base.pop("weights")
        base.update(train)
        cfg.train = TrainConfig(**base, sgld=SgldConfig(**sgld), weights=LossWeights(**weights))

        ev = data.get("eval", {})
        _check_keys("eval", ev, EvalConfig)
        cfg.eval = EvalConfig(**ev)
        sw = data.get("sweep", {})
        _check_keys("sweep", sw, SweepConfig)
        cfg.sweep = SweepConfig(**sw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    cfg.train.seed = cfg.seed
    return cfg


def load(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return data


def apply_overrides(data, assignments):
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    data = copy.deepcopy(data)
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = value
    return data
