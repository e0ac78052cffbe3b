"""Run configuration: YAML loading with line-aware validation."""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .aggregation import STRATEGY_KINDS
from .datagen import PARTITION_SCHEMES, ClientDistribution, Gaussian, partition_classes
from .errors import ConfigurationError

SCHEMA_VERSION = 1
OVERLAP_ALIASES = {
    "non_ovl": "non_overlapping",
    "mod_ovl": "moderately_overlapping",
    "full_ovl": "fully_overlapping",
}
SWEEP_AXES = ("strategy", "lambda_fixed", "num_clients", "overlap")


@dataclass
class ModelConfig:
    noise_dim: int = 16
    generator_hidden: list = field(default_factory=lambda: [64, 64])
    discriminator_hidden: list = field(default_factory=lambda: [64, 64])
    hidden_activation: str = "leaky_relu"
    generator_activation: Optional[str] = None  # None: same as hidden_activation
    slope: float = 0.2
    spectral_norm: bool = False
    generator_output_gain: float = 1.0


@dataclass
class OptimizerConfig:
    eta: float = 2e-4
    disc_eta: Optional[float] = None  # None: same as eta
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class LambdaConfig:
    init: float = 0.1
    beta: float = 0.1
    fixed: Optional[float] = None


@dataclass
class ScenarioConfig:
    classes: list = field(default_factory=list)  # list of {mean, std | cov}
    partition: str = "non_overlapping"
    num_clients: int = 3
    clients: Optional[list] = None  # explicit [{classes: [...], weights: [...]}]
    buffer_size: Optional[int] = None

    @property
    def dim(self) -> int:
        return len(self.classes[0]["mean"])

    def class_densities(self) -> list:
        out = []
        for c in self.classes:
            mean = np.asarray(c["mean"], dtype=np.float64)
            if "cov" in c:
                out.append(Gaussian(mean, np.asarray(c["cov"], dtype=np.float64)))
            else:
                std = float(c["std"])
                out.append(Gaussian(mean, np.eye(mean.shape[0]) * std * std))
        return out

    def build_clients(self) -> list:
        dens = self.class_densities()
        if self.clients is not None:
            out = []
            for spec in self.clients:
                idx = list(spec["classes"])
                w = spec.get("weights") or [1.0 / len(idx)] * len(idx)
                out.append(ClientDistribution(tuple(dens[k] for k in idx), tuple(w)))
            return out
        return partition_classes(len(dens), self.num_clients, self.partition, dens)


@dataclass
class MetricsConfig:
    cadence: int = 100
    eval_samples: int = 10000
    coverage_radius: float = 1.0
    coverage_threshold: float = 0.10
    grid_points: Optional[int] = None


@dataclass
class RunConfig:
    name: str = "run"
    seed: int = 0
    iterations: int = 1000
    batch_size: int = 64
    strategy: str = "f2a"
    loss: str = "mse"
    fresh_judge_batch: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    lam: LambdaConfig = field(default_factory=LambdaConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    sweep: dict = field(default_factory=dict)

    @property
    def num_clients(self) -> int:
        if self.scenario.clients is not None:
            return len(self.scenario.clients)
        return self.scenario.num_clients

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        """Deep copy with dotted-path overrides, e.g. ``{"scenario.num_clients": 10}``."""
        new = copy.deepcopy(self)
        for key, value in changes.items():
            target = new
            parts = key.split(".")
            for p in parts[:-1]:
                target = getattr(target, p)
            setattr(target, parts[-1], value)
        validate(new)
        return new


# ---------------------------------------------------------------- YAML -> dict


def _compose(text: str):
    try:
        return yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigurationError(f"YAML syntax error: {getattr(exc, 'problem', exc)}", line) from None


def _to_python(node, path, lines):
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for knode, vnode in node.value:
            key = knode.value
            if key in out:
                raise ConfigurationError(f"duplicate key {key!r}", knode.start_mark.line + 1)
            out[key] = _to_python(vnode, path + (key,), lines)
            # report the key's line, not the line where a block value starts
            lines[path + (key,)] = knode.start_mark.line + 1
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_to_python(v, path + (i,), lines) for i, v in enumerate(node.value)]
    return _scalar(node)


def _scalar(node):
    loader = yaml.SafeLoader("")
    try:
        return loader.construct_object(node, deep=True)
    finally:
        loader.dispose()


def parse_yaml(text: str) -> tuple:
    """Return ``(data, lines)`` where ``lines`` maps key paths to 1-based lines."""
    node = _compose(text)
    lines: dict = {}
    if node is None:
        return {}, lines
    return _to_python(node, (), lines), lines


# ---------------------------------------------------------------- validation


class _Reader:
    def __init__(self, data, lines):
        self.data = data
        self.lines = lines

    def line(self, path):
        while path and path not in self.lines:
            path = path[:-1]
        return self.lines.get(path)

    def fail(self, path, msg):
        raise ConfigurationError(f"{'.'.join(map(str, path)) or '<root>'}: {msg}", self.line(path))

    def section(self, path, allowed):
        node = self.data
        for p in path:
            node = node.get(p, {}) if isinstance(node, dict) else None
        if node is None:
            return {}
        if not isinstance(node, dict):
            self.fail(path, "expected a mapping")
        unknown = sorted(set(node) - set(allowed))
        if unknown:
            self.fail(path + (unknown[0],), f"unknown key {unknown[0]!r}")
        return node

    def get(self, section_path, section, key, kind, default, check=None, msg=None):
        if key not in section or section[key] is None:
            return default
        value = section[key]
        path = section_path + (key,)
        try:
            if kind is bool:
                if not isinstance(value, bool):
                    raise TypeError
            elif kind is int:
                if isinstance(value, bool) or not isinstance(value, int):
                    raise TypeError
            elif kind is float:
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise TypeError
                value = float(value)
            elif kind is str:
                if not isinstance(value, str):
                    raise TypeError
        except TypeError:
            self.fail(path, f"expected {kind.__name__}, got {value!r}")
        if check is not None and not check(value):
            self.fail(path, msg or f"invalid value {value!r}")
        return value


_FIXED_RE = re.compile(r"^fixed_lambda\(\s*([0-9.eE+-]+)\s*\)$")


def from_dict(data: dict, lines: Optional[dict] = None) -> RunConfig:
    r = _Reader(data if isinstance(data, dict) else {}, lines or {})
    if not isinstance(data, dict):
        r.fail((), "configuration must be a mapping")
    top = r.section((), ("name", "seed", "iterations", "batch_size", "strategy", "loss",
                         "fresh_judge_batch", "model", "optimizer", "lambda", "scenario",
                         "metrics", "sweep"))
    cfg = RunConfig()
    cfg.name = r.get((), top, "name", str, cfg.name)
    cfg.seed = r.get((), top, "seed", int, cfg.seed, lambda v: v >= 0, "seed must be >= 0")
    cfg.iterations = r.get((), top, "iterations", int, cfg.iterations, lambda v: v >= 0,
                           "iterations must be >= 0")
    cfg.batch_size = r.get((), top, "batch_size", int, cfg.batch_size, lambda v: v >= 1,
                           "batch_size must be >= 1")
    cfg.loss = r.get((), top, "loss", str, cfg.loss, lambda v: v in ("mse", "bce"),
                     "loss must be 'mse' or 'bce'")
    cfg.fresh_judge_batch = r.get((), top, "fresh_judge_batch", bool, False)

    lam = r.section(("lambda",), ("init", "beta", "fixed"))
    cfg.lam.init = r.get(("lambda",), lam, "init", float, cfg.lam.init)
    cfg.lam.beta = r.get(("lambda",), lam, "beta", float, cfg.lam.beta, lambda v: v >= 0,
                         "beta must be >= 0")
    cfg.lam.fixed = r.get(("lambda",), lam, "fixed", float, None, lambda v: v >= 0,
                          "fixed lambda must be >= 0")

    strategy = r.get((), top, "strategy", str, cfg.strategy)
    m = _FIXED_RE.match(strategy)
    if m:
        strategy, cfg.lam.fixed = "fixed_lambda", float(m.group(1))
    if strategy not in STRATEGY_KINDS:
        r.fail(("strategy",), f"unknown strategy {strategy!r}; expected one of {', '.join(STRATEGY_KINDS)}")
    if strategy == "fixed_lambda" and cfg.lam.fixed is None:
        r.fail(("strategy",), "fixed_lambda needs lambda.fixed or the form fixed_lambda(<value>)")
    cfg.strategy = strategy

    mp = ("model",)
    mod = r.section(mp, tuple(ModelConfig.__dataclass_fields__))
    mc = cfg.model
    mc.noise_dim = r.get(mp, mod, "noise_dim", int, mc.noise_dim, lambda v: v >= 1)
    for key in ("generator_hidden", "discriminator_hidden"):
        if key in mod:
            v = mod[key]
            if not isinstance(v, list) or not all(isinstance(h, int) and h >= 1 for h in v):
                r.fail(mp + (key,), "expected a list of positive layer widths")
            setattr(mc, key, list(v))
    acts = ("relu", "leaky_relu", "tanh", "sigmoid", "linear")
    mc.hidden_activation = r.get(mp, mod, "hidden_activation", str, mc.hidden_activation,
                                 lambda v: v in acts, f"activation must be one of {', '.join(acts)}")
    mc.generator_activation = r.get(mp, mod, "generator_activation", str, None,
                                    lambda v: v in acts, f"activation must be one of {', '.join(acts)}")
    mc.slope = r.get(mp, mod, "slope", float, mc.slope, lambda v: v > 0, "slope must be > 0")
    mc.spectral_norm = r.get(mp, mod, "spectral_norm", bool, mc.spectral_norm)
    mc.generator_output_gain = r.get(mp, mod, "generator_output_gain", float,
                                     mc.generator_output_gain, lambda v: v > 0)

    op = ("optimizer",)
    opt = r.section(op, tuple(OptimizerConfig.__dataclass_fields__))
    oc = cfg.optimizer
    oc.eta = r.get(op, opt, "eta", float, oc.eta, lambda v: v > 0, "eta must be > 0")
    oc.disc_eta = r.get(op, opt, "disc_eta", float, None, lambda v: v > 0, "disc_eta must be > 0")
    oc.beta1 = r.get(op, opt, "beta1", float, oc.beta1, lambda v: 0 <= v < 1)
    oc.beta2 = r.get(op, opt, "beta2", float, oc.beta2, lambda v: 0 <= v < 1)
    oc.epsilon = r.get(op, opt, "epsilon", float, oc.epsilon, lambda v: v > 0)

    sp = ("scenario",)
    sc = r.section(sp, ("classes", "partition", "num_clients", "clients", "buffer_size", "layout"))
    scen = cfg.scenario
    if "layout" in sc:
        scen.classes = _layout_classes(r, sp + ("layout",), sc["layout"])
    elif "classes" in sc:
        scen.classes = _read_classes(r, sp + ("classes",), sc["classes"])
    else:
        r.fail(sp, "scenario needs 'classes' or 'layout'")
    part = r.get(sp, sc, "partition", str, scen.partition)
    part = OVERLAP_ALIASES.get(part, part)
    if part not in PARTITION_SCHEMES:
        r.fail(sp + ("partition",), f"unknown partition {part!r}")
    scen.partition = part
    scen.num_clients = r.get(sp, sc, "num_clients", int, scen.num_clients, lambda v: v >= 1)
    scen.buffer_size = r.get(sp, sc, "buffer_size", int, None, lambda v: v >= 1)
    if "clients" in sc and sc["clients"] is not None:
        scen.clients = _read_clients(r, sp + ("clients",), sc["clients"], len(scen.classes))

    mtp = ("metrics",)
    met = r.section(mtp, tuple(MetricsConfig.__dataclass_fields__))
    mc2 = cfg.metrics
    mc2.cadence = r.get(mtp, met, "cadence", int, mc2.cadence, lambda v: v >= 1)
    mc2.eval_samples = r.get(mtp, met, "eval_samples", int, mc2.eval_samples, lambda v: v >= 1)
    mc2.coverage_radius = r.get(mtp, met, "coverage_radius", float, mc2.coverage_radius, lambda v: v > 0)
    mc2.coverage_threshold = r.get(mtp, met, "coverage_threshold", float, mc2.coverage_threshold,
                                   lambda v: 0 < v <= 1)
    mc2.grid_points = r.get(mtp, met, "grid_points", int, None, lambda v: v >= 16)

    sw = r.section(("sweep",), SWEEP_AXES)
    for axis, values in sw.items():
        if not isinstance(values, list) or not values:
            r.fail(("sweep", axis), "expected a non-empty list of values")
    cfg.sweep = dict(sw)

    try:
        validate(cfg)
    except ConfigurationError as exc:
        raise ConfigurationError(str(exc), r.line(("scenario",))) from None
    return cfg


def _read_classes(r, path, value):
    if not isinstance(value, list) or not value:
        r.fail(path, "expected a non-empty list of class densities")
    out = []
    dims = set()
    for i, c in enumerate(value):
        p = path + (i,)
        if not isinstance(c, dict) or "mean" not in c:
            r.fail(p, "class needs a 'mean'")
        extra = set(c) - {"mean", "std", "cov"}
        if extra:
            r.fail(p + (sorted(extra)[0],), f"unknown key {sorted(extra)[0]!r}")
        mean = c["mean"]
        if isinstance(mean, (int, float)) and not isinstance(mean, bool):
            mean = [mean]
        if not isinstance(mean, list) or len(mean) not in (1, 2):
            r.fail(p + ("mean",), "mean must be a number or a list of 1 or 2 numbers")
        entry = {"mean": [float(v) for v in mean]}
        if "cov" in c:
            entry["cov"] = [[float(v) for v in row] for row in c["cov"]]
            try:
                Gaussian(np.array(entry["mean"]), np.array(entry["cov"]))
            except ConfigurationError as exc:
                r.fail(p + ("cov",), str(exc))
        else:
            std = c.get("std")
            if not isinstance(std, (int, float)) or isinstance(std, bool) or not std > 0:
                r.fail(p + ("std",) if "std" in c else p, "std must be a positive number")
            entry["std"] = float(std)
        dims.add(len(entry["mean"]))
        out.append(entry)
    if len(dims) != 1:
        r.fail(path, "all classes must have the same dimension")
    return out


def _layout_classes(r, path, spec):
    """Generate evenly spaced classes: ``line`` (1-D) or ``ring`` (2-D)."""
    if not isinstance(spec, dict):
        r.fail(path, "layout must be a mapping")
    kind = spec.get("kind", "line")
    count = spec.get("count")
    std = spec.get("std", 0.5)
    if not isinstance(count, int) or count < 1:
        r.fail(path + ("count",), "layout needs a positive integer 'count'")
    if kind == "line":
        spacing = float(spec.get("spacing", 4.0))
        centre = (count - 1) / 2.0
        return [{"mean": [spacing * (k - centre)], "std": float(std)} for k in range(count)]
    if kind == "ring":
        radius = float(spec.get("radius", 4.0))
        out = []
        for k in range(count):
            a = 2.0 * np.pi * k / count
            out.append({"mean": [radius * np.cos(a), radius * np.sin(a)], "std": float(std)})
        return out
    r.fail(path + ("kind",), f"unknown layout kind {kind!r}")


def _read_clients(r, path, value, n_classes):
    if not isinstance(value, list) or not value:
        r.fail(path, "expected a non-empty list of clients")
    out = []
    for i, c in enumerate(value):
        p = path + (i,)
        if not isinstance(c, dict) or not isinstance(c.get("classes"), list) or not c["classes"]:
            r.fail(p, "client needs a non-empty 'classes' list")
        if any(not isinstance(k, int) or not 0 <= k < n_classes for k in c["classes"]):
            r.fail(p + ("classes",), f"class indices must lie in [0, {n_classes})")
        w = c.get("weights")
        if w is not None:
            if len(w) != len(c["classes"]) or any(v < 0 for v in w) or abs(sum(w) - 1) > 1e-12:
                r.fail(p + ("weights",), "weights must match classes, be >= 0 and sum to 1")
        out.append({"classes": list(c["classes"]), "weights": None if w is None else [float(v) for v in w]})
    return out


def validate(cfg: RunConfig) -> None:
    """Cross-field checks shared by loading and programmatic overrides."""
    if cfg.batch_size < 1 or cfg.iterations < 0:
        raise ConfigurationError("batch_size must be >= 1 and iterations >= 0")
    if cfg.strategy not in STRATEGY_KINDS:
        raise ConfigurationError(f"unknown strategy {cfg.strategy!r}")
    if cfg.strategy == "fixed_lambda" and cfg.lam.fixed is None:
        raise ConfigurationError("fixed_lambda needs lambda.fixed")
    if not cfg.scenario.classes:
        raise ConfigurationError("scenario has no classes")
    if cfg.scenario.partition not in PARTITION_SCHEMES:
        raise ConfigurationError(f"unknown partition {cfg.scenario.partition!r}")
    cfg.scenario.build_clients()


def load_config(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    data, lines = parse_yaml(text)
    return from_dict(data, lines)


def loads_config(text: str) -> RunConfig:
    data, lines = parse_yaml(text)
    return from_dict(data, lines)
