"""JSON run configuration: parsing, validation, hashing and dataset assembly.

A config has three sections::

    {
      "data":      {...},   # task, digit source, environments, splits
      "objective": {...},   # kind, lam, beta, eta, bandwidths
      "train":     {...}    # every TrainConfig field except objective and seed
    }

plus an optional top-level ``"seed"``.  Missing keys take the defaults in
``DEFAULTS``; unknown keys are rejected.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .data import (DigitSet, DomainDataset, EnvironmentSpec, load_idx, make_colored_env,
                   make_two_feature_env, procedural_digits, split_dataset)
from .kernel import DEFAULT_BANDWIDTHS, KernelSpec
from .objectives import KINDS, ObjectiveConfig
from .trainer import Benchmark, TrainConfig

TASKS = ("colored_mnist", "two_feature")
# ERM pre-training length used when train.pre_train_steps is left unset
PRETRAIN_DEFAULT = {"colored_mnist": 400, "two_feature": 200}


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


DEFAULTS = {
    "seed": 0,
    "data": {
        "task": "colored_mnist",
        "source": "procedural",
        "digits": None,
        "digit_seed": 0,
        "images": None,
        "labels": None,
        "test_images": None,
        "test_labels": None,
        "seed": 0,
        "label_noise": 0.25,
        "train_envs": [{"agreement": 0.9, "n": 5500}, {"agreement": 0.8, "n": 5500}],
        "test_envs": [{"agreement": 0.1, "n": 6000}],
        "val_fraction": 1 / 11,
        "test_val_fraction": 1 / 6,
    },
    "objective": {
        "kind": "erm",
        "lam": 1.0,
        "beta": 0.0,
        "eta": 0.01,
        "bandwidths": list(DEFAULT_BANDWIDTHS),
    },
    "train": {
        "steps": 600,
        "pre_train_steps": None,
        "lr": 1e-4,
        "lr_after_pretrain": None,
        "batch_size": 512,
        "adam_betas": [0.9, 0.999],
        "adam_eps": 1e-8,
        "weight_decay": 0.0,
        "cosine": True,
        "reset_optimizer_after_pretrain": True,
        "model_selection": "test-domain-validation",
        "checkpoint": "best",
        "eval_interval": 15,
        "hidden": 390,
        "dropout": 0.2,
    },
}


def _merge(defaults: dict, given: dict, where: str) -> dict:
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{key} must be an object")
            out[key] = _merge(defaults[key], value, f"{where}.{key}")
        else:
            out[key] = value
    return out


def _env_specs(data: dict, role: str) -> list[EnvironmentSpec]:
    envs = data[f"{role}_envs"]
    if not isinstance(envs, list) or not envs:
        raise ConfigError(f"data.{role}_envs must be a nonempty list")
    specs = []
    for i, env in enumerate(envs):
        extra = set(env) - {"agreement", "label_noise", "n"}
        if extra:
            raise ConfigError(f"data.{role}_envs[{i}]: unknown key(s) {sorted(extra)}")
        try:
            specs.append(EnvironmentSpec(float(env["agreement"]),
                                         float(env.get("label_noise", data["label_noise"])),
                                         env.get("n"), int(data["seed"])))
        except (KeyError, TypeError, ValueError) as err:
            raise ConfigError(f"data.{role}_envs[{i}]: {err}") from None
    return specs


@dataclass
class RunConfig:
    """A fully resolved and validated configuration."""

    raw: dict
    train: TrainConfig
    train_envs: list[EnvironmentSpec]
    test_envs: list[EnvironmentSpec]

    @property
    def data(self) -> dict:
        return self.raw["data"]

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)

    def content_hash(self, include_seed: bool = False) -> str:
        """Stable digest of the resolved config (seed excluded by default)."""
        d = copy.deepcopy(self.raw)
        if not include_seed:
            d.pop("seed", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def data_hash(self) -> str:
        blob = json.dumps(self.raw["data"], sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def with_overrides(self, seed: int | None = None, lam: float | None = None) -> "RunConfig":
        raw = copy.deepcopy(self.raw)
        if seed is not None:
            raw["seed"] = int(seed)
        if lam is not None:
            raw["objective"]["lam"] = float(lam)
        return resolve(raw)


def resolve(given: dict) -> RunConfig:
    if not isinstance(given, dict):
        raise ConfigError("config must be a JSON object")
    raw = _merge(DEFAULTS, given, "config")
    data, obj, tr = raw["data"], raw["objective"], raw["train"]
    if data["task"] not in TASKS:
        raise ConfigError(f"data.task must be one of {', '.join(TASKS)}")
    if data["source"] not in ("procedural", "idx"):
        raise ConfigError("data.source must be 'procedural' or 'idx'")
    if data["task"] == "colored_mnist" and data["source"] == "idx" and not (data["images"] and data["labels"]):
        raise ConfigError("data.source 'idx' needs data.images and data.labels")
    if obj["kind"] not in KINDS:
        raise ConfigError(f"unknown objective kind {obj['kind']!r}; valid kinds: {', '.join(KINDS)}")
    train_envs, test_envs = _env_specs(data, "train"), _env_specs(data, "test")
    tr = dict(tr)
    if tr["pre_train_steps"] is None:
        steps = tr["steps"] if isinstance(tr["steps"], int) else 0
        tr["pre_train_steps"] = min(PRETRAIN_DEFAULT[data["task"]], max(steps, 0))
    try:
        kernel = KernelSpec(tuple(obj["bandwidths"]))
        objective = ObjectiveConfig(obj["kind"], float(obj["lam"]), float(obj["beta"]),
                                    float(obj["eta"]), kernel)
        train_cfg = TrainConfig(objective=objective, seed=int(raw["seed"]), **tr)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None
    return RunConfig(raw, train_cfg, train_envs, test_envs)


def load(path) -> RunConfig:
    try:
        given = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from None
    return resolve(given)


# --- dataset assembly -----------------------------------------------------


def _digit_pool(data: dict, needed: int) -> tuple[DigitSet, DigitSet | None]:
    if data["source"] == "procedural":
        count = data["digits"] or needed
        return procedural_digits(count, data["digit_seed"]), None
    try:
        train = load_idx(data["images"], data["labels"])
        test = None
        if data["test_images"] and data["test_labels"]:
            test = load_idx(data["test_images"], data["test_labels"])
    except (OSError, ValueError) as err:
        raise DataError(str(err)) from None
    return train, test


def build_environments(cfg: RunConfig) -> list[tuple[str, DomainDataset]]:
    """Generate every environment as ``(role, dataset)``; domain ids are
    assigned train envs first, then test envs."""
    data = cfg.data
    specs = [("train", s) for s in cfg.train_envs] + [("test", s) for s in cfg.test_envs]
    if data["task"] == "two_feature":
        return [(role, make_two_feature_env(spec, i, f"{role}{i}")) for i, (role, spec) in enumerate(specs)]

    sizes = [s.n for _, s in specs]
    if any(n is None for n in sizes):
        raise ConfigError("colored_mnist environments need an explicit n")
    pool, test_pool = _digit_pool(data, sum(sizes))
    envs, offset, test_offset = [], 0, 0
    for i, (role, spec) in enumerate(specs):
        if role == "test" and test_pool is not None:
            src, lo = test_pool, test_offset
            test_offset += spec.n
        else:
            src, lo = pool, offset
            offset += spec.n
        if lo + spec.n > len(src):
            raise DataError(f"not enough digits for environment {i}: need {lo + spec.n}, have {len(src)}")
        envs.append((role, make_colored_env(src.subset(slice(lo, lo + spec.n)), spec, i, f"{role}{i}")))
    return envs


def make_benchmark(cfg: RunConfig, envs: list[tuple[str, DomainDataset]]) -> Benchmark:
    data = cfg.data
    bench = Benchmark([], [], [], [])
    for role, ds in envs:
        if role == "train":
            tr, val = split_dataset(ds, data["val_fraction"], data["seed"])
            bench.train.append(tr)
            if val is not None:
                bench.val.append(val)
        else:
            te, tv = split_dataset(ds, data["test_val_fraction"], data["seed"])
            bench.test.append(te)
            if tv is not None:
                bench.test_val.append(tv)
    return bench


def as_float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"not a comma-separated list of numbers: {text!r}") from None


def as_int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"not a comma-separated list of integers: {text!r}") from None

