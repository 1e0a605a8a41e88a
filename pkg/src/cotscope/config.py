"""Run configuration: one structured file, flag overrides, env credentials.

Every subcommand resolves its configuration to a plain dict and writes it
next to its outputs, so a finished run can be reproduced offline from the
artifact directory alone.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import yaml


class ConfigError(ValueError):
    """Invalid configuration; message carries the field path."""


@dataclass
class RetryConfig:
    max_attempts: int = 3
    backoff_s: float = 0.5


@dataclass
class ModelsConfig:
    judge: str = "judge-model"
    extractor: str = "extractor-model"
    continuation: str = "continuation-model"


@dataclass
class BootstrapConfig:
    replicates: int = 200
    pool_size: int = 64


@dataclass
class ContinuationConfig:
    k: int = 8
    temperature: float = 0.6
    template: str = "{prompt}\n\n<think>\n{partial_cot}"
    # Chat-template mechanics differ per model family; override by the id of
    # the model whose CoT is being continued.
    model_templates: dict = field(default_factory=dict)

    def template_for(self, model_id: str) -> str:
        return self.model_templates.get(model_id, self.template)


@dataclass
class EntropyConfig:
    fractions: tuple = (0.0, 0.25, 0.5, 0.75)
    k: int = 8
    limit: int = 0  # 0 = every trace


@dataclass
class EditConfig:
    limit: int = 0  # 0 = every eligible incorrect trace
    branches: tuple = ("first", "last")
    variants: tuple = ("original", "reduced", "reduced_with_summary")


@dataclass
class RunConfig:
    questions: Optional[str] = None
    traces: Optional[str] = None
    out_dir: str = "out"
    cache_dir: str = "cache"
    offline: bool = False
    endpoint: Optional[str] = None
    api_key_env: str = "COTSCOPE_API_KEY"
    models: ModelsConfig = field(default_factory=ModelsConfig)
    concurrency: int = 4
    retry: RetryConfig = field(default_factory=RetryConfig)
    seed: int = 0
    keywords: Optional[str] = None
    context_window: int = 5
    min_rows: int = 100
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    selectors: tuple = ("fsf", "length", "review_ratio", "random")
    selector_directions: dict = field(
        default_factory=lambda: {"fsf": "lower", "length": "lower", "review_ratio": "lower"}
    )
    review_ratio_higher_models: tuple = ()  # models where higher review ratio wins
    continuation: ContinuationConfig = field(default_factory=ContinuationConfig)
    entropy: EntropyConfig = field(default_factory=EntropyConfig)
    edit: EditConfig = field(default_factory=EditConfig)

    def api_key(self) -> Optional[str]:
        return os.environ.get(self.api_key_env)

    def selector_direction(self, selector: str, model_id: str) -> str:
        if selector == "review_ratio" and model_id in self.review_ratio_higher_models:
            return "higher"
        return self.selector_directions.get(selector, "lower")

    def to_dict(self) -> dict:
        return asdict(self)


def _expect(value, types, path):
    if not isinstance(value, types):
        names = "/".join(t.__name__ for t in (types if isinstance(types, tuple) else (types,)))
        raise ConfigError(f"{path}: expected {names}, got {type(value).__name__}")
    return value


def _build(cls, data: dict, path: str):
    kwargs = {}
    fields = {f.name: f for f in cls.__dataclass_fields__.values()}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"{path}{key}: unknown config key")
        kwargs[key] = value
    return kwargs


def load_config(path: Optional[str | Path] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Load a YAML/JSON config file and apply flag overrides on top."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        loaded = yaml.safe_load(p.read_text(encoding="utf-8"))
        if loaded is None:
            loaded = {}
        data = _expect(loaded, dict, "config root")
    if overrides:
        data = {**data, **{k: v for k, v in overrides.items() if v is not None}}
    return config_from_dict(data)


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    known = {f.name for f in RunConfig.__dataclass_fields__.values()}
    for key in data:
        if key not in known:
            raise ConfigError(f"{key}: unknown config key")

    simple_types = {
        "questions": (str,), "traces": (str,), "out_dir": (str,), "cache_dir": (str,),
        "offline": (bool,), "endpoint": (str,), "api_key_env": (str,),
        "concurrency": (int,), "seed": (int,), "keywords": (str,),
        "context_window": (int,), "min_rows": (int,),
    }
    for key, types in simple_types.items():
        if key in data and data[key] is not None:
            setattr(cfg, key, _expect(data[key], types, key))

    if "models" in data:
        cfg.models = ModelsConfig(**_build(ModelsConfig, _expect(data["models"], dict, "models"), "models."))
    if "retry" in data:
        cfg.retry = RetryConfig(**_build(RetryConfig, _expect(data["retry"], dict, "retry"), "retry."))
        _expect(cfg.retry.max_attempts, int, "retry.max_attempts")
    if "bootstrap" in data:
        cfg.bootstrap = BootstrapConfig(
            **_build(BootstrapConfig, _expect(data["bootstrap"], dict, "bootstrap"), "bootstrap.")
        )
    if "continuation" in data:
        cfg.continuation = ContinuationConfig(
            **_build(ContinuationConfig, _expect(data["continuation"], dict, "continuation"), "continuation.")
        )
    if "entropy" in data:
        kwargs = _build(EntropyConfig, _expect(data["entropy"], dict, "entropy"), "entropy.")
        if "fractions" in kwargs:
            kwargs["fractions"] = tuple(float(f) for f in kwargs["fractions"])
        cfg.entropy = EntropyConfig(**kwargs)
    if "edit" in data:
        kwargs = _build(EditConfig, _expect(data["edit"], dict, "edit"), "edit.")
        for name in ("branches", "variants"):
            if name in kwargs:
                kwargs[name] = tuple(kwargs[name])
        cfg.edit = EditConfig(**kwargs)
    if "selectors" in data:
        cfg.selectors = tuple(_expect(data["selectors"], list, "selectors"))
    if "selector_directions" in data:
        directions = _expect(data["selector_directions"], dict, "selector_directions")
        for sel, direction in directions.items():
            if direction not in ("lower", "higher"):
                raise ConfigError(
                    f"selector_directions.{sel}: expected 'lower' or 'higher', got {direction!r}"
                )
        cfg.selector_directions = dict(directions)
    if "review_ratio_higher_models" in data:
        cfg.review_ratio_higher_models = tuple(
            _expect(data["review_ratio_higher_models"], list, "review_ratio_higher_models")
        )

    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.concurrency < 1:
        raise ConfigError("concurrency: must be >= 1")
    if cfg.retry.max_attempts < 1:
        raise ConfigError("retry.max_attempts: must be >= 1")
    if cfg.bootstrap.replicates < 1:
        raise ConfigError("bootstrap.replicates: must be >= 1")
    if cfg.bootstrap.pool_size < 1:
        raise ConfigError("bootstrap.pool_size: must be >= 1")
    if cfg.continuation.k < 1:
        raise ConfigError("continuation.k: must be >= 1")
    if not 0.0 <= cfg.continuation.temperature <= 1.0:
        raise ConfigError("continuation.temperature: must lie in [0, 1]")
    if cfg.entropy.k < 1:
        raise ConfigError("entropy.k: must be >= 1")
    if not cfg.entropy.fractions or cfg.entropy.fractions[0] != 0.0:
        raise ConfigError("entropy.fractions: must start at 0.0")
    if cfg.context_window < 0:
        raise ConfigError("context_window: must be >= 0")
    if cfg.min_rows < 1:
        raise ConfigError("min_rows: must be >= 1")
    for br in cfg.edit.branches:
        if br not in ("first", "last"):
            raise ConfigError(f"edit.branches: unknown branch choice {br!r}")
    for variant in cfg.edit.variants:
        if variant not in ("original", "reduced", "reduced_with_summary"):
            raise ConfigError(f"edit.variants: unknown variant {variant!r}")


def write_resolved_config(cfg: RunConfig, out_dir: str | Path, tool_version: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"tool_version": tool_version, "config": cfg.to_dict()}
    with open(out / "config.resolved.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, ensure_ascii=False, sort_keys=True, indent=1)
        fh.write("\n")
