"""Pipeline configuration: one INI file with a section per subsystem.

Every artifact records the fingerprint of the config that produced it;
commands refuse to mix artifacts from different fingerprints.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import canonical_json


class ConfigError(ValueError):
    """Config file missing, malformed, or holding an out-of-range value."""


@dataclass
class RoleConfig:
    backend: str = "script"  # script | http
    endpoint: str = ""
    model: str = ""
    api_key_env: str = ""


@dataclass
class PipelineConfig:
    # pipeline
    rng_seed: int = 0
    workers: int = 1
    # gateway
    retries: int = 2
    backoff_s: float = 0.2
    rate_cap: int = 4
    general: RoleConfig = field(default_factory=RoleConfig)
    solver: RoleConfig = field(default_factory=RoleConfig)
    # embedding
    embed_backend: str = "mock"  # mock | http
    embed_seed: int = 7
    embed_dim: int = 256
    embed_endpoint: str = ""
    embed_model: str = ""
    embed_api_key_env: str = ""
    # creation
    creation_max_turns: int = 3
    parse_retries: int = 2
    # clustering
    tree_depth: int = 4
    seed_size: int = 1000
    batch_size: int = 200
    max_update_rounds: int = 500
    # aggregation
    aggregation_max_turns: int = 3
    syntax_fix_turns: int = 3
    review_sample: int = 8
    # retrieval
    knn_k: int = 5
    # solver runtime
    max_tool_calls: int = 8
    max_retrievals: int = 2
    tool_timeout_ms: int = 10000
    # executor
    executor_backend: str = "echo"  # echo | canned | sandbox
    canned_results: str = ""
    sandbox_cmd: str = ""
    sandbox_pool: int = 2

    def resolve_path(self, value: str) -> Path:
        """Relative artifact paths in the config resolve against the config
        file's own directory."""
        path = Path(value)
        base = getattr(self, "config_dir", None)
        if not path.is_absolute() and base is not None:
            return Path(base) / path
        return path

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, RoleConfig):
                out[f.name] = vars(value).copy()
            else:
                out[f.name] = value
        return out

    def fingerprint(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode("utf-8")).hexdigest()

    def validate(self) -> None:
        positive = {
            "workers": self.workers,
            "rate_cap": self.rate_cap,
            "embed_dim": self.embed_dim,
            "creation_max_turns": self.creation_max_turns,
            "tree_depth": self.tree_depth,
            "seed_size": self.seed_size,
            "batch_size": self.batch_size,
            "max_update_rounds": self.max_update_rounds,
            "aggregation_max_turns": self.aggregation_max_turns,
            "syntax_fix_turns": self.syntax_fix_turns,
            "review_sample": self.review_sample,
            "knn_k": self.knn_k,
            "max_tool_calls": self.max_tool_calls,
            "max_retrievals": self.max_retrievals,
            "sandbox_pool": self.sandbox_pool,
        }
        for name, value in positive.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.retries < 0:
            raise ConfigError(f"retries must be >= 0, got {self.retries}")
        if self.backoff_s < 0:
            raise ConfigError(f"backoff_s must be >= 0, got {self.backoff_s}")
        if not 100 <= self.tool_timeout_ms <= 120000:
            raise ConfigError(
                f"tool_timeout_ms must lie in [100, 120000], got {self.tool_timeout_ms}"
            )
        for slot, role in (("general", self.general), ("solver", self.solver)):
            if role.backend not in ("script", "http"):
                raise ConfigError(f"gateway.{slot}: unknown backend {role.backend!r}")
        if self.embed_backend not in ("mock", "http"):
            raise ConfigError(f"embedding: unknown backend {self.embed_backend!r}")
        if self.executor_backend not in ("echo", "canned", "sandbox"):
            raise ConfigError(f"executor: unknown backend {self.executor_backend!r}")


_SECTION_KEYS = {
    "pipeline": {"rng_seed": int, "workers": int},
    "gateway": {"retries": int, "backoff_s": float, "rate_cap": int},
    "embedding": {
        "backend": str,
        "seed": int,
        "dim": int,
        "endpoint": str,
        "model": str,
        "api_key_env": str,
    },
    "creation": {"max_turns": int, "parse_retries": int},
    "clustering": {"depth": int, "seed_size": int, "batch_size": int, "max_rounds": int},
    "aggregation": {"max_turns": int, "syntax_turns": int, "review_sample": int},
    "retrieval": {"k": int},
    "solver": {"max_tool_calls": int, "max_retrievals": int, "timeout_ms": int},
    "executor": {"backend": str, "canned_results": str, "worker_cmd": str, "pool_size": int},
}

_FIELD_FOR = {
    ("pipeline", "rng_seed"): "rng_seed",
    ("pipeline", "workers"): "workers",
    ("gateway", "retries"): "retries",
    ("gateway", "backoff_s"): "backoff_s",
    ("gateway", "rate_cap"): "rate_cap",
    ("embedding", "backend"): "embed_backend",
    ("embedding", "seed"): "embed_seed",
    ("embedding", "dim"): "embed_dim",
    ("embedding", "endpoint"): "embed_endpoint",
    ("embedding", "model"): "embed_model",
    ("embedding", "api_key_env"): "embed_api_key_env",
    ("creation", "max_turns"): "creation_max_turns",
    ("creation", "parse_retries"): "parse_retries",
    ("clustering", "depth"): "tree_depth",
    ("clustering", "seed_size"): "seed_size",
    ("clustering", "batch_size"): "batch_size",
    ("clustering", "max_rounds"): "max_update_rounds",
    ("aggregation", "max_turns"): "aggregation_max_turns",
    ("aggregation", "syntax_turns"): "syntax_fix_turns",
    ("aggregation", "review_sample"): "review_sample",
    ("retrieval", "k"): "knn_k",
    ("solver", "max_tool_calls"): "max_tool_calls",
    ("solver", "max_retrievals"): "max_retrievals",
    ("solver", "timeout_ms"): "tool_timeout_ms",
    ("executor", "backend"): "executor_backend",
    ("executor", "canned_results"): "canned_results",
    ("executor", "worker_cmd"): "sandbox_cmd",
    ("executor", "pool_size"): "sandbox_pool",
}


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    cfg = PipelineConfig()
    for section in parser.sections():
        if section in ("gateway.general", "gateway.solver"):
            role = cfg.general if section.endswith("general") else cfg.solver
            for key, value in parser.items(section):
                if key not in vars(role):
                    raise ConfigError(f"[{section}] unknown key {key!r}")
                setattr(role, key, value)
            continue
        if section not in _SECTION_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            caster = _SECTION_KEYS[section].get(key)
            if caster is None:
                raise ConfigError(f"[{section}] unknown key {key!r}")
            try:
                setattr(cfg, _FIELD_FOR[(section, key)], caster(value))
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
    cfg.validate()
    cfg.config_dir = str(path.parent)  # not a dataclass field: excluded from fingerprint
    return cfg
