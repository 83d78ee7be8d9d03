"""
Run configuration: defaults, .env / environment overrides, flat key = value files.
"""
import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from dotenv import dotenv_values, load_dotenv

from .errors import ConfigError

ENV_PREFIX = "CELLTRAFFIC_"
RESOLVED_CONFIG_NAME = "resolved_config.env"


@dataclass
class RunConfig:
    # paths
    cdr: str = ""
    grid: str = ""
    cache_dir: str = "cache"
    graph_dir: str = "graph"
    out_dir: str = "out"
    fixture: str = ""

    # ingest
    interval_minutes: int = 10
    train_fraction: float = 0.8
    workers: int = 1
    center_cell: int = 0
    node_count: int = 0  # 0 -> every grid cell; else the node_count cells nearest center_cell

    # graph
    graph_kind: str = "epsilon"
    edge_radius_m: float = 0.0  # 0 -> 2 x median nearest-neighbour distance
    weight_floor: float = 0.1
    sigma_m: float = 0.0  # 0 -> edge_radius_m
    propagation: str = "method1"
    method2_self_loops: bool = False
    method2_repair: bool = False

    # embedding
    embed_method: str = "laplacian"
    embed_dims: int = 2
    embed_layers: Tuple[int, ...] = (8, 2)
    feature_subset: Tuple[int, ...] = ()
    feature_sigma: float = 0.0

    # classification
    label_channel: str = "internet"
    label_snapshot: str = "peak"
    kappa: Optional[float] = None
    balance: float = 0.5
    visible_fraction: float = 0.3
    hidden: int = 16
    dropout_rate: float = 0.2
    classify_epochs: int = 200
    classify_learning_rate: float = 0.01
    classify_use_bias: bool = True

    # forecasting
    target_channel: str = "internet"
    m: int = 3
    k: int = 3
    kernel_width: int = 3
    temporal_channels: int = 16
    spatial_channels: int = 16
    out_channels: int = 8
    use_bias: bool = False
    epochs: int = 50
    batch: int = 16
    sweep_param: str = "m"
    sweep_values: Tuple[int, ...] = (1, 3, 6)

    # optimiser
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    seed: int = 7
    progress: bool = False

    def as_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes: Any) -> "RunConfig":
        unknown = set(changes) - set(field_names())
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return dataclasses.replace(self, **changes)

    def to_env_text(self) -> str:
        lines = [f"{key} = {format_value(value)}" for key, value in sorted(self.as_dict().items())]
        return "\n".join(lines) + "\n"

    def write(self, directory: str | Path) -> Path:
        """Write the fully resolved config beside a command's outputs."""
        target = Path(directory) / RESOLVED_CONFIG_NAME
        target.parent.mkdir(parents=True, exist_ok=True)
        tmp = target.with_suffix(".tmp")
        tmp.write_text(self.to_env_text(), encoding="utf-8")
        os.replace(tmp, target)
        return target


def field_names() -> Tuple[str, ...]:
    return tuple(f.name for f in dataclasses.fields(RunConfig))


def format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def coerce(key: str, raw: Any) -> Any:
    hints = typing.get_type_hints(RunConfig)
    if key not in hints:
        raise ConfigError(f"unknown config key: {key}")
    if not isinstance(raw, str):
        return raw
    kind = hints[key]
    text = raw.strip()
    origin = typing.get_origin(kind)
    args = typing.get_args(kind)
    try:
        if origin is typing.Union and type(None) in args:
            if text == "" or text.lower() == "none":
                return None
            inner = next(a for a in args if a is not type(None))
            return inner(text)
        if kind is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if origin is tuple:
            return tuple(int(part) for part in text.split(",") if part.strip())
        return kind(text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


def apply_mapping(config: RunConfig, values: Mapping[str, Any], source: str) -> RunConfig:
    changes: Dict[str, Any] = {}
    for key, raw in values.items():
        name = key.strip().lower()
        if name not in field_names():
            raise ConfigError(f"unknown config key {key!r} in {source}")
        changes[name] = coerce(name, raw)
    return dataclasses.replace(config, **changes) if changes else config


def env_values(environ: Mapping[str, str] | None = None) -> Dict[str, str]:
    environ = os.environ if environ is None else environ
    return {
        key[len(ENV_PREFIX):].lower(): value
        for key, value in environ.items()
        if key.startswith(ENV_PREFIX)
    }


def load_config(
    config_file: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    seed: int | None = None,
    environ: Mapping[str, str] | None = None,
    use_dotenv: bool = True,
) -> RunConfig:
    """Resolve defaults -> CELLTRAFFIC_* env -> config file -> overrides -> seed."""
    if use_dotenv and environ is None:
        load_dotenv(dotenv_path=Path.cwd() / ".env", override=False)

    config = apply_mapping(RunConfig(), env_values(environ), "environment")

    if config_file:
        path = Path(config_file)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        config = apply_mapping(config, dotenv_values(path), str(path))

    if overrides:
        config = apply_mapping(config, overrides, "command line")

    if seed is not None:
        config = dataclasses.replace(config, seed=int(seed))
    validate(config)
    return config


def validate(config: RunConfig) -> None:
    if config.interval_minutes <= 0:
        raise ConfigError("interval_minutes must be > 0")
    if config.node_count < 0:
        raise ConfigError("node_count must be >= 0")
    if config.node_count and not config.center_cell:
        raise ConfigError("node_count needs center_cell")
    if not 0.0 < config.train_fraction < 1.0:
        raise ConfigError("train_fraction must be in (0, 1)")
    if config.graph_kind not in ("epsilon", "gaussian"):
        raise ConfigError(f"graph_kind must be epsilon or gaussian, got {config.graph_kind!r}")
    if config.propagation not in ("method1", "method2"):
        raise ConfigError(f"propagation must be method1 or method2, got {config.propagation!r}")
    if config.embed_method not in ("laplacian", "gcn_method1", "gcn_method2"):
        raise ConfigError(f"unknown embed_method {config.embed_method!r}")
    if config.sweep_param not in ("m", "k"):
        raise ConfigError("sweep_param must be m or k")
    if not 0.0 <= config.dropout_rate < 1.0:
        raise ConfigError("dropout_rate must be in [0, 1)")
    if not 0.0 < config.weight_floor < 1.0:
        raise ConfigError("weight_floor must be in (0, 1)")
    for key in ("learning_rate", "classify_learning_rate"):
        if not getattr(config, key) > 0.0:
            raise ConfigError(f"{key} must be > 0")
    for key in ("hidden", "m", "k", "kernel_width", "epochs", "batch", "classify_epochs", "embed_dims"):
        if getattr(config, key) < 1:
            raise ConfigError(f"{key} must be >= 1")
