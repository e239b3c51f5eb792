"""Experiment configuration: YAML in, validated dataclasses out.

Dialect: a YAML mapping with the sections below; every key is optional
except ``models``. Unknown keys and wrongly typed values are rejected with
the file line they appear on. Relative paths are resolved against the
directory holding the config file.

.. code-block:: yaml

    name: smoke
    algorithm: fedzkt          # fedzkt | fedmd
    out_dir: runs/smoke
    models: [mlp-small, cnn-a]
    global_model: cnn-wide
    dataset:
      source: synthetic        # idx | synthetic
      classes: 4
    partition:
      scheme: iid              # iid | quantity | dirichlet
    federation:
      rounds: 2
      num_devices: 2
"""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .federation import FederationConfig
from .losses import LOSS_KINDS
from .zoo import CATALOG

MNIST_DIR = "data/mnist"


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    source: str = "idx"
    train_images: str = f"{MNIST_DIR}/train-images-idx3-ubyte.gz"
    train_labels: str = f"{MNIST_DIR}/train-labels-idx1-ubyte.gz"
    test_images: str = f"{MNIST_DIR}/t10k-images-idx3-ubyte.gz"
    test_labels: str = f"{MNIST_DIR}/t10k-labels-idx1-ubyte.gz"
    train_limit: int | None = None  # seeded random subset of the training file
    test_limit: int | None = None
    subset_seed: int = 0
    crop: int = 0  # border pixels removed from every side
    pool: int = 1  # average-pooling factor applied after cropping
    # synthetic source only
    classes: int = 10
    per_class: int = 100
    test_per_class: int = 50
    image_shape: tuple[int, int, int] = (1, 16, 16)
    noise: float = 0.3


@dataclass
class PartitionConfig:
    scheme: str = "iid"
    classes_per_device: int = 2
    beta: float = 0.5
    min_per_device: int = 0
    seed: int | None = None  # defaults to federation.seed


@dataclass
class GeneratorConfig:
    latent_dim: int = 100
    hidden_channels: tuple[int, int] = (16, 8)


@dataclass
class FedMDConfig:
    public: str = "matched"  # matched | noise


@dataclass
class DiagnosticsConfig:
    gradnorms: bool = False
    gradnorm_batch: int = 256


@dataclass
class ExperimentConfig:
    models: list[str]
    name: str = "experiment"
    algorithm: str = "fedzkt"
    out_dir: str = "runs/experiment"
    global_model: str = "cnn-wide"
    checkpoints: bool = True
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    fedmd: FedMDConfig = field(default_factory=FedMDConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)

    @property
    def partition_seed(self) -> int:
        return self.federation.seed if self.partition.seed is None else self.partition.seed

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# YAML with line numbers ----------------------------------------------------

def _locate(node: yaml.Node, path: tuple = (), out: dict | None = None) -> dict:
    """Map key paths to 1-based line numbers for every mapping entry."""
    out = {} if out is None else out
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            out[path + (k.value,)] = k.start_mark.line + 1
            _locate(v, path + (k.value,), out)
    return out


class _Ctx:
    def __init__(self, source: str, lines: dict):
        self.source = source
        self.lines = lines

    def error(self, path: tuple, msg: str) -> ConfigError:
        key = path
        while key not in self.lines and key:
            key = key[:-1]
        where = f"{self.source}:{self.lines.get(key, 1)}"
        dotted = ".".join(map(str, path)) or "<root>"
        return ConfigError(f"{where}: {dotted}: {msg}")


def _type_name(hint) -> str:
    return getattr(hint, "__name__", None) or str(hint).replace("typing.", "")


def _coerce(value: Any, hint, path: tuple, ctx: _Ctx):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _coerce(value, inner, path, ctx)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path, ctx)
    if origin in (list, tuple):
        if not isinstance(value, list):
            raise ctx.error(path, f"expected a list, got {type(value).__name__}")
        if origin is tuple and args[-1] is not Ellipsis:
            if len(value) != len(args):
                raise ctx.error(path, f"expected {len(args)} items, got {len(value)}")
            return tuple(_coerce(v, a, path, ctx) for v, a in zip(value, args))
        return [_coerce(v, args[0], path, ctx) for v in value]
    if hint is bool:
        if not isinstance(value, bool):
            raise ctx.error(path, f"expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ctx.error(path, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ctx.error(path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ctx.error(path, f"expected a string, got {value!r}")
        return value
    raise ctx.error(path, f"unsupported type {_type_name(hint)}")


def _build(cls, data: Any, path: tuple, ctx: _Ctx):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ctx.error(path, f"expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    for key in data:
        if key not in names:
            raise ctx.error(path + (key,), f"unknown key (allowed: {', '.join(sorted(names))})")
    kwargs = {k: _coerce(v, hints[k], path + (k,), ctx) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ctx.error(path, str(e)) from None
    except ValueError as e:
        raise ctx.error(path, str(e)) from None


def _validate(cfg: ExperimentConfig, base: Path, ctx: _Ctx, check_paths: bool) -> None:
    if cfg.algorithm not in ("fedzkt", "fedmd"):
        raise ctx.error(("algorithm",), "must be 'fedzkt' or 'fedmd'")
    k = cfg.federation.num_devices
    if len(cfg.models) != k:
        raise ctx.error(("models",), f"federation.num_devices={k} but {len(cfg.models)} model names given")
    for i, name in enumerate(cfg.models + [cfg.global_model]):
        if name not in CATALOG:
            where = ("models",) if i < len(cfg.models) else ("global_model",)
            raise ctx.error(where, f"unknown model {name!r}; catalog: {', '.join(CATALOG)}")
    if cfg.federation.loss_kind not in LOSS_KINDS:
        raise ctx.error(("federation", "loss_kind"), f"must be one of {LOSS_KINDS}")
    ds = cfg.dataset
    if ds.source not in ("idx", "synthetic"):
        raise ctx.error(("dataset", "source"), "must be 'idx' or 'synthetic'")
    if ds.source == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            p = Path(getattr(ds, key))
            if not p.is_absolute():
                p = (base / p).resolve()
            setattr(ds, key, str(p))
            if check_paths and not p.exists():
                raise ctx.error(("dataset", key), f"file not found: {p}")
    else:
        if ds.classes < 2 or ds.per_class < 1 or ds.test_per_class < 1:
            raise ctx.error(("dataset",), "synthetic data needs classes >= 2 and positive per-class counts")
    if ds.crop < 0 or ds.pool < 1:
        raise ctx.error(("dataset",), "crop must be >= 0 and pool >= 1")
    for key in ("train_limit", "test_limit"):
        v = getattr(ds, key)
        if v is not None and v < 1:
            raise ctx.error(("dataset", key), "must be >= 1")
    part = cfg.partition
    if part.scheme not in ("iid", "quantity", "dirichlet"):
        raise ctx.error(("partition", "scheme"), "must be 'iid', 'quantity' or 'dirichlet'")
    if part.scheme == "dirichlet" and part.beta <= 0:
        raise ctx.error(("partition", "beta"), "must be positive")
    if part.scheme == "quantity" and part.classes_per_device < 1:
        raise ctx.error(("partition", "classes_per_device"), "must be >= 1")
    if cfg.fedmd.public not in ("matched", "noise"):
        raise ctx.error(("fedmd", "public"), "must be 'matched' or 'noise'")
    if cfg.diagnostics.gradnorm_batch < 1:
        raise ctx.error(("diagnostics", "gradnorm_batch"), "must be >= 1")
    out = Path(cfg.out_dir)
    cfg.out_dir = str(out if out.is_absolute() else (base / out).resolve())


def merge_overrides(data: dict, overrides: dict) -> dict:
    """Recursively overlay ``overrides`` onto ``data`` (in place)."""
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            merge_overrides(data[key], value)
        else:
            data[key] = value
    return data


def parse_config_text(
    text: str,
    source: str = "<config>",
    base_dir: str | Path = ".",
    check_paths: bool = True,
    overrides: dict | None = None,
) -> ExperimentConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark else 1
        raise ConfigError(f"{source}:{line}: invalid YAML: {getattr(e, 'problem', e)}") from None
    ctx = _Ctx(source, _locate(node) if node is not None else {})
    if not isinstance(data, dict):
        raise ctx.error((), "config must be a mapping")
    if overrides:
        merge_overrides(data, overrides)
    if "models" not in data:
        raise ctx.error((), "missing required key 'models'")
    cfg = _build(ExperimentConfig, data, (), ctx)
    _validate(cfg, Path(base_dir), ctx, check_paths)
    return cfg


def parse_config(path: str | Path, check_paths: bool = True, overrides: dict | None = None) -> ExperimentConfig:
    """Read, validate and resolve a YAML experiment config.

    ``overrides`` is a nested mapping laid over the file's contents before
    validation, e.g. ``{"federation": {"seed": 3}}``.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e.strerror}") from None
    return parse_config_text(text, str(path), path.resolve().parent, check_paths, overrides)


def resolved_yaml(cfg: ExperimentConfig) -> str:
    """Every field made explicit; parsing this text reproduces ``cfg``."""
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)
