"""Run a configured experiment and write its artifacts.

Output directory layout::

    config.resolved.yaml   every setting, reloadable with parse_config
    partition.json         the device assignment plan
    metrics.csv            one row per round (deterministic under the seeds)
    gradnorms.csv          median input-gradient norms per loss kind (optional)
    timing.csv             wall-clock seconds per round (not deterministic)
    checkpoints/           global.ckpt, generator.ckpt, device-<k>.ckpt

Every file is written to a temporary name and renamed into place.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write_bytes, save_checkpoint
from .config import ExperimentConfig, resolved_yaml
from .data import (
    LabeledDataset,
    PartitionPlan,
    load_idx_dataset,
    make_noise_dataset,
    make_partition,
    make_synthetic_dataset,
    shrink_images,
)
from .federation import RoundMetrics, RunResult, run_fedmd_baseline, run_fedzkt
from .losses import LOSS_KINDS
from .zoo import GeneratorSpec

log = logging.getLogger(__name__)

LOCK_NAME = ".lock"


class ExperimentError(RuntimeError):
    pass


class OutputLock:
    """Exclusive lock file guarding an output directory."""

    def __init__(self, out_dir: str | Path):
        self.path = Path(out_dir) / LOCK_NAME

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ExperimentError(f"{self.path.parent} is locked by another run (remove {self.path} if stale)") from None
        with os.fdopen(fd, "w") as f:
            f.write(f"{os.getpid()}\n")
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _atomic_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(x: float) -> str:
    return repr(float(x))


# Data -----------------------------------------------------------------------

def load_datasets(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Training set, test set and the pool the FedMD public set is drawn from."""
    ds = cfg.dataset
    rng = np.random.default_rng(ds.subset_seed)
    if ds.source == "idx":
        train = load_idx_dataset(ds.train_images, ds.train_labels)
        test = load_idx_dataset(ds.test_images, ds.test_labels, train.classes)
        order = rng.permutation(len(train))
        n = len(train) if ds.train_limit is None else min(ds.train_limit, len(train))
        pool = train.subset(np.sort(order[n:])) if n < len(train) else train
        train = train.subset(np.sort(order[:n]))
        if ds.test_limit is not None and ds.test_limit < len(test):
            test = test.subset(np.sort(rng.permutation(len(test))[: ds.test_limit]))
    else:
        shape = tuple(ds.image_shape)
        seed = ds.subset_seed
        train = make_synthetic_dataset(ds.classes, ds.per_class, shape, seed, ds.noise)
        test = make_synthetic_dataset(ds.classes, ds.test_per_class, shape, seed + 1, ds.noise)
        pool = make_synthetic_dataset(ds.classes, ds.per_class, shape, seed + 2, ds.noise)
        if ds.train_limit is not None and ds.train_limit < len(train):
            train = train.subset(np.arange(ds.train_limit))
        if ds.test_limit is not None and ds.test_limit < len(test):
            test = test.subset(np.arange(ds.test_limit))
    if ds.crop or ds.pool > 1:
        train, test, pool = (shrink_images(d, ds.crop, ds.pool) for d in (train, test, pool))
    return train, test, pool


def build_partition(cfg: ExperimentConfig, train: LabeledDataset) -> PartitionPlan:
    p = cfg.partition
    params = {}
    if p.scheme == "quantity":
        params["classes_per_device"] = p.classes_per_device
    elif p.scheme == "dirichlet":
        params.update(beta=p.beta, min_per_device=p.min_per_device)
    return make_partition(train, cfg.federation.num_devices, p.scheme, cfg.partition_seed, **params)


def public_dataset(cfg: ExperimentConfig, train: LabeledDataset, pool: LabeledDataset) -> LabeledDataset:
    n = cfg.federation.public_size
    if cfg.fedmd.public == "noise":
        return make_noise_dataset(n, train.image_shape, train.classes, cfg.federation.seed)
    return pool if len(pool) <= n else pool.subset(np.arange(n))


# Metrics files ----------------------------------------------------------------

def metrics_header(num_devices: int) -> list[str]:
    return (
        ["round", "mean_device_accuracy", "global_accuracy"]
        + [f"device_{k}_accuracy" for k in range(num_devices)]
        + ["loss_local", "loss_generator", "loss_server", "loss_distill", "active_devices"]
    )


def metrics_row(m: RoundMetrics) -> list[str]:
    return (
        [str(m.round), _num(m.mean_device_accuracy), _num(m.global_accuracy)]
        + [_num(a) for a in m.device_accuracy]
        + [_num(m.loss_local), _num(m.loss_generator), _num(m.loss_server), _num(m.loss_distill)]
        + [";".join(map(str, m.active_devices))]
    )


def write_metrics(out: Path, history: list[RoundMetrics], num_devices: int, gradnorms: bool) -> None:
    _atomic_text(out / "metrics.csv", _csv_text(metrics_header(num_devices), [metrics_row(m) for m in history]))
    _atomic_text(out / "timing.csv", _csv_text(["round", "seconds"], [[m.round, f"{m.seconds:.3f}"] for m in history]))
    if gradnorms:
        rows = [[m.round] + [_num(m.gradnorms[k]) for k in LOSS_KINDS] for m in history if m.gradnorms]
        _atomic_text(out / "gradnorms.csv", _csv_text(["round"] + [f"median_gradnorm_{k}" for k in LOSS_KINDS], rows))


def write_checkpoints(out: Path, result: RunResult) -> None:
    ckpt = out / "checkpoints"
    if result.server is not None:
        save_checkpoint(result.server.global_model, ckpt / "global.ckpt", role="global")
        save_checkpoint(result.server.generator, ckpt / "generator.ckpt", role="generator")
    for d in result.devices:
        save_checkpoint(d.model, ckpt / f"device-{d.id}.ckpt", role=f"device-{d.id}")


# Driver -------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Run ``cfg`` and write its artifacts; raises ExperimentError on failure."""
    out = Path(cfg.out_dir)
    with OutputLock(out):
        try:
            _atomic_text(out / "config.resolved.yaml", resolved_yaml(cfg))
            train, test, pool = load_datasets(cfg)
            plan = build_partition(cfg, train)
            _atomic_text(out / "partition.json", plan.to_json() + "\n")
            fed = cfg.federation
            history: list[RoundMetrics] = []

            def on_round(m: RoundMetrics) -> None:
                history.append(m)
                write_metrics(out, history, fed.num_devices, cfg.diagnostics.gradnorms and cfg.algorithm == "fedzkt")

            log.info("%s: %s on %d training samples, K=%d, T=%d", cfg.name, cfg.algorithm, len(train),
                     fed.num_devices, fed.rounds)
            if cfg.algorithm == "fedzkt":
                spec = GeneratorSpec(train.image_shape, cfg.generator.latent_dim, tuple(cfg.generator.hidden_channels))
                result = run_fedzkt(
                    fed, train, test, plan, cfg.models, cfg.global_model, spec,
                    gradnorm_batch=cfg.diagnostics.gradnorm_batch if cfg.diagnostics.gradnorms else None,
                    on_round=on_round,
                )
            else:
                result = run_fedmd_baseline(fed, train, test, plan, cfg.models, public_dataset(cfg, train, pool),
                                            on_round=on_round)
            if cfg.checkpoints:
                write_checkpoints(out, result)
        except ExperimentError:
            raise
        except Exception as e:
            raise ExperimentError(f"experiment {cfg.name!r} failed: {e}") from e
    return result


def write_partition(cfg: ExperimentConfig, path: str | Path) -> PartitionPlan:
    train, _, _ = load_datasets(cfg)
    plan = build_partition(cfg, train)
    _atomic_text(Path(path), plan.to_json() + "\n")
    return plan


# Plot data -----------------------------------------------------------------------

def emit_plot_data(metrics_dir: str | Path, out_path: str | Path) -> int:
    """Gather every metrics.csv (and gradnorms.csv) below ``metrics_dir`` into long format.

    Rows are ``experiment, round, series, value``; the experiment is the run
    directory relative to ``metrics_dir``. Returns the number of data rows.
    """
    root = Path(metrics_dir)
    files = sorted(root.rglob("metrics.csv"))
    if not files:
        raise ExperimentError(f"no metrics.csv found under {root}")
    rows, bad = [], []
    for f in files:
        name = f.parent.relative_to(root).as_posix() or root.name
        sources = [f] + ([f.parent / "gradnorms.csv"] if (f.parent / "gradnorms.csv").exists() else [])
        for src in sources:
            try:
                with open(src, newline="") as fh:
                    reader = csv.DictReader(fh)
                    if not reader.fieldnames or reader.fieldnames[0] != "round":
                        raise ValueError("missing 'round' header")
                    series = [c for c in reader.fieldnames[1:] if c != "active_devices"]
                    for rec in reader:
                        r = int(rec["round"])
                        for s in series:
                            v = float(rec[s])
                            if not math.isnan(v):
                                rows.append([name, r, s, rec[s]])
            except (ValueError, KeyError, TypeError) as e:
                bad.append(f"{src}: {e}")
    if bad:
        raise ExperimentError("corrupt metrics files:\n  " + "\n  ".join(bad))
    _atomic_text(Path(out_path), _csv_text(["experiment", "round", "series", "value"], rows))
    return len(rows)
