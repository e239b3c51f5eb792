"""The FedZKT protocol, straggler sampling, evaluation and a FedMD baseline.

One FedZKT round:

1. the server samples the active devices;
2. every active device runs ``local_epochs`` of SGD on its own data
   (cross-entropy plus an l2 pull towards the parameters it last received);
3. uploaded parameters replace the server's shadow copies of those devices;
4. the server alternates generator ascent / global-model descent on the
   student-ensemble disagreement, then distils the global model back into
   every shadow with KL on generated inputs;
5. active devices download their shadow's parameters.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import losses
from .data import LabeledDataset, PartitionPlan
from .nn import NeuralNet
from .optim import OptimizerState, adam_step, lr_schedule, sgd_step
from .zoo import GeneratorSpec, build_classifier, build_generator, sample_latent

log = logging.getLogger(__name__)


@dataclass
class FederationConfig:
    rounds: int = 50
    local_epochs: int = 5
    distill_iterations: int = 200
    n_generator: int | None = None  # defaults to distill_iterations
    n_server: int | None = None  # defaults to distill_iterations
    num_devices: int = 10
    active_fraction: float = 1.0
    loss_kind: str = "sl"
    prox_coefficient: float = 1.0
    lr_device: float = 0.01
    lr_generator: float = 0.001
    lr_server: float = 0.01
    lr_decay: float = 0.3
    lr_schedule_scope: str = "update"  # "update": decay within each server update; "run": across all rounds
    weight_decay: float = 0.0005
    device_batch_size: int = 256
    server_batch_size: int = 256
    seed: int = 0
    # FedMD baseline only
    public_size: int = 1000
    distill_epochs: int = 1

    def __post_init__(self):
        if self.n_generator is None:
            self.n_generator = self.distill_iterations
        if self.n_server is None:
            self.n_server = self.distill_iterations
        for name in ("rounds", "local_epochs", "distill_iterations", "n_generator", "n_server", "num_devices",
                     "device_batch_size", "server_batch_size", "public_size", "distill_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 < self.active_fraction <= 1:
            raise ValueError("active_fraction must satisfy 0 < p <= 1")
        if self.lr_schedule_scope not in ("update", "run"):
            raise ValueError("lr_schedule_scope must be 'update' or 'run'")
        if self.loss_kind not in losses.LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {losses.LOSS_KINDS}")
        for name in ("lr_device", "lr_generator", "lr_server", "lr_decay"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.prox_coefficient < 0 or self.weight_decay < 0:
            raise ValueError("prox_coefficient and weight_decay must be non-negative")


@dataclass(eq=False)
class DeviceState:
    id: int
    model: NeuralNet
    anchor_params: np.ndarray
    local_data: np.ndarray
    optimizer: OptimizerState
    rng: np.random.Generator

    def __post_init__(self):
        if self.anchor_params.shape != self.model.params.shape:
            raise ValueError(f"device {self.id}: anchor length differs from model params")


@dataclass(eq=False)
class ServerState:
    global_model: NeuralNet
    generator: NeuralNet
    shadows: list[NeuralNet]
    generator_opt: OptimizerState
    global_opt: OptimizerState
    shadow_opts: list[OptimizerState]
    rng: np.random.Generator
    diag_rng: np.random.Generator


@dataclass
class ServerReport:
    generator_losses: list[float] = field(default_factory=list)  # L_G per generator step
    server_losses: list[float] = field(default_factory=list)  # L_S per global step
    distill_losses: list[float] = field(default_factory=list)  # mean over devices of L_k per step
    gradnorms: dict[str, float] | None = None


@dataclass
class RoundMetrics:
    round: int
    device_accuracy: list[float]
    global_accuracy: float
    loss_local: float
    loss_generator: float
    loss_server: float
    loss_distill: float
    active_devices: list[int]
    gradnorms: dict[str, float] | None = None
    seconds: float = 0.0

    @property
    def mean_device_accuracy(self) -> float:
        return float(np.mean(self.device_accuracy))


def _mean(xs: Sequence[float]) -> float:
    return float(np.mean(xs)) if len(xs) else float("nan")


# Building blocks ----------------------------------------------------------------

def ensemble_predict(models: Sequence[NeuralNet], x: np.ndarray) -> np.ndarray:
    """Average of the models' softmax outputs."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    return sum(losses.softmax(m.forward(x)) for m in models) / len(models)


def evaluate(model: NeuralNet, ds: LabeledDataset, batch_size: int = 1000) -> float:
    """Top-1 accuracy in eval mode."""
    correct = 0
    for s in range(0, len(ds), batch_size):
        logits = model.forward(ds.images[s : s + batch_size])
        correct += int((logits.argmax(axis=1) == ds.labels[s : s + batch_size]).sum())
    return correct / len(ds)


def evaluate_ensemble(models: Sequence[NeuralNet], ds: LabeledDataset, batch_size: int = 1000) -> float:
    correct = 0
    for s in range(0, len(ds), batch_size):
        probs = ensemble_predict(models, ds.images[s : s + batch_size])
        correct += int((probs.argmax(axis=1) == ds.labels[s : s + batch_size]).sum())
    return correct / len(ds)


def sample_active_devices(num_devices: int, fraction: float, rng: np.random.Generator) -> list[int]:
    """Uniform subset of round(p*K) devices (at least one), sorted."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must satisfy 0 < p <= 1")
    n = max(1, int(np.floor(fraction * num_devices + 0.5)))
    return sorted(int(k) for k in rng.choice(num_devices, size=n, replace=False))


def device_update(
    dev: DeviceState,
    ds: LabeledDataset,
    local_epochs: int,
    prox_coefficient: float,
    batch_size: int = 256,
) -> list[float]:
    """Local SGD on cross-entropy + prox_coefficient * ||w - anchor||^2.

    The quadratic pull is applied as an exact proximal step after each SGD
    step on the cross-entropy, which keeps large coefficients stable.
    Mutates ``dev.model`` in place; returns the mean cross-entropy of each
    epoch.
    """
    if len(dev.local_data) == 0:
        raise ValueError(f"device {dev.id} has no local data")
    w = dev.model.params
    anchor = dev.anchor_params
    history = []
    for _ in range(local_epochs):
        order = dev.rng.permutation(dev.local_data)
        batch_losses, sizes = [], []
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            probs = losses.softmax(dev.model.forward(ds.images[idx], training=True))
            batch_losses.append(losses.cross_entropy(probs, ds.labels[idx]))
            sizes.append(len(idx))
            grads, _ = dev.model.backward(losses.cross_entropy_logit_grad(probs, ds.labels[idx]), input_grad=False)
            lr = dev.optimizer.learning_rate
            sgd_step(dev.optimizer, w, grads)
            if prox_coefficient:
                pull = 2.0 * lr * prox_coefficient
                w += pull * anchor
                w /= 1.0 + pull
        history.append(float(np.average(batch_losses, weights=sizes)))
    return history


def _gradnorm_diagnostic(server: ServerState, batch: int) -> dict[str, float]:
    z = sample_latent(batch, server.generator.input_shape[0], server.diag_rng)
    x = server.generator.forward(z, training=True)
    return {
        kind: float(np.median(losses.per_sample_input_gradient_norms(kind, server.global_model, server.shadows, x)))
        for kind in losses.LOSS_KINDS
    }


def server_update(
    server: ServerState,
    uploads: dict[int, np.ndarray],
    cfg: FederationConfig,
    gradnorm_batch: int | None = None,
    round_index: int = 0,
) -> ServerReport:
    """Install uploads, then run both distillation phases in place.

    Phase 1 alternates a generator step (Adam, ascending the disagreement)
    and a global-model step (SGD, descending it) with fresh latents each.
    Phase 2 keeps the generator fixed and moves every shadow towards the
    global model with KL. ``gradnorm_batch`` adds median input-gradient
    norms for every loss kind, measured between the phases.
    ``round_index`` (0-based) only matters for the "run" schedule scope.
    """
    for k, params in uploads.items():
        if params.shape != server.shadows[k].params.shape:
            raise ValueError(
                f"device {k}: uploaded {params.size} params, shadow architecture has {server.shadows[k].params.size}"
            )
        server.shadows[k].params[:] = params

    G, F, shadows = server.generator, server.global_model, server.shadows
    latent_dim = G.input_shape[0]
    batch = cfg.server_batch_size
    report = ServerReport()

    def scheduled(base: float, n: int, total: int) -> float:
        if cfg.lr_schedule_scope == "run":
            return lr_schedule(base, round_index * total + n, cfg.rounds * total, cfg.lr_decay)
        return lr_schedule(base, n, total, cfg.lr_decay)

    for n in range(cfg.n_generator):
        # generator: maximise the disagreement
        x = G.forward(sample_latent(batch, latent_dim, server.rng), training=True)
        u = F.forward(x, training=True)
        vs = [m.forward(x, training=True) for m in shadows]
        value, du, dvs = losses.disagreement(cfg.loss_kind, u, vs)
        _, dx = F.backward(du, param_grads=False)
        for m, dv in zip(shadows, dvs):
            dx += m.backward(dv, param_grads=False)[1]
        dtheta, _ = G.backward(-dx, input_grad=False)
        adam_step(server.generator_opt, G.params, dtheta, scheduled(cfg.lr_generator, n, cfg.n_generator))
        report.generator_losses.append(-value)

        # global model: minimise it on a fresh batch
        x = G.forward(sample_latent(batch, latent_dim, server.rng), training=True)
        u = F.forward(x, training=True)
        vs = [m.forward(x) for m in shadows]
        value, du, _ = losses.disagreement(cfg.loss_kind, u, vs)
        dw, _ = F.backward(du, input_grad=False)
        sgd_step(server.global_opt, F.params, dw, scheduled(cfg.lr_server, n, cfg.n_generator))
        report.server_losses.append(value)

    # the generator is frozen from here on, batchnorm running stats included
    frozen = G.buffers.copy()
    if gradnorm_batch:
        report.gradnorms = _gradnorm_diagnostic(server, gradnorm_batch)

    for n in range(cfg.n_server):
        lr = scheduled(cfg.lr_server, n, cfg.n_server)
        x = G.forward(sample_latent(batch, latent_dim, server.rng), training=True)
        target = losses.softmax(F.forward(x))
        step_losses = []
        for m, opt in zip(shadows, server.shadow_opts):
            v = losses.softmax(m.forward(x, training=True))
            step_losses.append(losses.kl_loss(target, v))
            _, dv = losses.kl_loss_grad(target, v)
            dw, _ = m.backward(losses.softmax_backward(v, dv), input_grad=False)
            sgd_step(opt, m.params, dw, lr)
        report.distill_losses.append(float(np.mean(step_losses)))
    G.buffers[:] = frozen
    return report


# Setup ----------------------------------------------------------------------

def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def init_devices(
    cfg: FederationConfig,
    ds_train: LabeledDataset,
    plan: PartitionPlan,
    model_names: Sequence[str],
) -> list[DeviceState]:
    k = cfg.num_devices
    if len(model_names) != k or plan.num_devices != k:
        raise ValueError(f"num_devices={k} but {len(model_names)} model names and {plan.num_devices} partitions")
    init_rngs = _streams(cfg.seed * 1000 + 1, k)
    train_rngs = _streams(cfg.seed * 1000 + 2, k)
    devices = []
    for i, name in enumerate(model_names):
        model = build_classifier(name, ds_train.image_shape, ds_train.classes, init_rngs[i])
        devices.append(
            DeviceState(
                id=i,
                model=model,
                anchor_params=model.params.copy(),
                local_data=np.asarray(plan.assignments[i], dtype=np.int64),
                optimizer=OptimizerState.sgd(cfg.lr_device, cfg.weight_decay),
                rng=train_rngs[i],
            )
        )
    return devices


def init_server(
    cfg: FederationConfig,
    devices: Sequence[DeviceState],
    image_shape: tuple[int, int, int],
    classes: int,
    global_model: str,
    generator_spec: GeneratorSpec | None = None,
) -> ServerState:
    rng_global, rng_gen, rng_server, rng_diag = _streams(cfg.seed * 1000 + 3, 4)
    spec = generator_spec or GeneratorSpec(output_shape=image_shape)
    if tuple(spec.output_shape) != tuple(image_shape):
        raise ValueError(f"generator output {spec.output_shape} differs from data shape {image_shape}")
    G = build_generator(spec, rng_gen)
    F = build_classifier(global_model, image_shape, classes, rng_global)
    return ServerState(
        global_model=F,
        generator=G,
        shadows=[d.model.copy() for d in devices],
        generator_opt=OptimizerState.adam(G.n_params, cfg.lr_generator),
        global_opt=OptimizerState.sgd(cfg.lr_server, cfg.weight_decay),
        shadow_opts=[OptimizerState.sgd(cfg.lr_server, cfg.weight_decay) for _ in devices],
        rng=rng_server,
        diag_rng=rng_diag,
    )


# Drivers -------------------------------------------------------------------

@dataclass
class RunResult:
    metrics: list[RoundMetrics]
    devices: list[DeviceState]
    server: ServerState | None = None


def run_fedzkt(
    cfg: FederationConfig,
    ds_train: LabeledDataset,
    ds_test: LabeledDataset,
    plan: PartitionPlan,
    model_names: Sequence[str],
    global_model: str = "cnn-wide",
    generator_spec: GeneratorSpec | None = None,
    gradnorm_batch: int | None = None,
    on_round: Callable[[RoundMetrics], None] | None = None,
) -> RunResult:
    """Run ``cfg.rounds`` FedZKT rounds; every model starts Glorot-initialized."""
    devices = init_devices(cfg, ds_train, plan, model_names)
    server = init_server(cfg, devices, ds_train.image_shape, ds_train.classes, global_model, generator_spec)
    (sample_rng,) = _streams(cfg.seed * 1000 + 4, 1)
    history = []
    for t in range(1, cfg.rounds + 1):
        start = time.perf_counter()
        try:
            active = sample_active_devices(cfg.num_devices, cfg.active_fraction, sample_rng)
            local = []
            for k in active:
                local.append(device_update(devices[k], ds_train, cfg.local_epochs, cfg.prox_coefficient,
                                           cfg.device_batch_size)[-1])
            uploads = {k: devices[k].model.params.copy() for k in active}
            report = server_update(server, uploads, cfg, gradnorm_batch, t - 1)
            for k in active:
                dev = devices[k]
                dev.model.params[:] = server.shadows[k].params
                dev.model.buffers[:] = server.shadows[k].buffers
                dev.anchor_params = dev.model.params.copy()
            metrics = RoundMetrics(
                round=t,
                device_accuracy=[evaluate(d.model, ds_test) for d in devices],
                global_accuracy=evaluate(server.global_model, ds_test),
                loss_local=_mean(local),
                loss_generator=_mean(report.generator_losses),
                loss_server=_mean(report.server_losses),
                loss_distill=_mean(report.distill_losses),
                active_devices=active,
                gradnorms=report.gradnorms,
                seconds=time.perf_counter() - start,
            )
        except Exception as e:
            raise RuntimeError(f"FedZKT round {t} failed: {e}") from e
        log.info("round %d: mean device acc %.4f, global acc %.4f (%.1fs)", t, metrics.mean_device_accuracy,
                 metrics.global_accuracy, metrics.seconds)
        history.append(metrics)
        if on_round:
            on_round(metrics)
    return RunResult(history, devices, server)


def run_fedmd_baseline(
    cfg: FederationConfig,
    ds_train: LabeledDataset,
    ds_test: LabeledDataset,
    plan: PartitionPlan,
    model_names: Sequence[str],
    public_ds: LabeledDataset,
    on_round: Callable[[RoundMetrics], None] | None = None,
) -> RunResult:
    """Simplified FedMD: local training, then consensus distillation on a fixed public batch.

    ``global_accuracy`` in the emitted metrics is the accuracy of the
    devices' softmax ensemble.
    """
    if public_ds.image_shape != ds_train.image_shape:
        raise ValueError(f"public images {public_ds.image_shape} differ from device inputs {ds_train.image_shape}")
    devices = init_devices(cfg, ds_train, plan, model_names)
    sample_rng, public_rng = _streams(cfg.seed * 1000 + 4, 2)
    pick = public_rng.permutation(len(public_ds))[: cfg.public_size]
    public_x = public_ds.images[np.sort(pick)]
    history = []
    for t in range(1, cfg.rounds + 1):
        start = time.perf_counter()
        active = sample_active_devices(cfg.num_devices, cfg.active_fraction, sample_rng)
        local = [device_update(devices[k], ds_train, cfg.local_epochs, 0.0, cfg.device_batch_size)[-1] for k in active]
        consensus = ensemble_predict([devices[k].model for k in active], public_x)
        distill = []
        for k in active:
            dev = devices[k]
            for _ in range(cfg.distill_epochs):
                order = dev.rng.permutation(len(public_x))
                for s in range(0, len(order), cfg.device_batch_size):
                    idx = order[s : s + cfg.device_batch_size]
                    v = losses.softmax(dev.model.forward(public_x[idx], training=True))
                    distill.append(losses.kl_loss(consensus[idx], v))
                    _, dv = losses.kl_loss_grad(consensus[idx], v)
                    dw, _ = dev.model.backward(losses.softmax_backward(v, dv), input_grad=False)
                    sgd_step(dev.optimizer, dev.model.params, dw)
        models = [d.model for d in devices]
        metrics = RoundMetrics(
            round=t,
            device_accuracy=[evaluate(m, ds_test) for m in models],
            global_accuracy=evaluate_ensemble(models, ds_test),
            loss_local=_mean(local),
            loss_generator=float("nan"),
            loss_server=float("nan"),
            loss_distill=_mean(distill),
            active_devices=active,
            seconds=time.perf_counter() - start,
        )
        log.info("fedmd round %d: mean device acc %.4f", t, metrics.mean_device_accuracy)
        history.append(metrics)
        if on_round:
            on_round(metrics)
    return RunResult(history, devices)
