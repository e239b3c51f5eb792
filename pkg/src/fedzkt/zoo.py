"""Heterogeneous desk-scale classifiers and the image generator."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np

from .nn import (
    LayerSpec,
    NeuralNet,
    ShapeError,
    batchnorm2d,
    conv2d,
    dense,
    flatten,
    maxpool2d,
    relu,
    reshape,
    tanh,
    upsample2d,
)

Shape = tuple[int, int, int]


def _conv_stack(shape: Shape, channels: list[int], kernel: int) -> tuple[list[LayerSpec], int]:
    """conv-relu-pool blocks; returns the layers and the flattened output width."""
    c, h, w = shape
    layers: list[LayerSpec] = []
    for out in channels:
        layers += [conv2d(c, out, kernel), relu(), maxpool2d(2)]
        c, h, w = out, h // 2, w // 2
    return layers, c * h * w


def _mlp_small(shape: Shape, classes: int) -> list[LayerSpec]:
    n = int(np.prod(shape))
    return [flatten(), dense(n, 32), relu(), dense(32, classes)]


def _cnn_a(shape: Shape, classes: int) -> list[LayerSpec]:
    layers, n = _conv_stack(shape, [6], 3)
    return layers + [flatten(), dense(n, classes)]


def _lenet_lite(shape: Shape, classes: int) -> list[LayerSpec]:
    layers, n = _conv_stack(shape, [4, 8], 5)
    return layers + [flatten(), dense(n, 32), relu(), dense(32, classes)]


def _cnn_wide(shape: Shape, classes: int) -> list[LayerSpec]:
    layers, n = _conv_stack(shape, [8, 16], 3)
    return layers + [flatten(), dense(n, classes)]


def _cnn_deep(shape: Shape, classes: int) -> list[LayerSpec]:
    layers, n = _conv_stack(shape, [4, 8, 16], 3)
    return layers + [flatten(), dense(n, classes)]


@dataclass(frozen=True)
class ModelCatalogEntry:
    name: str
    builder: Callable[[Shape, int], list[LayerSpec]]
    description: str

    @cached_property
    def nominal_params(self) -> int:
        """Parameter count on 1x28x28 inputs with 10 classes."""
        return NeuralNet((1, 28, 28), self.builder((1, 28, 28), 10)).n_params


CATALOG: dict[str, ModelCatalogEntry] = {
    e.name: e
    for e in (
        ModelCatalogEntry("mlp-small", _mlp_small, "one hidden dense layer of 32 units"),
        ModelCatalogEntry("cnn-a", _cnn_a, "one 3x3 conv (6 ch) + dense"),
        ModelCatalogEntry("lenet-lite", _lenet_lite, "two 5x5 convs (4, 8 ch) + two dense"),
        ModelCatalogEntry("cnn-wide", _cnn_wide, "two 3x3 convs (8, 16 ch) + dense"),
        ModelCatalogEntry("cnn-deep", _cnn_deep, "three 3x3 convs (4, 8, 16 ch) + dense"),
    )
}


def build_classifier(name: str, input_shape: Shape, classes: int, seed: int | np.random.Generator) -> NeuralNet:
    if name not in CATALOG:
        raise KeyError(f"unknown model {name!r}; catalog: {', '.join(CATALOG)}")
    input_shape = tuple(int(s) for s in input_shape)
    net = NeuralNet(input_shape, CATALOG[name].builder(input_shape, classes))
    return net.glorot_init(seed)


@dataclass(frozen=True)
class GeneratorSpec:
    output_shape: Shape = (1, 28, 28)
    latent_dim: int = 100
    hidden_channels: tuple[int, int] = (16, 8)

    def layers(self) -> list[LayerSpec]:
        c, h, w = self.output_shape
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if h % 4 or w % 4:
            raise ShapeError(f"generator output {self.output_shape}: height and width must be multiples of 4")
        c0, c1 = self.hidden_channels
        h0, w0 = h // 4, w // 4
        return [
            dense(self.latent_dim, c0 * h0 * w0),
            reshape(c0, h0, w0),
            batchnorm2d(c0),
            relu(),
            upsample2d(2),
            conv2d(c0, c1, 3),
            batchnorm2d(c1),
            relu(),
            upsample2d(2),
            conv2d(c1, c, 3),
            tanh(),
        ]


def build_generator(spec: GeneratorSpec, seed: int | np.random.Generator) -> NeuralNet:
    """Noise ``[B, latent_dim]`` to images ``[B, C, H, W]`` in [-1, 1]."""
    net = NeuralNet((spec.latent_dim,), spec.layers())
    if net.output_shape != tuple(spec.output_shape):
        raise ShapeError(f"generator produces {net.output_shape}, dataset needs {spec.output_shape}")
    return net.glorot_init(seed)


def sample_latent(batch: int, latent_dim: int, rng: np.random.Generator) -> np.ndarray:
    if batch < 1 or latent_dim < 1:
        raise ValueError("batch and latent_dim must be >= 1")
    return rng.standard_normal((batch, latent_dim))
