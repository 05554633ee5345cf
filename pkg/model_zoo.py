import copy
import json
import logging
from pathlib import Path
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
from pydantic import BaseModel
from torch import Tensor

from errors import (
    ArgumentError,
    ShapeError,
    SpecValidationError,
    UnknownArchitectureError,
)
from nn_utils import GradientReversal, get_n_trainable_parameters

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]


class LayerSpec(BaseModel):
    kind: str  # conv, maxpool or dense
    channels: int = 0  # output channels (conv/maxpool) or units (dense)
    filter_size: int = 0
    stride: int = 1
    activation: str = "none"  # relu, softmax or none

    @classmethod
    def conv(cls, channels: int, filter_size: int = 3, stride: int = 1):
        return cls(
            kind="conv",
            channels=channels,
            filter_size=filter_size,
            stride=stride,
            activation="relu",
        )

    @classmethod
    def maxpool(cls, channels: int, filter_size: int = 2, stride: int = 2):
        return cls(kind="maxpool", channels=channels, filter_size=filter_size, stride=stride)

    @classmethod
    def dense(cls, units: int, activation: str = "relu"):
        return cls(kind="dense", channels=units, activation=activation)


class ArchitectureSpec(BaseModel):
    name: str
    layers: List[LayerSpec]
    input_shape: Tuple[int, int, int]  # (H, W, C)
    num_classes: int
    split_index: int  # first layer of G_y

    def output_shapes(self) -> List[Shape]:
        """Walks the layers and returns each layer's output shape.

        Conv layers use "same" padding, so only the stride shrinks the map.
        Spatial shapes are (H, W, C), dense outputs are (units,).
        """
        self.check_structure()
        shapes = []
        shape: Shape = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                if len(shape) != 3:
                    raise SpecValidationError(f"layer {i}: conv after dense layer")
                if layer.filter_size < 1 or layer.filter_size % 2 == 0:
                    raise SpecValidationError(f"layer {i}: conv filter size must be odd")
                h, w, _ = shape
                shape = (
                    -(-h // layer.stride),
                    -(-w // layer.stride),
                    layer.channels,
                )
            elif layer.kind == "maxpool":
                if len(shape) != 3:
                    raise SpecValidationError(f"layer {i}: maxpool after dense layer")
                h, w, c = shape
                if layer.channels != c:
                    raise SpecValidationError(
                        f"layer {i}: maxpool declares {layer.channels} channels, input has {c}"
                    )
                shape = (
                    (h - layer.filter_size) // layer.stride + 1,
                    (w - layer.filter_size) // layer.stride + 1,
                    c,
                )
            elif layer.kind == "dense":
                shape = (layer.channels,)
            else:
                raise SpecValidationError(f"layer {i}: unknown kind {layer.kind}")
            if any(d < 1 for d in shape):
                raise SpecValidationError(f"layer {i}: empty output shape {shape}")
            shapes.append(shape)
        return shapes

    def check_structure(self):
        if not self.layers:
            raise SpecValidationError("architecture has no layers")
        last = self.layers[-1]
        if last.kind != "dense" or last.activation != "softmax":
            raise SpecValidationError("last layer must be dense with softmax activation")
        if last.channels != self.num_classes:
            raise SpecValidationError(
                f"last layer has {last.channels} units, expected {self.num_classes}"
            )
        if not 0 < self.split_index < len(self.layers):
            raise SpecValidationError(
                f"split_index {self.split_index} outside (0, {len(self.layers)})"
            )
        for i, layer in enumerate(self.layers):
            if layer.activation not in ("relu", "softmax", "none"):
                raise SpecValidationError(f"layer {i}: unknown activation {layer.activation}")
            if layer.channels < 1:
                raise SpecValidationError(f"layer {i}: channels/units must be >= 1")

    def validate_shapes(self):
        shapes = self.output_shapes()
        if shapes[-1] != (self.num_classes,):
            raise SpecValidationError(f"final shape {shapes[-1]} != ({self.num_classes},)")
        return self

    def feature_dim(self) -> int:
        shape = self.output_shapes()[self.split_index - 1]
        dim = 1
        for d in shape:
            dim *= d
        return dim

    def n_parameters(self) -> int:
        """Trainable parameters of G_e + G_y by layer arithmetic."""
        total = 0
        shape: Shape = tuple(self.input_shape)
        for layer, out in zip(self.layers, self.output_shapes()):
            if layer.kind == "conv":
                c_in = shape[-1]
                total += layer.filter_size ** 2 * c_in * layer.channels + layer.channels
            elif layer.kind == "dense":
                d_in = 1
                for d in shape:
                    d_in *= d
                total += d_in * layer.channels + layer.channels
            shape = out
        return total

    def with_num_classes(self, num_classes: int):
        spec = self.copy(deep=True)
        spec.layers[-1].channels = num_classes
        spec.num_classes = num_classes
        return spec

    def save(self, path: str):
        Path(path).parent.mkdir(exist_ok=True, parents=True)
        with open(path, "w") as f:
            f.write(self.json(indent=2) + "\n")

    @classmethod
    def load(cls, path: str):
        with open(path) as f:
            return cls(**json.load(f)).validate_shapes()


def _spec(name, layers, input_shape, num_classes) -> ArchitectureSpec:
    spec = ArchitectureSpec(
        name=name,
        layers=layers,
        input_shape=input_shape,
        num_classes=num_classes,
        split_index=len(layers) - 1,
    )
    return spec.validate_shapes()


def build_spec(dataset_name: str, num_classes: Optional[int] = None) -> ArchitectureSpec:
    """Returns the reference architecture of a dataset.

    G_y is the final classification layer, everything before it is G_e.
    """
    conv, pool, dense = LayerSpec.conv, LayerSpec.maxpool, LayerSpec.dense
    name = dataset_name.lower()
    if name == "mnist":
        layers = [
            conv(32),
            pool(32),
            conv(32),
            pool(32),
            dense(120),
            dense(num_classes or 10, "softmax"),
        ]
        return _spec(name, layers, (28, 28, 1), num_classes or 10)
    if name == "gtsrb":
        layers = [
            conv(32),
            conv(32),
            pool(32),
            conv(64),
            conv(64),
            pool(64),
            conv(128),
            conv(128),
            pool(128),
            dense(512),
            dense(num_classes or 43, "softmax"),
        ]
        return _spec(name, layers, (32, 32, 3), num_classes or 43)
    if name == "pubfig":
        layers = []
        for channels, n_conv in [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)]:
            layers.extend(conv(channels) for _ in range(n_conv))
            layers.append(pool(channels))
        layers.extend(
            [dense(4096), dense(4096), dense(num_classes or 83, "softmax")]
        )
        return _spec(name, layers, (224, 224, 3), num_classes or 83)
    raise UnknownArchitectureError(f"no architecture for dataset {dataset_name!r}")


def build_layers(
    layers: List[LayerSpec], in_shape: Shape, drop_final_activation: bool = True
) -> nn.Sequential:
    modules = []
    shape = in_shape
    for i, layer in enumerate(layers):
        if layer.kind == "conv":
            modules.append(
                nn.Conv2d(
                    shape[-1],
                    layer.channels,
                    kernel_size=layer.filter_size,
                    stride=layer.stride,
                    padding=layer.filter_size // 2,
                )
            )
            h, w, _ = shape
            shape = (-(-h // layer.stride), -(-w // layer.stride), layer.channels)
        elif layer.kind == "maxpool":
            modules.append(nn.MaxPool2d(layer.filter_size, layer.stride))
            h, w, c = shape
            shape = (
                (h - layer.filter_size) // layer.stride + 1,
                (w - layer.filter_size) // layer.stride + 1,
                c,
            )
        elif layer.kind == "dense":
            if len(shape) == 3:
                modules.append(nn.Flatten())
            d_in = 1
            for d in shape:
                d_in *= d
            modules.append(nn.Linear(d_in, layer.channels))
            shape = (layer.channels,)

        if layer.activation == "relu":
            modules.append(nn.ReLU())
        # softmax lives in forward_logits so the module emits logits
    return nn.Sequential(*modules)


class ModelHandles(nn.Module):
    """Feature extractor g_e, deployed head g_y and training-only head g_d."""

    def __init__(
        self,
        spec: ArchitectureSpec,
        seed: int = 0,
        with_auxiliary: bool = True,
        grl_lambda: float = 1.0,
    ):
        super().__init__()
        spec.validate_shapes()
        self.spec = spec
        self.seed = seed
        shapes = spec.output_shapes()
        feature_shape = shapes[spec.split_index - 1]

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.g_e = build_layers(spec.layers[: spec.split_index], tuple(spec.input_shape))
            self.g_y = build_layers(spec.layers[spec.split_index :], feature_shape)
            self.g_d = None
            if with_auxiliary:
                self.g_d = build_layers(spec.layers[spec.split_index :], feature_shape)
        self.grl = GradientReversal(grl_lambda) if with_auxiliary else None

    @property
    def grl_lambda(self) -> Optional[float]:
        return None if self.grl is None else self.grl.grl_lambda

    @grl_lambda.setter
    def grl_lambda(self, value: float):
        if self.grl is None:
            raise ArgumentError("model has no gradient reversal layer")
        self.grl.grl_lambda = value

    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device

    def check_input(self, images: Tensor):
        h, w, c = self.spec.input_shape
        if images.dim() != 4 or tuple(images.shape[1:]) != (c, h, w):
            raise ShapeError(
                f"expected images of shape [N, {c}, {h}, {w}], got {tuple(images.shape)}"
            )

    def features(self, images: Tensor) -> Tensor:
        self.check_input(images)
        return self.g_e(images)

    def logits(self, images: Tensor, branch: str = "y") -> Tensor:
        e = self.features(images)
        if branch == "y":
            return self.g_y(e)
        if branch == "d":
            if self.g_d is None:
                raise ArgumentError("model has no auxiliary branch g_d")
            return self.g_d(self.grl(e))
        raise ArgumentError(f"unknown branch {branch!r}")

    def forward(self, images: Tensor) -> Tensor:
        return self.logits(images, "y")

    def strip_auxiliary(self):
        """Deep copy without g_d and the gradient reversal layer."""
        stripped = copy.deepcopy(self)
        stripped.g_d = None
        stripped.grl = None
        return stripped

    def freeze(self):
        frozen = copy.deepcopy(self)
        for param in frozen.parameters():
            param.requires_grad = False
        return frozen.eval()

    def parameter_groups(self) -> dict:
        groups = dict(theta_e=list(self.g_e.parameters()), theta_y=list(self.g_y.parameters()))
        if self.g_d is not None:
            groups["theta_d"] = list(self.g_d.parameters())
        return groups


def instantiate(
    spec: ArchitectureSpec, seed: int, with_auxiliary: bool = True, grl_lambda: float = 1.0
) -> ModelHandles:
    """Builds g_e, g_y and a structurally identical, independently initialized g_d.

    Parameters use PyTorch's fan-in scaled uniform init drawn from `seed`.
    """
    handles = ModelHandles(spec, seed, with_auxiliary=with_auxiliary, grl_lambda=grl_lambda)
    logger.info(
        str(
            dict(
                arch=spec.name,
                seed=seed,
                feature_dim=spec.feature_dim(),
                trainable=get_n_trainable_parameters(handles),
            )
        )
    )
    return handles


def forward_features(handles: ModelHandles, images: Tensor) -> Tensor:
    return handles.features(images)


def forward_logits(handles: ModelHandles, branch: str, images: Tensor):
    """Returns logits Z and softmax probabilities P of branch y or d."""
    logits = handles.logits(images, branch)
    return logits, torch.softmax(logits, dim=-1)


def replace_dense_layers(handles: ModelHandles, num_classes: int, seed: int) -> ModelHandles:
    """Keeps every conv layer and re-initializes all dense layers for a new class count."""
    spec = handles.spec.with_num_classes(num_classes)
    new = ModelHandles(spec, seed, with_auxiliary=False)
    for old_m, new_m in zip(handles.g_e, new.g_e):
        if isinstance(old_m, nn.Conv2d):
            new_m.load_state_dict(old_m.state_dict())
    return new.to(handles.device)
