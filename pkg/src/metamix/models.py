"""MLP backbones with a functional forward pass.

Parameters live in an ordered ``dict`` (a *param set*) so the same
architecture can be run under the initial weights or under adapted weights
produced by an inner loop, without any module state.
"""

from __future__ import annotations

import math
import re
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Node

ParamSet = dict  # ordered mapping name -> np.ndarray (or Node)


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) != d or d < 1 for d in dims):
            raise ArchitectureError(f"layer widths must be positive integers, got {dims}")
        if self.output_dim < 2:
            raise ArchitectureError(f"output_dim must be >= 2, got {self.output_dim}")
        if self.activation != "relu":
            raise ArchitectureError(f"unsupported activation {self.activation!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def num_layers(self) -> int:
        return len(self.hidden_dims) + 1

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        dims = self.dims
        for i in range(self.num_layers):
            shapes[f"layer{i}.weight"] = (dims[i], dims[i + 1])
            shapes[f"layer{i}.bias"] = (dims[i + 1],)
        return shapes

    def num_params(self) -> int:
        return sum(math.prod(s) for s in self.param_shapes().values())

    def with_output_dim(self, output_dim: int) -> MlpArchitecture:
        return MlpArchitecture(self.input_dim, self.hidden_dims, output_dim, self.activation)

    def serialize(self) -> str:
        """``"16-64-64-5:relu"``; inverse of :meth:`parse`."""
        return "-".join(str(d) for d in self.dims) + f":{self.activation}"

    @classmethod
    def parse(cls, text: str) -> MlpArchitecture:
        m = re.fullmatch(r"\s*(\d+(?:-\d+)+)(?::(\w+))?\s*", text)
        if not m:
            raise ArchitectureError(f"cannot parse architecture {text!r}")
        dims = [int(d) for d in m.group(1).split("-")]
        return cls(dims[0], tuple(dims[1:-1]), dims[-1], m.group(2) or "relu")


@dataclass(frozen=True)
class FrozenSplit:
    """Partition of parameter names into a frozen feature extractor and a trainable head."""

    frozen: tuple[str, ...]
    trainable: tuple[str, ...]

    def __post_init__(self):
        if set(self.frozen) & set(self.trainable):
            raise ValueError(f"frozen and trainable overlap: {sorted(set(self.frozen) & set(self.trainable))}")

    def check_covers(self, params: Mapping[str, Any]) -> None:
        if set(self.frozen) | set(self.trainable) != set(params):
            raise ValueError("frozen split does not cover the parameter set exactly")


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(arch: MlpArchitecture, seed: int) -> ParamSet:
    """Glorot-uniform weights, zero biases; bit-identical for identical seeds."""
    rng = np.random.default_rng(seed)
    params: ParamSet = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".weight"):
            bound = glorot_bound(*shape)
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            arr = np.zeros(shape)
        arr.flags.writeable = False
        params[name] = arr
    return params


def forward(arch: MlpArchitecture, params: Mapping[str, Any], x: Any) -> Node:
    """Logits ``[batch, output_dim]``; differentiable in both ``x`` and ``params``."""
    h = ad.constant(x)
    if len(h.shape) != 2 or h.shape[1] != arch.input_dim:
        raise ArchitectureError(f"layer0: expected input of shape [batch, {arch.input_dim}], got {h.shape}")
    expected = arch.param_shapes()
    for i in range(arch.num_layers):
        w_name, b_name = f"layer{i}.weight", f"layer{i}.bias"
        try:
            w, b = ad.constant(params[w_name]), ad.constant(params[b_name])
        except KeyError as exc:
            raise ArchitectureError(f"layer{i}: missing parameter {exc.args[0]!r}") from None
        if w.shape != expected[w_name] or b.shape != expected[b_name]:
            raise ArchitectureError(
                f"layer{i}: expected weight {expected[w_name]} and bias {expected[b_name]}, "
                f"got {w.shape} and {b.shape}"
            )
        h = ad.add_bias(ad.matmul(h, w), b)
        if i < arch.num_layers - 1:
            h = ad.relu(h)
    return h


def cross_entropy(logits: Node, targets: Any, atol: float = 1e-9) -> Node:
    """Mean over rows of soft-label cross-entropy; one-hot targets are the usual case."""
    t = np.asarray(targets.value if isinstance(targets, Node) else targets, dtype=np.float64)
    if t.ndim != 2:
        raise ValueError(f"targets must be [batch, classes], got shape {t.shape}")
    if np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1.0) > atol):
        raise ValueError("each target row must be a probability vector")
    return ad.softmax_cross_entropy(logits, targets)


def predict(arch: MlpArchitecture, params: Mapping[str, Any], x: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return forward(arch, params, x).value.argmax(axis=1)


def accuracy(arch: MlpArchitecture, params: Mapping[str, Any], x: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax logit matches ``labels`` (class indices)."""
    return float(np.mean(predict(arch, params, x) == labels))
