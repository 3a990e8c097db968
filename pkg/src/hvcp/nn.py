"""Tiny MLPs, a named parameter store and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "softplus": ad.softplus,
    "logistic": ad.logistic,
    "identity": lambda x: x,
}


class WidthError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths including input and output, e.g. ``(3, 64, 32)``."""

    widths: tuple[int, ...]
    activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise WidthError("an MLP needs at least one affine layer")
        if min(self.widths) < 1:
            raise WidthError(f"widths must be >= 1, got {self.widths}")
        for act in (self.activation, self.output_activation):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


@dataclass
class ParamStore:
    """Named parameters plus per-parameter Adam moments and a step counter."""

    params: dict[str, Tensor] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        return t

    def set(self, name: str, value) -> None:
        """Replace a parameter's value (same shape), e.g. in tests."""
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.params[name].shape:
            raise ad.ShapeError(f"set {name}", self.params[name].shape, value.shape)
        self.params[name] = Tensor(value, requires_grad=True)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def count(self, prefix: str = "") -> int:
        return sum(self.params[n].size for n in self.names(prefix))

    def grads_by_name(self, grads: Mapping[int, np.ndarray]) -> dict[str, np.ndarray]:
        """Translate a node-id gradient map into parameter names."""
        out = {}
        for name, t in self.params.items():
            g = grads.get(t.node_id)
            if g is not None:
                out[name] = g
        return out

    def copy(self) -> "ParamStore":
        return ParamStore(
            {n: Tensor(t.data, requires_grad=True) for n, t in self.params.items()},
            {n: a.copy() for n, a in self.m.items()},
            {n: a.copy() for n, a in self.v.items()},
            self.step,
        )


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(spec: MlpSpec, rng: np.random.Generator, store: ParamStore, prefix: str) -> None:
    """Glorot-uniform weights and zero biases, named ``{prefix}.{layer}.w/b``."""
    for k, (fi, fo) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        bound = glorot_bound(fi, fo)
        store.add(f"{prefix}.{k}.w", rng.uniform(-bound, bound, size=(fi, fo)))
        store.add(f"{prefix}.{k}.b", np.zeros(fo))


def linear(params: ParamStore, prefix: str, x: Tensor) -> Tensor:
    w = params[f"{prefix}.w"]
    if x.shape[-1] != w.shape[0]:
        raise WidthError(f"{prefix}: input width {x.shape[-1]} != {w.shape[0]}")
    if x.ndim == 1:
        return ad.add(ad.reshape(ad.matmul(ad.reshape(x, (1, -1)), w), (-1,)), params[f"{prefix}.b"])
    return ad.add(ad.matmul(x, w), params[f"{prefix}.b"])


def mlp_forward(spec: MlpSpec, params: ParamStore, prefix: str, x) -> Tensor:
    x = ad.as_tensor(x)
    if x.shape[-1] != spec.widths[0]:
        raise WidthError(f"{prefix}: input width {x.shape[-1]} != {spec.widths[0]}")
    act = ACTIVATIONS[spec.activation]
    for k in range(spec.n_layers):
        x = linear(params, f"{prefix}.{k}", x)
        if k < spec.n_layers - 1:
            x = act(x)
    return ACTIVATIONS[spec.output_activation](x)


def zero_layer(params: ParamStore, prefix: str) -> None:
    """Zero one affine layer's weight and bias in place."""
    for suffix in ("w", "b"):
        name = f"{prefix}.{suffix}"
        params.set(name, np.zeros(params[name].shape))


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ParamStore, grads: Mapping[str, np.ndarray], lr: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; parameters without a gradient keep their moments."""
    for name, g in grads.items():
        if name not in params.params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name in sorted(grads):
        g = np.asarray(grads[name], dtype=np.float64)
        p = params.params[name]
        m = params.m.get(name)
        if m is None:
            m = np.zeros(p.shape)
            params.v[name] = np.zeros(p.shape)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * params.v[name] + (1.0 - beta2) * g * g
        params.m[name] = m
        params.v[name] = v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        params.params[name] = Tensor(p.data - update, requires_grad=True)
