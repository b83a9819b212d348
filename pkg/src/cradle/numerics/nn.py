"""Multilayer perceptrons and the Adam optimizer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

_ACTIVATIONS = {"relu": ad.relu, "softplus": ad.softplus}
_TRANSFORMS = {
    "identity": lambda t: t,
    "softplus": ad.softplus,
    "softmax": lambda t: ad.softmax(t, axis=-1),
}


@dataclass(frozen=True)
class MlpSpec:
    """Layer layout of a feed-forward network.

    ``widths`` starts with the input width and lists every hidden width
    after it, so ``MlpSpec((d,))`` has no hidden layers.  Each head is an
    affine map from the last trunk layer followed by ``transform``.  With no
    heads the trunk output is returned under the key ``"out"``.
    """

    widths: tuple
    activation: str = "relu"
    heads: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.widths) < 1:
            raise ValueError("MlpSpec needs at least an input width")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for name, width, transform in self.heads:
            if transform not in _TRANSFORMS:
                raise ValueError(f"head {name!r}: unknown transform {transform!r}")
            if transform == "softmax" and width < 2:
                raise ValueError(f"head {name!r}: softmax needs width >= 2")

    @property
    def input_width(self):
        return self.widths[0]


def init_mlp(spec, prefix, rng, dtype=np.float64):
    """Uniform fan-in initialisation, bound ``1/sqrt(fan_in)`` for weights and biases."""
    params = {}

    def layer(name, fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        params[f"{name}.w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
        params[f"{name}.b"] = rng.uniform(-bound, bound, size=(fan_out,)).astype(dtype)

    for i in range(len(spec.widths) - 1):
        layer(f"{prefix}.h{i}", spec.widths[i], spec.widths[i + 1])
    for name, width, _ in spec.heads:
        layer(f"{prefix}.{name}", spec.widths[-1], width)
    return params


def mlp_forward(spec, params, prefix, x):
    """Run the network; returns ``{head_name: tensor}``.

    ``params`` maps names to tensors (or arrays).  Leading axes of ``x``
    beyond the last are treated as batch axes.
    """
    if x.shape[-1] != spec.input_width:
        raise ValueError(f"{prefix}: input width {x.shape[-1]} != expected {spec.input_width}")
    act = _ACTIVATIONS[spec.activation]
    h = x
    for i in range(len(spec.widths) - 1):
        h = act(ad.matmul(h, params[f"{prefix}.h{i}.w"]) + params[f"{prefix}.h{i}.b"])
    if not spec.heads:
        return {"out": h}
    out = {}
    for name, _, transform in spec.heads:
        z = ad.matmul(h, params[f"{prefix}.{name}.w"]) + params[f"{prefix}.{name}.b"]
        out[name] = _TRANSFORMS[transform](z)
    return out


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 100.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def clip_by_global_norm(grads, clip_norm):
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if np.isfinite(clip_norm) and total > clip_norm:
        scale = clip_norm / total
        return {k: g * scale for k, g in grads.items()}, total
    return grads, total


def adam_step(params, grads, state):
    """Clip to global L2 norm, then a bias-corrected Adam update.

    Returns ``(new_params, state)``; ``params`` is left untouched, the
    state's moments and step count are advanced in place.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    grads, _ = clip_by_global_norm(grads, state.clip_norm)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    new = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new[name] = p
            continue
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = (b1 * m + (1.0 - b1) * g).astype(p.dtype, copy=False)
        v = (b2 * v + (1.0 - b2) * (g * g)).astype(p.dtype, copy=False)
        state.m[name], state.v[name] = m, v
        # keep the parameter's precision even when gradients arrive in float64
        new[name] = (p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return new, state
