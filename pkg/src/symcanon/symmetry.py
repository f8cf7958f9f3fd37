"""Permutation + neuron-scaling symmetries of feed-forward networks.

A layer transform relocates hidden neurons and rescales them: as a matrix A,
A[i, perm[i]] = scale[i], so (A v)[i] = scale[i] * v[perm[i]].  Applying a
network transform rewrites W_l -> A_l W_l A_{l-1}^{-1} and b_l -> A_l b_l
with identity transforms pinned at the input and output, which leaves the
network's function unchanged when the scales commute with the activation:
signs for sine/tanh (odd), positive factors for relu (homogeneous).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .nets import DenseLayer, FormatError, Network

Array = np.ndarray


class ScaleDomain(str, Enum):
    IDENTITY = "identity"
    SIGN_FLIP = "sign_flip"
    POSITIVE = "positive"


# activations whose symmetries each scale domain respects
_COMPATIBLE = {
    ScaleDomain.IDENTITY: ("sine", "tanh", "relu", "identity"),
    ScaleDomain.SIGN_FLIP: ("sine", "tanh"),
    ScaleDomain.POSITIVE: ("relu",),
}


@dataclass
class LayerTransform:
    perm: Array   # perm[i] = source slot moved to position i
    scale: Array  # scale[i] multiplies the relocated neuron

    def __post_init__(self):
        self.perm = np.asarray(self.perm, dtype=np.int64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        n = self.perm.size
        if self.scale.size != n:
            raise ValueError(f"perm has {n} entries, scale has {self.scale.size}")
        if sorted(self.perm.tolist()) != list(range(n)):
            raise ValueError(f"perm {self.perm.tolist()} is not a bijection")

    @property
    def width(self) -> int:
        return self.perm.size

    def matrix(self) -> Array:
        m = np.zeros((self.width, self.width))
        m[np.arange(self.width), self.perm] = self.scale
        return m

    def is_identity(self) -> bool:
        return bool(np.all(self.perm == np.arange(self.width))
                    and np.all(self.scale == 1.0))


@dataclass
class NetworkTransform:
    layers: list[LayerTransform]
    domain: ScaleDomain

    def __post_init__(self):
        self.domain = ScaleDomain(self.domain)
        for k, t in enumerate(self.layers):
            _check_scale_domain(t.scale, self.domain, f"layers[{k}]")


def _check_scale_domain(scale: Array, domain: ScaleDomain, where: str):
    if domain == ScaleDomain.IDENTITY:
        ok = np.all(scale == 1.0)
    elif domain == ScaleDomain.SIGN_FLIP:
        ok = np.all(np.abs(scale) == 1.0)
    else:
        ok = np.all(scale > 0.0)
    if not ok:
        raise ValueError(f"{where}: scales {scale.tolist()} not in domain "
                         f"{domain.value}")


def identity_transform(net: Network, domain: ScaleDomain = ScaleDomain.IDENTITY
                       ) -> NetworkTransform:
    widths = net.arch.sizes[1:-1]
    return NetworkTransform(
        [LayerTransform(np.arange(w), np.ones(w)) for w in widths], domain)


def _check_compat(transform: NetworkTransform, net: Network):
    widths = net.arch.sizes[1:-1]
    if len(transform.layers) != len(widths):
        raise ValueError(
            f"transform covers {len(transform.layers)} hidden layers, "
            f"network has {len(widths)}")
    for k, (t, w) in enumerate(zip(transform.layers, widths)):
        if t.width != w:
            raise ValueError(f"layers[{k}]: width {t.width} != hidden width {w}")
    kind = net.hidden_activation.kind
    if kind not in _COMPATIBLE[transform.domain]:
        raise ValueError(
            f"domain {transform.domain.value} is not a symmetry of "
            f"{kind} activations")


def apply(transform: NetworkTransform, net: Network) -> Network:
    """Act on the weights; the transformed network computes the same function."""
    _check_compat(transform, net)
    new_layers = []
    n_layers = len(net.layers)
    for k, layer in enumerate(net.layers):
        w = layer.weight
        b = layer.bias
        if k < n_layers - 1:
            t_out = transform.layers[k]
            w = w[t_out.perm] * t_out.scale[:, None]
            b = b[t_out.perm] * t_out.scale
        if k > 0:
            t_in = transform.layers[k - 1]
            # right-multiply by the inverse: undo the previous layer's
            # relocation and scaling on the input side
            w = w[:, t_in.perm] / t_in.scale[None, :]
        new_layers.append(DenseLayer(w, b))
    return Network(new_layers, net.hidden_activation)


def sample(net: Network, domain: ScaleDomain, seed: int,
           include_perm: bool = True, include_scale: bool = True
           ) -> NetworkTransform:
    """Uniform random group element: uniform permutations, uniform signs,
    log-uniform positive scales on [1/4, 4]."""
    rng = np.random.default_rng(seed)
    layers = []
    for w in net.arch.sizes[1:-1]:
        perm = rng.permutation(w) if include_perm else np.arange(w)
        if not include_scale or domain == ScaleDomain.IDENTITY:
            scale = np.ones(w)
        elif domain == ScaleDomain.SIGN_FLIP:
            scale = rng.integers(0, 2, size=w) * 2.0 - 1.0
        else:
            scale = np.exp(rng.uniform(np.log(0.25), np.log(4.0), size=w))
        layers.append(LayerTransform(perm, scale))
    return NetworkTransform(layers, domain)


def compose(g: NetworkTransform, h: NetworkTransform) -> NetworkTransform:
    """Group product: apply(compose(g, h), net) == apply(g, apply(h, net))."""
    if g.domain != h.domain:
        raise ValueError(f"domains differ: {g.domain.value} vs {h.domain.value}")
    if len(g.layers) != len(h.layers):
        raise ValueError("transforms cover different numbers of hidden layers")
    layers = []
    for tg, th in zip(g.layers, h.layers):
        if tg.width != th.width:
            raise ValueError(f"widths differ: {tg.width} vs {th.width}")
        perm = th.perm[tg.perm]
        scale = tg.scale * th.scale[tg.perm]
        layers.append(LayerTransform(perm, scale))
    return NetworkTransform(layers, g.domain)


def invert(g: NetworkTransform) -> NetworkTransform:
    layers = []
    for t in g.layers:
        inv_perm = np.empty_like(t.perm)
        inv_perm[t.perm] = np.arange(t.width)
        inv_scale = np.empty_like(t.scale)
        inv_scale[t.perm] = 1.0 / t.scale
        layers.append(LayerTransform(inv_perm, inv_scale))
    return NetworkTransform(layers, g.domain)


def perturb(net: Network, sigma: float, seed: int) -> Network:
    """Gaussian weight noise, per-layer std = sigma * std(layer weights)."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    layers = []
    for layer in net.layers:
        std = float(layer.weight.std())
        w = layer.weight + rng.normal(size=layer.weight.shape) * (sigma * std)
        b = layer.bias + rng.normal(size=layer.bias.shape) * (sigma * std)
        layers.append(DenseLayer(w, b))
    return Network(layers, net.hidden_activation)


# --- serialization --------------------------------------------------------

def transform_to_dict(t: NetworkTransform) -> dict:
    return {
        "domain": t.domain.value,
        "layers": [{"perm": lt.perm.tolist(), "scale": lt.scale.tolist()}
                   for lt in t.layers],
    }


def transform_from_dict(obj: dict) -> NetworkTransform:
    if not isinstance(obj, dict):
        raise FormatError("$: transform must be a JSON object")
    try:
        domain = ScaleDomain(obj.get("domain"))
    except ValueError:
        raise FormatError(f"domain: unknown domain {obj.get('domain')!r}")
    layers_obj = obj.get("layers")
    if not isinstance(layers_obj, list):
        raise FormatError("layers: must be a list")
    layers = []
    for k, lo in enumerate(layers_obj):
        if not isinstance(lo, dict) or "perm" not in lo or "scale" not in lo:
            raise FormatError(f"layers[{k}]: needs perm and scale")
        try:
            layers.append(LayerTransform(np.asarray(lo["perm"]),
                                         np.asarray(lo["scale"])))
        except ValueError as e:
            raise FormatError(f"layers[{k}]: {e}")
    try:
        return NetworkTransform(layers, domain)
    except ValueError as e:
        raise FormatError(str(e))


def save_transform(t: NetworkTransform, path, meta: dict | None = None):
    obj = transform_to_dict(t)
    if meta is not None:
        obj["meta"] = meta
    with open(path, "w") as fh:
        json.dump(obj, fh)
        fh.write("\n")


def load_transform(path) -> NetworkTransform:
    with open(path) as fh:
        return transform_from_dict(json.load(fh))
