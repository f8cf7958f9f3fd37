"""Dense feed-forward networks, INR fitting, checkpoints, and toy datasets.

Networks are lists of (out x in) weight matrices with biases, a shared hidden
activation, and an identity output layer.  INRs map normalized (y, x) pixel
coordinates to intensities; classifiers map feature vectors to logits.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import AdamState, Array, Tape, adam_step, backward

ACTIVATION_KINDS = ("sine", "tanh", "relu", "identity")


class FormatError(ValueError):
    """A serialized artifact is malformed; message carries the field path."""


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass(frozen=True)
class Activation:
    kind: str
    omega: float = 30.0  # only used by sine

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS:
            raise ValueError(f"unknown activation kind {self.kind!r}")
        if self.kind == "sine" and not self.omega > 0:
            raise ValueError("sine activation needs omega > 0")


@dataclass(frozen=True)
class Arch:
    """Layer sizes (inputs, hidden..., outputs) plus the hidden activation."""

    sizes: tuple[int, ...]
    activation: Activation

    def __post_init__(self):
        if len(self.sizes) < 2 or any(s < 1 for s in self.sizes):
            raise ValueError(f"bad architecture sizes {self.sizes}")

    @property
    def n_params(self) -> int:
        return sum(o * i + o for i, o in zip(self.sizes, self.sizes[1:]))

    @classmethod
    def parse(cls, text: str, activation: Activation) -> "Arch":
        try:
            sizes = tuple(int(tok) for tok in text.split("-"))
        except ValueError:
            raise ValueError(f"cannot parse architecture string {text!r}")
        return cls(sizes, activation)


@dataclass
class DenseLayer:
    weight: Array  # (out, in)
    bias: Array    # (out,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.ndim != 1 \
                or self.bias.shape[0] != self.weight.shape[0]:
            raise ValueError(
                f"layer shapes disagree: weight {self.weight.shape}, "
                f"bias {self.bias.shape}")


@dataclass
class Network:
    layers: list[DenseLayer]
    hidden_activation: Activation

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for k in range(1, len(self.layers)):
            a, b = self.layers[k - 1], self.layers[k]
            if b.weight.shape[1] != a.weight.shape[0]:
                raise ValueError(
                    f"layer {k} expects {b.weight.shape[1]} inputs, "
                    f"layer {k - 1} provides {a.weight.shape[0]}")

    @property
    def arch(self) -> Arch:
        sizes = (self.layers[0].weight.shape[1],) + tuple(
            l.weight.shape[0] for l in self.layers)
        return Arch(sizes, self.hidden_activation)

    def copy(self) -> "Network":
        return Network([DenseLayer(l.weight.copy(), l.bias.copy())
                        for l in self.layers], self.hidden_activation)


@dataclass
class Image:
    height: int
    width: int
    pixels: Array  # flat, row-major, values in [0, 1]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1)
        if self.pixels.size != self.height * self.width:
            raise ValueError(
                f"{self.pixels.size} pixels for {self.height}x{self.width} image")


def _activate(kind: str, omega: float, z: Array) -> Array:
    if kind == "sine":
        return np.sin(omega * z)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def forward(net: Network, inputs: Array) -> Array:
    """Batched evaluation: inputs (n, d_in) -> outputs (n, d_out)."""
    x = np.asarray(inputs, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != net.arch.sizes[0]:
        raise ValueError(
            f"expected {net.arch.sizes[0]} input features, got {x.shape[1]}")
    act = net.hidden_activation
    for layer in net.layers[:-1]:
        x = _activate(act.kind, act.omega, x @ layer.weight.T + layer.bias)
    last = net.layers[-1]
    x = x @ last.weight.T + last.bias
    return x[0] if squeeze else x


def coord_grid(height: int, width: int) -> Array:
    """Row-major (y, x) coordinates spanning [-1, 1] on each axis.

    An axis with a single pixel maps to coordinate 0.
    """
    if height < 1 or width < 1:
        raise ValueError("grid needs at least one pixel per axis")
    ys = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    xs = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([yy.reshape(-1), xx.reshape(-1)], axis=1)


def render_inr(net: Network, height: int, width: int) -> Image:
    if net.arch.sizes[0] != 2 or net.arch.sizes[-1] != 1:
        raise ValueError("INR rendering expects a 2-in / 1-out network")
    out = forward(net, coord_grid(height, width))
    return Image(height, width, out.reshape(-1))


# --- flat parameter vectors ---------------------------------------------

def flatten(net: Network) -> Array:
    """Concatenate per layer: weight rows (row-major), then bias."""
    parts = []
    for layer in net.layers:
        parts.append(layer.weight.reshape(-1))
        parts.append(layer.bias)
    return np.concatenate(parts)


def unflatten(vec: Array, arch: Arch) -> Network:
    vec = np.asarray(vec, dtype=np.float64).reshape(-1)
    if vec.size != arch.n_params:
        raise ValueError(f"expected {arch.n_params} parameters, got {vec.size}")
    layers = []
    ofs = 0
    for fan_in, fan_out in zip(arch.sizes, arch.sizes[1:]):
        w = vec[ofs:ofs + fan_out * fan_in].reshape(fan_out, fan_in)
        ofs += fan_out * fan_in
        b = vec[ofs:ofs + fan_out]
        ofs += fan_out
        layers.append(DenseLayer(w.copy(), b.copy()))
    return Network(layers, arch.activation)


# --- checkpoints ----------------------------------------------------------

def _f32(x: float) -> float:
    return float(np.float32(x))


def network_to_dict(net: Network) -> dict:
    act: dict = {"kind": net.hidden_activation.kind}
    if net.hidden_activation.kind == "sine":
        act["omega"] = _f32(net.hidden_activation.omega)
    return {
        "version": 1,
        "activation": act,
        "layers": [
            {
                "in": int(l.weight.shape[1]),
                "out": int(l.weight.shape[0]),
                "w": [_f32(v) for v in l.weight.reshape(-1)],
                "b": [_f32(v) for v in l.bias],
            }
            for l in net.layers
        ],
    }


def _expect(cond: bool, path: str, why: str):
    if not cond:
        raise FormatError(f"{path}: {why}")


def network_from_dict(obj: dict) -> Network:
    _expect(isinstance(obj, dict), "$", "checkpoint must be a JSON object")
    _expect(obj.get("version") == 1, "version",
            f"unsupported version {obj.get('version')!r}")
    act = obj.get("activation")
    _expect(isinstance(act, dict) and "kind" in act, "activation",
            "missing activation kind")
    kind = act["kind"]
    _expect(kind in ACTIVATION_KINDS, "activation.kind", f"unknown kind {kind!r}")
    omega = act.get("omega", 30.0)
    _expect(isinstance(omega, (int, float)) and omega > 0 if kind == "sine" else True,
            "activation.omega", "sine omega must be positive")
    layers_obj = obj.get("layers")
    _expect(isinstance(layers_obj, list) and layers_obj, "layers",
            "must be a non-empty list")
    layers = []
    prev_out = None
    for k, lo in enumerate(layers_obj):
        path = f"layers[{k}]"
        _expect(isinstance(lo, dict), path, "must be an object")
        for key in ("in", "out", "w", "b"):
            _expect(key in lo, f"{path}.{key}", "missing")
        n_in, n_out = lo["in"], lo["out"]
        _expect(isinstance(n_in, int) and n_in >= 1, f"{path}.in", "bad width")
        _expect(isinstance(n_out, int) and n_out >= 1, f"{path}.out", "bad width")
        _expect(prev_out is None or n_in == prev_out, f"{path}.in",
                f"width {n_in} does not match previous layer output {prev_out}")
        w, b = lo["w"], lo["b"]
        _expect(isinstance(w, list) and len(w) == n_in * n_out, f"{path}.w",
                f"expected {n_in * n_out} weights, got "
                f"{len(w) if isinstance(w, list) else type(w).__name__}")
        _expect(isinstance(b, list) and len(b) == n_out, f"{path}.b",
                f"expected {n_out} biases, got "
                f"{len(b) if isinstance(b, list) else type(b).__name__}")
        for name, vals in (("w", w), ("b", b)):
            for j, v in enumerate(vals):
                _expect(isinstance(v, (int, float)), f"{path}.{name}[{j}]",
                        "not a number")
        weight = np.array(w, dtype=np.float32).astype(np.float64).reshape(n_out, n_in)
        bias = np.array(b, dtype=np.float32).astype(np.float64)
        layers.append(DenseLayer(weight, bias))
        prev_out = n_out
    activation = Activation(kind, float(omega)) if kind == "sine" else Activation(kind)
    return Network(layers, activation)


def save_checkpoint(net: Network, path, meta: dict | None = None):
    obj = network_to_dict(net)
    if meta is not None:
        obj["meta"] = meta
    with open(path, "w") as fh:
        json.dump(obj, fh)
        fh.write("\n")


def load_checkpoint(path) -> Network:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as e:
        raise FormatError(f"$: not valid JSON ({e})")
    return network_from_dict(obj)


def checkpoint_meta(path) -> dict | None:
    with open(path) as fh:
        obj = json.load(fh)
    return obj.get("meta") if isinstance(obj, dict) else None


# --- IDX images -----------------------------------------------------------

IDX_IMAGE_MAGIC = 0x00000803


def load_idx(path) -> list[Image]:
    """Read a big-endian IDX image file (the classic digit-corpus layout)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise FormatError("header: truncated (need 16 bytes)")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"header: bad magic 0x{magic:08x}")
    need = count * rows * cols
    body = raw[16:]
    if len(body) < need:
        raise FormatError(f"payload: expected {need} bytes, got {len(body)}")
    data = np.frombuffer(body[:need], dtype=np.uint8).astype(np.float64) / 255.0
    data = data.reshape(count, rows * cols)
    return [Image(rows, cols, data[i]) for i in range(count)]


# --- synthetic data -------------------------------------------------------

GLYPH_CLASSES = ("hbar", "vbar", "cross", "square", "diagonal")


def _draw_glyph(cls: int, size: int, rng: np.random.Generator) -> Array:
    img = np.zeros((size, size))
    jitter = max(1, size // 8)
    thick = int(rng.integers(1, max(2, size // 8) + 1))
    c = size // 2 + int(rng.integers(-jitter, jitter + 1))
    c = min(max(c, thick), size - thick)
    if cls == 0:      # horizontal bar
        img[c - thick // 2: c - thick // 2 + thick, :] = 1.0
    elif cls == 1:    # vertical bar
        img[:, c - thick // 2: c - thick // 2 + thick] = 1.0
    elif cls == 2:    # cross
        img[c - thick // 2: c - thick // 2 + thick, :] = 1.0
        img[:, c - thick // 2: c - thick // 2 + thick] = 1.0
    elif cls == 3:    # hollow square
        m = int(rng.integers(1, jitter + 1))
        img[m:size - m, m:size - m] = 1.0
        inner = m + thick
        if inner < size - inner:
            img[inner:size - inner, inner:size - inner] = 0.0
    else:             # diagonal stripe
        off = int(rng.integers(-jitter, jitter + 1))
        for d in range(-(thick // 2), thick - thick // 2):
            idx = np.arange(size)
            jdx = idx + off + d
            ok = (jdx >= 0) & (jdx < size)
            img[idx[ok], jdx[ok]] = 1.0
    return img.reshape(-1)


def synth_glyphs(n_per_class: int, size: int, seed: int) -> tuple[list[Image], list[int]]:
    """Jittered bar/cross/square/diagonal glyphs; returns (images, labels)."""
    if size < 8:
        raise ValueError("glyphs need size >= 8")
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for cls in range(len(GLYPH_CLASSES)):
        for _ in range(n_per_class):
            images.append(Image(size, size, _draw_glyph(cls, size, rng)))
            labels.append(cls)
    return images, labels


def synth_class_data(n: int, dim: int, n_classes: int, seed: int) -> tuple[Array, Array]:
    """Gaussian blobs around per-class means; returns (X, labels)."""
    rng = np.random.default_rng(seed)
    means = rng.normal(scale=2.0, size=(n_classes, dim))
    labels = rng.integers(0, n_classes, size=n)
    X = means[labels] + rng.normal(scale=0.7, size=(n, dim))
    return X, labels


# --- network initialization and INR training -----------------------------

def init_network(arch: Arch, seed: int) -> Network:
    """Random init: SIREN-style uniform for sine, Glorot uniform otherwise."""
    rng = np.random.default_rng(seed)
    layers = []
    n_layers = len(arch.sizes) - 1
    for k, (fan_in, fan_out) in enumerate(zip(arch.sizes, arch.sizes[1:])):
        if arch.activation.kind == "sine":
            if k == 0:
                bound = 1.0 / fan_in
            else:
                bound = np.sqrt(6.0 / fan_in) / arch.activation.omega
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        if k < n_layers - 1 and arch.activation.kind != "sine":
            b = rng.uniform(-0.1, 0.1, size=fan_out)
        else:
            b = np.zeros(fan_out)
        layers.append(DenseLayer(w, b))
    return Network(layers, arch.activation)


def forward_on_tape(tape: Tape, weight_vars, bias_vars, x_const,
                    activation: Activation):
    """Differentiable forward pass; weight/bias vars indexed per layer."""
    x = x_const
    n_layers = len(weight_vars)
    for k in range(n_layers):
        z = (x @ weight_vars[k].T) + bias_vars[k]
        if k == n_layers - 1:
            x = z
        elif activation.kind == "sine":
            x = z.scale(activation.omega).sin()
        elif activation.kind == "tanh":
            x = z.tanh()
        elif activation.kind == "relu":
            x = z.relu()
        else:
            x = z
    return x


def train_inr(image: Image, arch: Arch, steps: int, opt: AdamState | None = None,
              seed: int = 0) -> tuple[Network, list[float]]:
    """Fit an INR to one image by full-batch MSE on raw pixel values."""
    if arch.sizes[0] != 2 or arch.sizes[-1] != 1:
        raise ValueError("INR architecture must map 2 coordinates to 1 value")
    if opt is None:
        opt = AdamState(lr=1e-3)
    net = init_network(arch, seed)
    grid = coord_grid(image.height, image.width)
    target = image.pixels.reshape(-1, 1)
    params: dict[str, Array] = {}
    for k, layer in enumerate(net.layers):
        params[f"w{k}"] = layer.weight
        params[f"b{k}"] = layer.bias
    history: list[float] = []
    n_layers = len(net.layers)
    for step in range(steps):
        tape = Tape()
        wv = [tape.leaf(params[f"w{k}"]) for k in range(n_layers)]
        bv = [tape.leaf(params[f"b{k}"]) for k in range(n_layers)]
        xc = tape.constant(grid)
        pred = forward_on_tape(tape, wv, bv, xc, arch.activation)
        diff = pred - tape.constant(target)
        loss = (diff * diff).mean()
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise TrainingDiverged(step)
        history.append(loss_val)
        backward(tape, loss)
        grads = {}
        for k in range(n_layers):
            grads[f"w{k}"] = wv[k].grad
            grads[f"b{k}"] = bv[k].grad
        params = adam_step(opt, params, grads)
    layers = [DenseLayer(params[f"w{k}"], params[f"b{k}"]) for k in range(n_layers)]
    return Network(layers, arch.activation), history
