"""Canonicalization autoencoder: invariant encoder, MLP decoder.

``decode(encode(net))`` maps every network on a symmetry orbit to a single
representative, because the encoder is invariant to the orbit and the
decoder is a deterministic function of the latent code.  Training never
compares raw parameter vectors; the reconstruction target is functional —
rendered pixels for coordinate networks, tempered class probabilities for
classifiers — so the model is free to pick whichever representative of the
orbit it likes.
"""

from __future__ import annotations

import io
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .interp import BarrierCurve, LossFn
from .metagraph import GmnParams, GmnVariant, encode_on_tape, init_gmn
from .nets import (
    Activation,
    Arch,
    DenseLayer,
    FormatError,
    Network,
    TrainingDiverged,
    coord_grid,
    forward,
    forward_on_tape,
    render_inr,
    synth_class_data,
    unflatten,
)
from .tensor import AdamState, Array, NonFiniteError, Tape, Var, adam_step, backward

_DECODER_ACTIVATIONS = ("silu", "relu", "tanh")


@dataclass(frozen=True)
class AeConfig:
    """Hyperparameters for one autoencoder run.

    The defaults are sized for width-32 targets on a single CPU; the
    larger published-scale settings (hidden_dim 128, decoder (256, 512),
    4 iterations) remain reachable through these same fields.
    """

    variant: GmnVariant = GmnVariant.SCALE_SIGN
    hidden_dim: int = 32
    n_iterations: int = 2
    latent_dim: int = 32
    readout: str = "full_graph"
    decoder_hidden: tuple[int, ...] = (64, 128)
    decoder_activation: str = "silu"
    lr: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 1e-2
    temperature: float = 0.5
    epochs: int = 40
    batch_size: int = 32
    val_fraction: float = 0.1
    grid: tuple[int, int] = (16, 16)
    probe_size: int = 512
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", GmnVariant(self.variant))
        object.__setattr__(self, "decoder_hidden", tuple(int(w) for w in self.decoder_hidden))
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.epochs < 1 or self.batch_size < 1 or self.latent_dim < 1:
            raise ValueError("epochs, batch_size and latent_dim must be >= 1")
        if any(w < 1 for w in self.decoder_hidden):
            raise ValueError(f"decoder widths must be >= 1, got {self.decoder_hidden}")
        if self.decoder_activation not in _DECODER_ACTIVATIONS:
            raise ValueError(
                f"unknown decoder activation {self.decoder_activation!r}; "
                f"expected one of {_DECODER_ACTIVATIONS}")
        if len(self.grid) != 2 or any(g < 1 for g in self.grid):
            raise ValueError(f"grid must be two positive extents, got {self.grid}")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "hidden_dim": self.hidden_dim,
            "n_iterations": self.n_iterations,
            "latent_dim": self.latent_dim,
            "readout": self.readout,
            "decoder_hidden": list(self.decoder_hidden),
            "decoder_activation": self.decoder_activation,
            "lr": self.lr,
            "warmup_steps": self.warmup_steps,
            "weight_decay": self.weight_decay,
            "temperature": self.temperature,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "val_fraction": self.val_fraction,
            "grid": list(self.grid),
            "probe_size": self.probe_size,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AeConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise FormatError(f"unknown config keys: {sorted(extra)}")
        kwargs = dict(d)
        if "decoder_hidden" in kwargs:
            kwargs["decoder_hidden"] = tuple(kwargs["decoder_hidden"])
        if "grid" in kwargs:
            kwargs["grid"] = tuple(kwargs["grid"])
        return cls(**kwargs)


@dataclass
class AeModel:
    config: AeConfig
    encoder: GmnParams
    decoder: list[DenseLayer]
    target_arch: Arch

    def __post_init__(self):
        if self.decoder[0].weight.shape[1] != self.config.latent_dim:
            raise ValueError(
                f"decoder expects {self.decoder[0].weight.shape[1]}-dim input, "
                f"config says latent_dim={self.config.latent_dim}")
        if self.decoder[-1].weight.shape[0] != self.target_arch.n_params:
            raise ValueError(
                f"decoder emits {self.decoder[-1].weight.shape[0]} values, "
                f"target needs {self.target_arch.n_params}")

    def copy(self) -> "AeModel":
        dec = [DenseLayer(l.weight.copy(), l.bias.copy()) for l in self.decoder]
        return AeModel(self.config, self.encoder.copy(), dec, self.target_arch)


def init_ae(target_arch: Arch, config: AeConfig) -> AeModel:
    """Fresh model: seeded encoder plus a seeded decoder stack.

    The last decoder layer starts near zero so the first decoded networks
    are close to the zero function; sine targets are chaotic in their
    parameters and a small start keeps early gradients sane.
    """
    encoder = init_gmn(config.variant, hidden_dim=config.hidden_dim,
                       n_iterations=config.n_iterations, out_dim=config.latent_dim,
                       seed=config.seed, readout=config.readout)
    rng = np.random.default_rng(config.seed + 1)
    widths = (config.latent_dim, *config.decoder_hidden, target_arch.n_params)
    layers = []
    last = len(widths) - 2
    for k, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        scale = (0.01 if k == last else 1.0) / np.sqrt(fan_in)
        layers.append(DenseLayer(rng.normal(size=(fan_out, fan_in)) * scale,
                                 np.zeros(fan_out)))
    return AeModel(config, encoder, layers, target_arch)


# --- decoding ---------------------------------------------------------------

def _decoder_act(x: Var, kind: str) -> Var:
    if kind == "silu":
        return x.silu()
    if kind == "relu":
        return x.relu()
    return x.tanh()


def decode_on_tape(tape: Tape, dec_w: list[Var], dec_b: list[Var], z: Var,
                   config: AeConfig) -> Var:
    """Flat parameter vector of the decoded network, shape (n_params,)."""
    x = z.reshape((1, config.latent_dim))
    for k in range(len(dec_w)):
        x = (x @ dec_w[k].T) + dec_b[k]
        if k < len(dec_w) - 1:
            x = _decoder_act(x, config.decoder_activation)
    return x.reshape((x.shape[-1],))


def decode(z: Array, model: AeModel) -> Network:
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.size != model.config.latent_dim:
        raise ValueError(
            f"latent has {z.size} entries, model wants {model.config.latent_dim}")
    tape = Tape()
    dw = [tape.constant(l.weight) for l in model.decoder]
    db = [tape.constant(l.bias) for l in model.decoder]
    flat = decode_on_tape(tape, dw, db, tape.constant(z), model.config)
    return unflatten(flat.value, model.target_arch)


def encode_net(net: Network, model: AeModel) -> Array:
    tape = Tape()
    pv = {name: tape.constant(v) for name, v in model.encoder.tensors.items()}
    return encode_on_tape(tape, pv, net, model.encoder).value.copy()


def canonicalize(net: Network, model: AeModel) -> Network:
    """Orbit representative: decode(encode(net))."""
    return decode(encode_net(net, model), model)


# --- functional losses -------------------------------------------------------

def loss_inr(decoded: Network, source: Network, grid: tuple[int, int]) -> float:
    """Mean squared pixel error between the two renderings."""
    h, w = grid
    a = render_inr(decoded, h, w).pixels
    b = render_inr(source, h, w).pixels
    return float(np.mean((a - b) ** 2))


def _tempered_probs(net: Network, probe_x: Array, temperature: float) -> Array:
    logits = forward(net, probe_x) / temperature
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("classifier logits are not finite")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss_cls(decoded: Network, source: Network, probe_x: Array,
             temperature: float) -> float:
    """Mean KL(source ‖ decoded) of tempered class distributions."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    p = _tempered_probs(source, probe_x, temperature)
    q = _tempered_probs(decoded, probe_x, temperature)
    eps = np.finfo(np.float64).tiny
    kl = np.sum(p * (np.log(p + eps) - np.log(q + eps)), axis=1)
    return float(np.mean(kl))


# --- training ----------------------------------------------------------------

def _is_inr(arch: Arch) -> bool:
    return arch.sizes[0] == 2 and arch.sizes[-1] == 1


@dataclass
class _Task:
    """Precomputed functional targets shared by every step of a run."""

    kind: str                       # "inr" | "cls"
    grid: Array | None = None       # (n_pix, 2) coordinates
    targets: dict[int, Array] = field(default_factory=dict)
    probe_x: Array | None = None
    probs: dict[int, Array] = field(default_factory=dict)       # tempered p
    entropies: dict[int, float] = field(default_factory=dict)   # sum p log p


def _build_task(dataset: list[Network], config: AeConfig) -> _Task:
    arch = dataset[0].arch
    if _is_inr(arch):
        h, w = config.grid
        grid = coord_grid(h, w)
        task = _Task("inr", grid=grid)
        for i, net in enumerate(dataset):
            task.targets[i] = forward(net, grid).reshape(-1, 1)
        return task
    probe_x, _ = synth_class_data(config.probe_size, arch.sizes[0],
                                  arch.sizes[-1], config.seed + 1)
    task = _Task("cls", probe_x=probe_x)
    eps = np.finfo(np.float64).tiny
    for i, net in enumerate(dataset):
        p = _tempered_probs(net, probe_x, config.temperature)
        task.probs[i] = p
        task.entropies[i] = float(np.sum(p * np.log(p + eps)))
    return task


def _net_loss_on_tape(tape: Tape, enc_pv: dict[str, Var], dec_w: list[Var],
                      dec_b: list[Var], net: Network, idx: int,
                      model: AeModel, task: _Task) -> Var:
    z = encode_on_tape(tape, enc_pv, net, model.encoder)
    flat = decode_on_tape(tape, dec_w, dec_b, z, model.config)
    arch = model.target_arch
    wv, bv, ofs = [], [], 0
    for fan_in, fan_out in zip(arch.sizes, arch.sizes[1:]):
        wv.append(flat.slice(ofs, ofs + fan_out * fan_in).reshape((fan_out, fan_in)))
        ofs += fan_out * fan_in
        bv.append(flat.slice(ofs, ofs + fan_out))
        ofs += fan_out
    if task.kind == "inr":
        pred = forward_on_tape(tape, wv, bv, tape.constant(task.grid),
                               arch.activation)
        diff = pred - tape.constant(task.targets[idx])
        return (diff * diff).mean()
    logits = forward_on_tape(tape, wv, bv, tape.constant(task.probe_x),
                             arch.activation)
    log_q = logits.scale(1.0 / model.config.temperature).log_softmax()
    cross = (tape.constant(task.probs[idx]) * log_q).sum()
    n = task.probe_x.shape[0]
    return cross.scale(-1.0).shift(task.entropies[idx]).scale(1.0 / n)


def _eval_loss(net: Network, idx: int, model: AeModel, task: _Task) -> float:
    rec = canonicalize(net, model)
    if task.kind == "inr":
        pred = forward(rec, task.grid).reshape(-1, 1)
        return float(np.mean((pred - task.targets[idx]) ** 2))
    eps = np.finfo(np.float64).tiny
    q = _tempered_probs(rec, task.probe_x, model.config.temperature)
    p = task.probs[idx]
    return float(np.mean(np.sum(p * (np.log(p + eps) - np.log(q + eps)), axis=1)))


def _grad_one(model: AeModel, net: Network, idx: int,
              task: _Task) -> tuple[float, dict[str, Array]]:
    tape = Tape()
    enc_pv = {n: tape.leaf(v) for n, v in model.encoder.tensors.items()}
    dec_w = [tape.leaf(l.weight) for l in model.decoder]
    dec_b = [tape.leaf(l.bias) for l in model.decoder]
    loss = _net_loss_on_tape(tape, enc_pv, dec_w, dec_b, net, idx, model, task)
    backward(tape, loss)
    grads: dict[str, Array] = {}
    for name, var in enc_pv.items():
        g = var.grad
        grads[f"enc.{name}"] = np.zeros_like(var.value) if g is None else g
    for k in range(len(model.decoder)):
        gw, gb = dec_w[k].grad, dec_b[k].grad
        grads[f"dec.{k}.w"] = np.zeros_like(dec_w[k].value) if gw is None else gw
        grads[f"dec.{k}.b"] = np.zeros_like(dec_b[k].value) if gb is None else gb
    return float(loss.value), grads


def _params_of(model: AeModel) -> dict[str, Array]:
    out = {f"enc.{n}": v for n, v in model.encoder.tensors.items()}
    for k, layer in enumerate(model.decoder):
        out[f"dec.{k}.w"] = layer.weight
        out[f"dec.{k}.b"] = layer.bias
    return out


def _write_params(model: AeModel, params: dict[str, Array]):
    for name in model.encoder.tensors:
        model.encoder.tensors[name] = params[f"enc.{name}"]
    for k in range(len(model.decoder)):
        model.decoder[k] = DenseLayer(params[f"dec.{k}.w"], params[f"dec.{k}.b"])


def train(dataset: list[Network], config: AeConfig,
          n_jobs: int = 1) -> tuple[AeModel, list[tuple[int, float, float]]]:
    """Fit the autoencoder; returns (best-validation model, history).

    History rows are (epoch, mean train loss, val loss).  The split is
    seeded and the batch order is drawn from the same generator, so equal
    seeds replay the exact run.  Gradients within a batch are summed in
    dataset order no matter how many workers computed them.
    """
    if not dataset:
        raise ValueError("empty dataset")
    arch = dataset[0].arch
    for net in dataset[1:]:
        if net.arch != arch:
            raise ValueError("all networks in the dataset must share one architecture")
    model = init_ae(arch, config)
    task = _build_task(dataset, config)

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(dataset))
    n_val = int(round(config.val_fraction * len(dataset)))
    n_val = min(n_val, len(dataset) - 1)
    val_idx = [int(i) for i in order[:n_val]]
    train_idx = [int(i) for i in order[n_val:]]

    opt = AdamState(lr=config.lr, weight_decay=config.weight_decay,
                    warmup_steps=config.warmup_steps)
    pool = ThreadPoolExecutor(max_workers=n_jobs) if n_jobs > 1 else None
    history: list[tuple[int, float, float]] = []
    best_val = np.inf
    best = model.copy()
    try:
        for epoch in range(1, config.epochs + 1):
            epoch_losses: list[float] = []
            shuffled = [train_idx[int(k)] for k in rng.permutation(len(train_idx))]
            for start in range(0, len(shuffled), config.batch_size):
                batch = shuffled[start:start + config.batch_size]
                if pool is None:
                    results = [_grad_one(model, dataset[i], i, task) for i in batch]
                else:
                    futs = [pool.submit(_grad_one, model, dataset[i], i, task)
                            for i in batch]
                    results = [f.result() for f in futs]
                total: dict[str, Array] = {}
                batch_loss = 0.0
                for loss_val, grads in results:   # fixed order: batch position
                    batch_loss += loss_val
                    for name, g in grads.items():
                        total[name] = g if name not in total else total[name] + g
                batch_loss /= len(batch)
                if not np.isfinite(batch_loss):
                    raise TrainingDiverged(epoch)
                epoch_losses.append(batch_loss)
                scale = 1.0 / len(batch)
                total = {n: g * scale for n, g in total.items()}
                _write_params(model, adam_step(opt, _params_of(model), total))
            train_loss = float(np.mean(epoch_losses))
            if val_idx:
                val_loss = float(np.mean(
                    [_eval_loss(dataset[i], i, model, task) for i in val_idx]))
            else:
                val_loss = train_loss
            history.append((epoch, train_loss, val_loss))
            if val_loss < best_val:
                best_val = val_loss
                best = model.copy()
    finally:
        if pool is not None:
            pool.shutdown()
    return best, history


# --- latent-space interpolation ----------------------------------------------

def latent_interpolate(net_a: Network, net_b: Network, model: AeModel,
                       loss_fn: LossFn, n_points: int = 21) -> BarrierCurve:
    """Decode convex combinations of the two latent codes; gamma=1 is net_a."""
    if n_points < 3:
        raise ValueError(f"need at least 3 interpolation points, got {n_points}")
    z_a = encode_net(net_a, model)
    z_b = encode_net(net_b, model)
    gammas = np.linspace(0.0, 1.0, n_points)
    losses, accs = [], []
    for g in gammas:
        out = loss_fn(decode(g * z_a + (1.0 - g) * z_b, model))
        if isinstance(out, tuple):
            loss, acc = out
            accs.append(float(acc))
        else:
            loss = out
        if not np.isfinite(loss):
            raise ValueError(f"non-finite loss at gamma={g:g}")
        losses.append(float(loss))
    return BarrierCurve(tuple(float(g) for g in gammas), tuple(losses),
                        tuple(accs) if accs else None)


# --- persistence ---------------------------------------------------------------

def _tensor_table(model: AeModel) -> list[tuple[str, Array]]:
    rows = [(f"encoder.{n}", model.encoder.tensors[n])
            for n in sorted(model.encoder.tensors)]
    for k, layer in enumerate(model.decoder):
        rows.append((f"decoder.{k}.w", layer.weight))
        rows.append((f"decoder.{k}.b", layer.bias))
    return rows


def save_ae(model: AeModel, path: str, meta: dict | None = None):
    """Binary checkpoint: u32 header length, JSON header, float32 blobs."""
    rows = _tensor_table(model)
    header = {
        "version": 1,
        "config": model.config.to_dict(),
        "target_arch": {
            "sizes": list(model.target_arch.sizes),
            "activation": {"kind": model.target_arch.activation.kind,
                           "omega": model.target_arch.activation.omega},
        },
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in rows],
    }
    if meta is not None:
        header["meta"] = meta
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in rows:
            fh.write(np.asarray(arr, dtype="<f4").tobytes())


def load_ae(path: str) -> AeModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError("checkpoint too short for its header length")
    (hlen,) = struct.unpack("<I", raw[:4])
    if len(raw) < 4 + hlen:
        raise FormatError("checkpoint header is truncated")
    try:
        header = json.loads(raw[4:4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad checkpoint header: {exc}") from exc
    if header.get("version") != 1:
        raise FormatError(f"unsupported checkpoint version {header.get('version')!r}")
    try:
        config = AeConfig.from_dict(header["config"])
        ta = header["target_arch"]
        act = Activation(ta["activation"]["kind"], ta["activation"]["omega"])
        arch = Arch(tuple(ta["sizes"]), act)
        table = header["tensors"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"bad checkpoint header: {exc}") from exc
    buf = io.BytesIO(raw[4 + hlen:])
    tensors: dict[str, Array] = {}
    for row in table:
        shape = tuple(int(s) for s in row["shape"])
        count = int(np.prod(shape)) if shape else 1
        data = buf.read(4 * count)
        if len(data) != 4 * count:
            raise FormatError(f"tensor {row['name']} is truncated")
        tensors[row["name"]] = np.frombuffer(data, dtype="<f4").astype(
            np.float64).reshape(shape)
    if buf.read(1):
        raise FormatError("trailing bytes after the last tensor")

    encoder = init_gmn(config.variant, hidden_dim=config.hidden_dim,
                       n_iterations=config.n_iterations, out_dim=config.latent_dim,
                       seed=config.seed, readout=config.readout)
    for name in encoder.tensors:
        key = f"encoder.{name}"
        if key not in tensors:
            raise FormatError(f"checkpoint is missing tensor {key}")
        if tensors[key].shape != encoder.tensors[name].shape:
            raise FormatError(f"tensor {key} has shape {tensors[key].shape}, "
                              f"expected {encoder.tensors[name].shape}")
        encoder.tensors[name] = tensors[key]
    layers = []
    k = 0
    while f"decoder.{k}.w" in tensors:
        layers.append(DenseLayer(tensors[f"decoder.{k}.w"], tensors[f"decoder.{k}.b"]))
        k += 1
    if not layers:
        raise FormatError("checkpoint holds no decoder layers")
    return AeModel(config, encoder, layers, arch)


def history_to_csv(history: list[tuple[int, float, float]],
                   meta: dict | None = None) -> str:
    lines = []
    if meta:
        pairs = " ".join(f"{k}={v}" for k, v in sorted(meta.items()))
        lines.append(f"# {pairs}")
    lines.append("epoch,train_loss,val_loss")
    for epoch, tr, va in history:
        lines.append(f"{epoch},{tr:.9g},{va:.9g}")
    return "\n".join(lines) + "\n"


def history_from_csv(text: str) -> list[tuple[int, float, float]]:
    lines = [l for l in text.strip().splitlines()
             if l and not l.startswith("#")]
    if not lines or lines[0] != "epoch,train_loss,val_loss":
        raise FormatError("missing history header")
    out = []
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != 3:
            raise FormatError(f"bad history row: {line!r}")
        out.append((int(parts[0]), float(parts[1]), float(parts[2])))
    return out
