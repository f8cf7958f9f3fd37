"""Linear interpolation between networks, barrier statistics, rank correlation.

The curve convention: gamma = 1 reproduces network A, gamma = 0 network B.
The barrier is the largest excess of the loss curve over the straight chord
between its endpoint losses, clamped at zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .nets import DenseLayer, Image, Network, forward, render_inr

Array = np.ndarray

# loss_fn(net) -> float or (loss, accuracy)
LossFn = Callable[[Network], "float | tuple[float, float]"]


@dataclass
class BarrierCurve:
    gammas: Array
    losses: Array
    accuracies: Array | None = None

    def __post_init__(self):
        self.gammas = np.asarray(self.gammas, dtype=np.float64)
        self.losses = np.asarray(self.losses, dtype=np.float64)
        if self.accuracies is not None:
            self.accuracies = np.asarray(self.accuracies, dtype=np.float64)
            if self.accuracies.shape != self.gammas.shape:
                raise ValueError("accuracies and gammas differ in length")
        if self.gammas.shape != self.losses.shape:
            raise ValueError("losses and gammas differ in length")
        if self.gammas.size < 3:
            raise ValueError("curve needs at least 3 points")
        if np.any(np.diff(self.gammas) <= 0):
            raise ValueError("gammas must be strictly increasing")
        if self.gammas[0] != 0.0 or self.gammas[-1] != 1.0:
            raise ValueError("gammas must span [0, 1] inclusive")


def interpolate(net_a: Network, net_b: Network, gamma: float) -> Network:
    """Per-parameter blend: gamma * A + (1 - gamma) * B."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma {gamma} outside [0, 1]")
    if net_a.arch.sizes != net_b.arch.sizes:
        raise ValueError(
            f"architectures differ: {net_a.arch.sizes} vs {net_b.arch.sizes}")
    if net_a.hidden_activation != net_b.hidden_activation:
        raise ValueError("hidden activations differ")
    layers = []
    for la, lb in zip(net_a.layers, net_b.layers):
        layers.append(DenseLayer(gamma * la.weight + (1.0 - gamma) * lb.weight,
                                 gamma * la.bias + (1.0 - gamma) * lb.bias))
    return Network(layers, net_a.hidden_activation)


def barrier_curve(net_a: Network, net_b: Network, loss_fn: LossFn,
                  n_points: int = 21) -> BarrierCurve:
    if n_points < 3:
        raise ValueError("n_points must be at least 3")
    gammas = np.linspace(0.0, 1.0, n_points)
    losses = np.empty(n_points)
    accs: list[float] | None = None
    for k, gamma in enumerate(gammas):
        out = loss_fn(interpolate(net_a, net_b, float(gamma)))
        if isinstance(out, tuple):
            losses[k] = out[0]
            if accs is None:
                accs = []
            accs.append(out[1])
        else:
            losses[k] = out
    if not np.all(np.isfinite(losses)):
        raise ValueError("loss curve has non-finite values")
    return BarrierCurve(gammas, losses,
                        np.asarray(accs) if accs is not None else None)


def barrier(curve: BarrierCurve) -> float:
    """Max excess of the curve over the endpoint chord, clamped at >= 0."""
    chord = curve.gammas * curve.losses[-1] + (1.0 - curve.gammas) * curve.losses[0]
    return float(max(0.0, (curve.losses - chord).max()))


def kendall_tau(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Tau-b rank correlation with tie correction; O(n^2) pair counting."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("inputs must be equal-length vectors")
    n = xs.size
    if n < 2:
        raise ValueError("need at least two observations")
    concordant = discordant = 0
    for i in range(n - 1):
        dx = xs[i + 1:] - xs[i]
        dy = ys[i + 1:] - ys[i]
        s = np.sign(dx) * np.sign(dy)
        concordant += int((s > 0).sum())
        discordant += int((s < 0).sum())
    n0 = n * (n - 1) // 2

    def tie_term(v):
        _, counts = np.unique(v, return_counts=True)
        return int((counts * (counts - 1) // 2).sum())

    n1, n2 = tie_term(xs), tie_term(ys)
    denom = np.sqrt(float(n0 - n1) * float(n0 - n2))
    if denom == 0.0:
        raise ValueError("tau undefined: a variable is completely tied")
    return float((concordant - discordant) / denom)


# --- task losses -----------------------------------------------------------

def inr_mse_loss(reference: Image) -> LossFn:
    """Mean squared pixel error against a fixed reference image."""
    target = reference.pixels

    def loss(net: Network) -> float:
        img = render_inr(net, reference.height, reference.width)
        d = img.pixels - target
        return float((d * d).mean())

    return loss


def classifier_loss(probe_x: Array, probe_y: Array) -> LossFn:
    """Mean cross entropy plus accuracy on a fixed labeled probe batch."""
    probe_x = np.asarray(probe_x, dtype=np.float64)
    probe_y = np.asarray(probe_y, dtype=np.int64)

    def loss(net: Network) -> tuple[float, float]:
        logits = forward(net, probe_x)
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        ce = float(-logp[np.arange(probe_y.size), probe_y].mean())
        acc = float((logits.argmax(axis=1) == probe_y).mean())
        return ce, acc

    return loss


# --- CSV -------------------------------------------------------------------

def curve_to_csv(curve: BarrierCurve, path, meta: dict | None = None):
    """Write `gamma,loss[,accuracy]` rows with 9 significant digits."""
    lines = []
    if meta:
        pairs = " ".join(f"{k}={v}" for k, v in sorted(meta.items()))
        lines.append(f"# {pairs}")
    cols = ["gamma", "loss"] + (["accuracy"] if curve.accuracies is not None else [])
    lines.append(",".join(cols))
    for k in range(curve.gammas.size):
        row = [f"{curve.gammas[k]:.9g}", f"{curve.losses[k]:.9g}"]
        if curve.accuracies is not None:
            row.append(f"{curve.accuracies[k]:.9g}")
        lines.append(",".join(row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def curve_from_csv(path) -> BarrierCurve:
    gammas, losses, accs = [], [], []
    has_acc = False
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("gamma"):
                has_acc = "accuracy" in line
                continue
            parts = line.split(",")
            gammas.append(float(parts[0]))
            losses.append(float(parts[1]))
            if has_acc:
                accs.append(float(parts[2]))
    return BarrierCurve(np.asarray(gammas), np.asarray(losses),
                        np.asarray(accs) if has_acc else None)
