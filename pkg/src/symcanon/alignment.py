"""Sign-aware weight matching: align network B to network A.

Each hidden layer's transform is chosen to maximize the inner product
<vec(A), vec(T(B))>.  Holding the other layers fixed, the layer objective is
<T_l, C_l> with

    C_l = W_l^A T_{l-1} (W_l^B)^T + (W_{l+1}^A)^T T_{l+1} W_{l+1}^B
          + b_l^A (b_l^B)^T

and the optimum over signed permutations is the assignment that maximizes
sum_i |C[i, perm[i]]| with each matched sign read off the matched entry.
Coordinate descent sweeps layers in random order until no layer changes.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .assignment import hungarian_max
from .nets import Network, flatten
from .symmetry import (
    LayerTransform,
    NetworkTransform,
    ScaleDomain,
    apply,
    identity_transform,
)

Array = np.ndarray

# relative improvement below this is floating-point noise, not signal;
# treating it as "no change" keeps the objective trace exactly monotone
_IMPROVE_RTOL = 1e-9


class AlignMode(str, Enum):
    PERM_ONLY = "perm_only"
    PERM_SIGN = "perm_sign"


@dataclass
class AlignmentResult:
    transform: NetworkTransform
    objective_trace: list[float]
    sweeps: int
    converged: bool
    mode: AlignMode
    seed: int


def _check_pair(net_a: Network, net_b: Network, mode: AlignMode):
    if net_a.arch.sizes != net_b.arch.sizes:
        raise ValueError(
            f"architectures differ: {net_a.arch.sizes} vs {net_b.arch.sizes}")
    if net_a.hidden_activation != net_b.hidden_activation:
        raise ValueError("hidden activations differ")
    if len(net_a.layers) < 2:
        raise ValueError("alignment needs at least one hidden layer")
    if mode == AlignMode.PERM_SIGN \
            and net_a.hidden_activation.kind not in ("sine", "tanh"):
        raise ValueError(
            f"perm_sign requires an odd activation, got "
            f"{net_a.hidden_activation.kind}")


def cost_matrix(net_a: Network, net_b: Network,
                transforms: list[LayerTransform], layer: int) -> Array:
    """Layer objective matrix for hidden layer `layer` (1-based, 1..L-1)."""
    n_layers = len(net_a.layers)
    if not 1 <= layer <= n_layers - 1:
        raise ValueError(f"hidden layer index {layer} out of range 1..{n_layers - 1}")
    wa = net_a.layers[layer - 1].weight
    wb = net_b.layers[layer - 1].weight
    ba = net_a.layers[layer - 1].bias
    bb = net_b.layers[layer - 1].bias
    if layer >= 2:
        t_prev = transforms[layer - 2].matrix()
        c = wa @ t_prev @ wb.T
    else:
        c = wa @ wb.T
    wa_next = net_a.layers[layer].weight
    wb_next = net_b.layers[layer].weight
    if layer <= n_layers - 2:
        t_next = transforms[layer].matrix()
        c = c + wa_next.T @ t_next @ wb_next
    else:
        c = c + wa_next.T @ wb_next
    return c + np.outer(ba, bb)


def _layer_value(c: Array, t: LayerTransform) -> float:
    return float((c[np.arange(t.width), t.perm] * t.scale).sum())


def solve_layer(c: Array, mode: AlignMode) -> tuple[LayerTransform, float]:
    """Best single-layer transform for a fixed cost matrix.

    perm_sign: assignment on |C| with signs from the matched entries (a zero
    entry counts as +1).  perm_only: plain assignment on C.
    """
    mode = AlignMode(mode)
    if mode == AlignMode.PERM_SIGN:
        perm, _ = hungarian_max(np.abs(c))
        matched = c[np.arange(c.shape[0]), perm]
        scale = np.where(matched < 0.0, -1.0, 1.0)  # sign(0) := +1
        t = LayerTransform(perm, scale)
    else:
        perm, _ = hungarian_max(c)
        t = LayerTransform(perm, np.ones(c.shape[0]))
    return t, _layer_value(c, t)


def _total_objective(net_a: Network, net_b: Network,
                     transform: NetworkTransform) -> float:
    return float(np.dot(flatten(net_a), flatten(apply(transform, net_b))))


def coordinate_descent(net_a: Network, net_b: Network, mode: AlignMode,
                       max_sweeps: int = 100, seed: int = 0) -> AlignmentResult:
    """Randomized layer sweeps until a full sweep changes nothing."""
    mode = AlignMode(mode)
    _check_pair(net_a, net_b, mode)
    domain = (ScaleDomain.SIGN_FLIP if mode == AlignMode.PERM_SIGN
              else ScaleDomain.IDENTITY)
    transform = identity_transform(net_b, domain)
    rng = np.random.default_rng(seed)
    n_hidden = len(transform.layers)
    trace = [_total_objective(net_a, net_b, transform)]
    sweeps = 0
    converged = False
    for _ in range(max_sweeps):
        sweeps += 1
        changed = False
        for layer in rng.permutation(np.arange(1, n_hidden + 1)):
            c = cost_matrix(net_a, net_b, transform.layers, int(layer))
            new_t, new_val = solve_layer(c, mode)
            old_t = transform.layers[layer - 1]
            old_val = _layer_value(c, old_t)
            differs = not (np.array_equal(new_t.perm, old_t.perm)
                           and np.array_equal(new_t.scale, old_t.scale))
            if differs and new_val > old_val + _IMPROVE_RTOL * (1.0 + abs(old_val)):
                transform.layers[layer - 1] = new_t
                changed = True
            trace.append(_total_objective(net_a, net_b, transform))
        if not changed:
            converged = True
            break
    return AlignmentResult(transform, trace, sweeps, converged, mode, seed)


def align(net_a: Network, net_b: Network, mode: AlignMode,
          max_sweeps: int = 100, seed: int = 0
          ) -> tuple[Network, AlignmentResult]:
    """Returns (aligned copy of net_b, alignment result)."""
    result = coordinate_descent(net_a, net_b, mode, max_sweeps, seed)
    return apply(result.transform, net_b), result
