"""Networks as graphs, and a permutation/scale-invariant graph encoder.

Every neuron is a node (band-major, position-minor ordering; band 0 is the
input); every weight is a directed edge from its source neuron to its
destination.  Message passing runs along edges with one of three block
families:

- ``plain``: ordinary MLP message/update blocks (permutation-invariant only)
- ``scale_sign``: blocks built from sign-canonicalizing functions, invariant
  to hidden-neuron sign flips (sine/tanh networks)
- ``scale_positive``: blocks built from ray normalization, invariant to
  positive rescalings (relu networks)

The scale-aware blocks follow one recipe: linear maps touch the raw
(scale-carrying) vectors, while every nonlinearity only ever sees
canonicalized (scale-free) vectors,

    scale_eq(x_1..x_n) = sum_i (x_i @ G_i^T) * rho_i(canon(x_1)..canon(x_n))
    rescale_eq(y, e)   = (y @ Gy^T) * (e @ Ge^T)

so multiplying any shared per-node factor through the inputs moves straight
through to the output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .nets import Network, init_network
from .tensor import Tape, Var

Array = np.ndarray

MAX_DEPTH = 8  # bands of neurons a graph may have (input + hidden... + output)


class GmnVariant(str, Enum):
    PLAIN = "plain"
    SCALE_SIGN = "scale_sign"
    SCALE_POSITIVE = "scale_positive"


_VARIANT_ACTIVATIONS = {
    GmnVariant.PLAIN: ("sine", "tanh", "relu", "identity"),
    GmnVariant.SCALE_SIGN: ("sine", "tanh"),
    GmnVariant.SCALE_POSITIVE: ("relu",),
}


# --- graph extraction ------------------------------------------------------

@dataclass
class GraphNode:
    band: int   # 0 = inputs, rising to the output band
    pos: int
    bias: float  # 0.0 for input nodes
    role: str    # "input" | "hidden" | "output"


@dataclass
class NetGraph:
    nodes: list[GraphNode]
    edges: list[tuple[int, int, float]]  # (src_node, dst_node, weight)
    widths: tuple[int, ...]

    def node_features(self) -> Array:
        """[bias, band one-hot] per node, one-hot capped at MAX_DEPTH."""
        feats = np.zeros((len(self.nodes), 1 + MAX_DEPTH))
        for k, node in enumerate(self.nodes):
            feats[k, 0] = node.bias
            feats[k, 1 + node.band] = 1.0
        return feats


def to_graph(net: Network) -> NetGraph:
    sizes = net.arch.sizes
    if len(sizes) > MAX_DEPTH:
        raise ValueError(
            f"network has {len(sizes)} neuron bands, encoder supports "
            f"at most {MAX_DEPTH}")
    nodes: list[GraphNode] = []
    offsets = []
    last = len(sizes) - 1
    for band, width in enumerate(sizes):
        offsets.append(len(nodes))
        role = "input" if band == 0 else "output" if band == last else "hidden"
        for pos in range(width):
            bias = 0.0 if band == 0 else float(net.layers[band - 1].bias[pos])
            nodes.append(GraphNode(band, pos, bias, role))
    edges: list[tuple[int, int, float]] = []
    for l, layer in enumerate(net.layers):
        for i in range(layer.weight.shape[0]):        # destination-major
            for j in range(layer.weight.shape[1]):
                edges.append((offsets[l] + j, offsets[l + 1] + i,
                              float(layer.weight[i, j])))
    return NetGraph(nodes, edges, tuple(sizes))


# --- parameters -------------------------------------------------------------

@dataclass
class GmnParams:
    variant: GmnVariant
    hidden_dim: int
    n_iterations: int
    out_dim: int
    readout: str  # "full_graph" | "last_layer"
    tensors: dict[str, Array] = field(default_factory=dict)

    def copy(self) -> "GmnParams":
        return GmnParams(self.variant, self.hidden_dim, self.n_iterations,
                         self.out_dim, self.readout,
                         {k: v.copy() for k, v in self.tensors.items()})


def _mlp_tensors(rng, name, d_in, d_hidden, d_out, out):
    out[f"{name}.w0"] = rng.normal(size=(d_hidden, d_in)) / np.sqrt(d_in)
    out[f"{name}.b0"] = np.zeros(d_hidden)
    out[f"{name}.w1"] = rng.normal(size=(d_out, d_hidden)) / np.sqrt(d_hidden)
    out[f"{name}.b1"] = np.zeros(d_out)


def _gamma_tensor(rng, name, d_in, d_out, out):
    out[name] = rng.normal(size=(d_out, d_in)) / np.sqrt(d_in)


def init_gmn(variant: GmnVariant, hidden_dim: int = 32, n_iterations: int = 2,
             out_dim: int = 32, seed: int = 0, readout: str = "full_graph"
             ) -> GmnParams:
    variant = GmnVariant(variant)
    if readout not in ("full_graph", "last_layer"):
        raise ValueError(f"unknown readout {readout!r}")
    if n_iterations < 1:
        raise ValueError("need at least one message-passing iteration")
    rng = np.random.default_rng(seed)
    h = hidden_dim
    t: dict[str, Array] = {}
    if variant == GmnVariant.PLAIN:
        _mlp_tensors(rng, "init_v", 1 + MAX_DEPTH, h, h, t)
        _mlp_tensors(rng, "init_e", 1, h, h, t)
        for it in range(1, n_iterations + 1):
            _mlp_tensors(rng, f"it{it}.msg", 3 * h, h, h, t)
            _mlp_tensors(rng, f"it{it}.upd_v", 2 * h, h, h, t)
            if it < n_iterations:
                _mlp_tensors(rng, f"it{it}.upd_e", 3 * h, h, h, t)
    else:
        _mlp_tensors(rng, "init_io", 1 + MAX_DEPTH, h, h, t)
        t["init_hidden.emb"] = rng.normal(size=(MAX_DEPTH, h)) / np.sqrt(h)
        _gamma_tensor(rng, "init_e.gamma", 1, h, t)
        for it in range(1, n_iterations + 1):
            _gamma_tensor(rng, f"it{it}.msg.gy", h, h, t)
            _gamma_tensor(rng, f"it{it}.msg.ge", h, h, t)
            _gamma_tensor(rng, f"it{it}.msg.g0", h, h, t)
            _gamma_tensor(rng, f"it{it}.msg.g1", h, h, t)
            _mlp_tensors(rng, f"it{it}.msg.rho", 2 * h, 2 * h, 2 * h, t)
            _gamma_tensor(rng, f"it{it}.upd_v.g0", h, h, t)
            _gamma_tensor(rng, f"it{it}.upd_v.g1", h, h, t)
            _mlp_tensors(rng, f"it{it}.upd_v.rho", 2 * h, 2 * h, 2 * h, t)
            if variant == GmnVariant.SCALE_SIGN:
                _mlp_tensors(rng, f"it{it}.msg.canon", h, h, h, t)
                _mlp_tensors(rng, f"it{it}.upd_v.canon", h, h, h, t)
            if it < n_iterations:
                _gamma_tensor(rng, f"it{it}.upd_e.ge", h, h, t)
                _mlp_tensors(rng, f"it{it}.upd_e.rho", 3 * h, h, h, t)
                if variant == GmnVariant.SCALE_SIGN:
                    _mlp_tensors(rng, f"it{it}.upd_e.canon", h, h, h, t)
    if variant == GmnVariant.SCALE_SIGN:
        _mlp_tensors(rng, "read.canon", h, h, h, t)
    _mlp_tensors(rng, "read", h + _STATS_PER_BAND * MAX_DEPTH, h, out_dim, t)
    return GmnParams(variant, hidden_dim, n_iterations, out_dim, readout, t)


# --- differentiable blocks --------------------------------------------------

def _mlp(pv: dict[str, Var], name: str, x: Var) -> Var:
    h = (x @ pv[f"{name}.w0"].T) + pv[f"{name}.b0"]
    return (h.silu() @ pv[f"{name}.w1"].T) + pv[f"{name}.b1"]


def _gate(pv: dict[str, Var], name: str, x: Var) -> Var:
    """Multiplicative gate in (0, 2), centered at 1.

    Unbounded gates compound across message-passing iterations: state
    magnitudes either explode along a data-independent direction or collapse
    to zero, and both bury the input signal.  Squashing keeps the stack
    well-conditioned at any depth.
    """
    return _mlp(pv, name, x).tanh().shift(1.0)


def canon_sign(x: Var, pv: dict[str, Var], name: str) -> Var:
    """Exactly even in x: canon_sign(-x) == canon_sign(x) bit for bit."""
    return _mlp(pv, name, x) + _mlp(pv, name, -x)


def canon_pos(x: Var) -> Var:
    """Ray normalization: invariant to positive scaling; canon_pos(0) = 0."""
    return x.normalize_rows()


def rescale_eq(y: Var, e: Var, gamma_y: Var, gamma_e: Var) -> Var:
    """Bilinear in (y, e): scales by the product of their factors."""
    return (y @ gamma_y.T) * (e @ gamma_e.T)


def scale_eq(xs: list[Var], gammas: list[Var], rho: "Callable[[Var], Var] | None",
             canon: "Callable[[Var], Var]") -> Var:
    """Sum of per-input linear maps gated by a function of the canons.

    With ``rho is None`` the gate is 1 and this reduces to sum_i x_i @ G_i^T.
    Equivariance: scaling every x_i by a shared per-row factor scales the
    output by that factor, because rho only sees canonicalized inputs.
    """
    if len(xs) != len(gammas):
        raise ValueError(f"{len(xs)} inputs but {len(gammas)} linear maps")
    lins = [x @ g.T for x, g in zip(xs, gammas)]
    if rho is None:
        out = lins[0]
        for l in lins[1:]:
            out = out + l
        return out
    tape = xs[0].tape
    gate = rho(tape.concat([canon(x) for x in xs]))
    h = lins[0].shape[-1]
    out = None
    for k, lin in enumerate(lins):
        chunk = gate if len(lins) == 1 else _split_last(gate, k, h)
        term = lin * chunk
        out = term if out is None else out + term
    return out


def _split_last(v: Var, k: int, width: int) -> Var:
    """Take columns [k*width, (k+1)*width) of a 2-d Var (selector matmul)."""
    total = v.shape[-1]
    sel = np.zeros((total, width))
    sel[k * width:(k + 1) * width, :] = np.eye(width)
    return v @ v.tape.constant(sel)


class GmnBlocks:
    """Message/update blocks of one iteration, bound to parameter Vars."""

    def __init__(self, variant: GmnVariant, pv: dict[str, Var], it: int):
        self.variant = variant
        self.pv = pv
        self.it = it

    def _canon(self, name_prefix):
        if self.variant == GmnVariant.SCALE_SIGN:
            return lambda x: canon_sign(x, self.pv, f"{name_prefix}.canon")
        return canon_pos

    def msg(self, x: Var, y: Var, e: Var) -> Var:
        """Per-edge message; x destination state, y source state, e edge."""
        p = f"it{self.it}.msg"
        if self.variant == GmnVariant.PLAIN:
            return _mlp(self.pv, p, x.tape.concat([x, y, e]))
        r = rescale_eq(y, e, self.pv[f"{p}.gy"], self.pv[f"{p}.ge"])
        return scale_eq([x, r], [self.pv[f"{p}.g0"], self.pv[f"{p}.g1"]],
                        lambda v: _gate(self.pv, f"{p}.rho", v), self._canon(p))

    def upd_v(self, x: Var, m: Var) -> Var:
        p = f"it{self.it}.upd_v"
        if self.variant == GmnVariant.PLAIN:
            return _mlp(self.pv, p, x.tape.concat([x, m]))
        return scale_eq([x, m], [self.pv[f"{p}.g0"], self.pv[f"{p}.g1"]],
                        lambda v: _gate(self.pv, f"{p}.rho", v), self._canon(p))

    def upd_e(self, x_dst: Var, x_src: Var, e: Var) -> Var:
        p = f"it{self.it}.upd_e"
        if self.variant == GmnVariant.PLAIN:
            return _mlp(self.pv, p, e.tape.concat([x_dst, x_src, e]))
        canon = self._canon(p)
        gate = _gate(self.pv, f"{p}.rho",
                     e.tape.concat([canon(x_dst), canon(x_src), canon(e)]))
        return (e @ self.pv[f"{p}.ge"].T) * gate


# --- the encoder -------------------------------------------------------------

_STATS_PER_BAND = 9
_QUANTILES = (0.1, 0.3, 0.5, 0.7, 0.9)
_STATS_GAIN = 1.0


def _band_stats(net: Network, variant: GmnVariant) -> Array:
    """Scalar summaries of each band, (1, _STATS_PER_BAND * MAX_DEPTH).

    Fed to the readout beside the pooled node states: summaries of the raw
    input give the latent usable variation from the very first step, long
    before message passing has learned to pass anything.  Each tensor is
    first canonicalized per the variant's symmetry — magnitudes under sign
    flips, signs under positive scalings (a hidden unit's own magnitude is
    gauge, and incoming row norms also move with upstream factors, so only
    the sign survives).  Two feature groups per band:

    * whole-tensor moments: log-rms and the bounded shape ratio mean/rms
      of the weight matrix and of the bias vector.  The log turns the
      few-percent relative differences between trained nets into O(1)
      absolute differences.
    * the per-unit profile spectrum: one scalar per unit from its incoming
      row plus bias (rms, or mean sign density under positive scalings),
      summarized by quantiles.  Sorting makes the spectrum blind to unit
      order, so this resolves how mass spreads across units without ever
      fixing which unit is which.

    Entry-order-free reductions keep z invariant.  Boundary bands carry no
    scaling freedom and keep their raw values; unused bands stay zero.
    """
    sizes = net.arch.sizes
    out = np.zeros((1, _STATS_PER_BAND * MAX_DEPTH))
    last = len(sizes) - 1

    def reduce(t: Array) -> tuple[float, float]:
        # fixed memory order so summation grouping (and hence the exact
        # float result) does not depend on how the caller built the array
        t = np.ascontiguousarray(t)
        rms = float(np.sqrt(np.mean(t * t)))
        return np.log(rms + 1e-3), float(t.mean()) / (rms + 1e-8)

    for band in range(1, len(sizes)):
        layer = net.layers[band - 1]
        if variant == GmnVariant.PLAIN:
            w, b = layer.weight, layer.bias
        elif variant == GmnVariant.SCALE_SIGN:
            # output-band weights still feel the previous band's flips on
            # their columns, so they are canonicalized like any other band
            w = np.abs(layer.weight)
            b = layer.bias if band == last else np.abs(layer.bias)
        else:
            w = np.sign(layer.weight)
            b = layer.bias if band == last else np.sign(layer.bias)
        profile = np.ascontiguousarray(
            np.concatenate([w, b[:, None]], axis=1))
        if variant == GmnVariant.SCALE_POSITIVE:
            units = profile.mean(axis=1)
            quant = np.quantile(units, _QUANTILES)
        else:
            units = np.sqrt((profile * profile).mean(axis=1))
            quant = np.log(np.quantile(units, _QUANTILES) + 1e-3)
        k = _STATS_PER_BAND * band
        out[0, k:k + 2] = reduce(w)
        out[0, k + 2:k + 4] = reduce(b)
        out[0, k + 4:k + 9] = quant
    return out


def _check_net(net: Network, params: GmnParams):
    kind = net.hidden_activation.kind
    if kind not in _VARIANT_ACTIVATIONS[params.variant]:
        raise ValueError(
            f"variant {params.variant.value} does not cover {kind} networks")
    if len(net.arch.sizes) > MAX_DEPTH:
        raise ValueError(
            f"network has {len(net.arch.sizes)} bands, encoder supports "
            f"at most {MAX_DEPTH}")


def encode_on_tape(tape: Tape, pv: dict[str, Var], net: Network,
                   params: GmnParams) -> Var:
    """Build the message-passing graph on an existing tape; returns z."""
    _check_net(net, params)
    sizes = net.arch.sizes
    n_bands = len(sizes)
    h = params.hidden_dim
    variant = params.variant

    # per-band constants
    onehots, feats, bias_cols = [], [], []
    for band, width in enumerate(sizes):
        oh = np.zeros((width, MAX_DEPTH))
        oh[:, band] = 1.0
        onehots.append(oh)
        bias = np.zeros(width) if band == 0 else net.layers[band - 1].bias
        feats.append(np.column_stack([bias, oh]))
        bias_cols.append(np.asarray(bias).reshape(width, 1))

    # per-weight-layer constants: edge features and selector matrices
    w_cols, r_src, r_dst, s_agg = [], [], [], []
    for l, layer in enumerate(net.layers):
        n_dst, n_src = layer.weight.shape
        n_e = n_dst * n_src
        w_cols.append(layer.weight.reshape(n_e, 1))
        rs = np.zeros((n_e, n_src))
        rd = np.zeros((n_e, n_dst))
        sa = np.zeros((n_dst, n_e))
        idx = np.arange(n_e)
        rs[idx, idx % n_src] = 1.0          # edges are dst-major, src-minor
        rd[idx, idx // n_src] = 1.0
        sa[idx // n_src, idx] = 1.0 / n_src  # mean over incoming edges
        r_src.append(tape.constant(rs))
        r_dst.append(tape.constant(rd))
        s_agg.append(tape.constant(sa))

    # INIT
    states: list[Var] = []
    for band in range(n_bands):
        fc = tape.constant(feats[band])
        if variant == GmnVariant.PLAIN:
            states.append(_mlp(pv, "init_v", fc))
        elif band in (0, n_bands - 1):
            states.append(_mlp(pv, "init_io", fc))
        else:
            emb_rows = tape.constant(onehots[band]) @ pv["init_hidden.emb"]
            states.append(tape.constant(bias_cols[band]) * emb_rows)
    edge_states: list[Var] = []
    for l in range(len(net.layers)):
        wc = tape.constant(w_cols[l])
        if variant == GmnVariant.PLAIN:
            edge_states.append(_mlp(pv, "init_e", wc))
        else:
            edge_states.append(wc @ pv["init_e.gamma"].T)

    # message passing
    for it in range(1, params.n_iterations + 1):
        blocks = GmnBlocks(variant, pv, it)
        x_exps, y_exps, msgs = [], [], {}
        for l in range(len(net.layers)):
            x_exp = r_dst[l] @ states[l + 1]
            y_exp = r_src[l] @ states[l]
            x_exps.append(x_exp)
            y_exps.append(y_exp)
            m_edge = blocks.msg(x_exp, y_exp, edge_states[l])
            msgs[l + 1] = s_agg[l] @ m_edge
        new_states = []
        for band in range(n_bands):
            m = msgs.get(band)
            if m is None:
                m = tape.constant(np.zeros((sizes[band], h)))
            new_states.append(blocks.upd_v(states[band], m))
        if it < params.n_iterations:
            edge_states = [blocks.upd_e(x_exps[l], y_exps[l], edge_states[l])
                           for l in range(len(net.layers))]
        states = new_states

    # readout
    bands = range(n_bands) if params.readout == "full_graph" else [n_bands - 1]
    pooled = None
    for band in bands:
        s = states[band]
        if variant == GmnVariant.SCALE_SIGN:
            s = canon_sign(s, pv, "read.canon")
        elif variant == GmnVariant.SCALE_POSITIVE:
            s = canon_pos(s)
        part = tape.constant(np.full((1, sizes[band]), 1.0 / sizes[band])) @ s
        pooled = part if pooled is None else pooled + part
    # center the summaries on those of a fixed reference init for the same
    # architecture: the shared offsets of a whole model family cancel, so
    # what reaches the readout is the part that distinguishes this net
    ref = _band_stats(init_network(net.arch, seed=0), variant)
    delta = np.clip(_band_stats(net, variant) - ref, -3.0, 3.0)
    stats = tape.constant(_STATS_GAIN * delta)
    z = _mlp(pv, "read", tape.concat([pooled, stats]))
    return z.reshape((params.out_dim,))


def encode(net: Network, params: GmnParams) -> Array:
    """Latent code of a network; invariant to the variant's symmetry group."""
    tape = Tape()
    pv = {name: tape.leaf(v) for name, v in params.tensors.items()}
    return encode_on_tape(tape, pv, net, params).value.copy()
