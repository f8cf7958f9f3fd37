"""Tape autodiff: forward oracles, finite-difference gradients, AdamW."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from symcanon.tensor import (
    AdamState,
    NonFiniteError,
    Tape,
    TapeError,
    adam_step,
    backward,
    eval_graph,
)

RNG = np.random.default_rng


def finite_diff(fn, x, h=1e-6):
    """Central-difference gradient of scalar fn at x (flattened loop)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        dn = fn(x)
        flat[i] = orig
        gf[i] = (up - dn) / (2 * h)
    return g


def test_eval_matches_scalar_loops():
    # x @ W + b, then sin, then mean: replayed with straight python loops
    rng = RNG(0)
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(3, 5))
    b = rng.normal(size=(5,))
    tape = Tape()
    vx, vw, vb = tape.leaf(x), tape.leaf(w), tape.leaf(b)
    out = ((vx @ vw) + vb).sin().mean()
    got = eval_graph(tape)

    acc = 0.0
    for i in range(4):
        for j in range(5):
            s = b[j]
            for k in range(3):
                s += x[i, k] * w[k, j]
            acc += np.sin(s)
    assert abs(got - acc / 20.0) <= 1e-12
    assert abs(out.value - got) <= 1e-12


def test_eval_graph_is_pure():
    rng = RNG(1)
    tape = Tape()
    a = tape.leaf(rng.normal(size=(3, 3)))
    ((a @ a).tanh().sum())
    first = eval_graph(tape)
    second = eval_graph(tape)
    assert first.tobytes() == second.tobytes()


def _random_graph(rng, tape):
    """Small random op chain over two leaf matrices; returns (leaves, scalar)."""
    a = tape.leaf(rng.normal(size=(3, 4)))
    b = tape.leaf(rng.normal(size=(4, 3)))
    cur = a @ b
    ops = rng.choice(
        ["sin", "tanh", "silu", "exp_s", "mulself", "addc", "softmax",
         "log_softmax", "relu", "neg", "scale"],
        size=rng.integers(2, 6), replace=True)
    for op in ops:
        if op == "sin":
            cur = cur.sin()
        elif op == "tanh":
            cur = cur.tanh()
        elif op == "silu":
            cur = cur.silu()
        elif op == "exp_s":
            cur = cur.scale(0.3).exp()
        elif op == "mulself":
            cur = cur * cur
        elif op == "addc":
            cur = cur + tape.constant(rng.normal(size=(1, 3)))
        elif op == "softmax":
            cur = cur.softmax()
        elif op == "log_softmax":
            cur = cur.scale(0.5).softmax().scale(0.999).log()
        elif op == "relu":
            cur = cur.relu() + cur.scale(0.01)
        elif op == "neg":
            cur = -cur
        elif op == "scale":
            cur = cur.scale(1.7)
    return (a, b), (cur * cur).mean()


def _rebuild_loss(seed, a_val, b_val):
    """Rebuild the seed's random graph on fresh leaf values; return loss."""
    rng = RNG(seed)
    rng.normal(size=(3, 4))
    rng.normal(size=(4, 3))
    tape = Tape()
    cur = tape.leaf(a_val) @ tape.leaf(b_val)
    ops = rng.choice(
        ["sin", "tanh", "silu", "exp_s", "mulself", "addc", "softmax",
         "log_softmax", "relu", "neg", "scale"],
        size=rng.integers(2, 6), replace=True)
    for op in ops:
        if op == "sin":
            cur = cur.sin()
        elif op == "tanh":
            cur = cur.tanh()
        elif op == "silu":
            cur = cur.silu()
        elif op == "exp_s":
            cur = cur.scale(0.3).exp()
        elif op == "mulself":
            cur = cur * cur
        elif op == "addc":
            cur = cur + tape.constant(rng.normal(size=(1, 3)))
        elif op == "softmax":
            cur = cur.softmax()
        elif op == "log_softmax":
            cur = cur.scale(0.5).softmax().scale(0.999).log()
        elif op == "relu":
            cur = cur.relu() + cur.scale(0.01)
        elif op == "neg":
            cur = -cur
        elif op == "scale":
            cur = cur.scale(1.7)
    return float((cur * cur).mean().value)


@pytest.mark.parametrize("seed", range(25))
def test_gradients_match_central_differences(seed):
    rng = RNG(seed)
    tape = Tape()
    (a, b), loss = _random_graph(rng, tape)
    assert abs(_rebuild_loss(seed, a.value, b.value) - float(loss.value)) <= 1e-12
    backward(tape, loss)

    a0, b0 = a.value.copy(), b.value.copy()
    for leaf, which in ((a, 0), (b, 1)):
        def f(x):
            return (_rebuild_loss(seed, x, b0) if which == 0
                    else _rebuild_loss(seed, a0, x))

        num = finite_diff(f, leaf.value.copy())
        ana = leaf.grad
        denom = max(np.abs(num).max(), np.abs(ana).max(), 1e-8)
        assert np.abs(num - ana).max() / denom <= 1e-4


def test_gradient_normalize_rows_and_concat_slice():
    rng = RNG(7)
    x0 = rng.normal(size=(5, 4))

    def f(x):
        t = Tape()
        v = t.leaf(x)
        u = v.normalize_rows()
        w = t.concat([u, u * u])
        s = w.reshape((40,)).slice(3, 29)
        return float((s * s).sum().value)

    t = Tape()
    v = t.leaf(x0)
    u = v.normalize_rows()
    w = t.concat([u, u * u])
    s = w.reshape((40,)).slice(3, 29)
    backward(t, (s * s).sum())
    num = finite_diff(f, x0.copy())
    assert np.abs(num - v.grad).max() <= 1e-6


def test_normalize_rows_zero_row_convention():
    t = Tape()
    x = np.array([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]])
    out = t.leaf(x).normalize_rows()
    assert np.allclose(out.value[0], 0.0)
    assert np.allclose(out.value[1], [0.6, 0.8, 0.0])


def test_shape_mismatch_rejected_with_node_id():
    t = Tape()
    a = t.leaf(np.zeros((2, 3)))
    b = t.leaf(np.zeros((2, 3)))
    with pytest.raises(TapeError, match="node 2"):
        a @ b


def test_non_scalar_loss_rejected():
    t = Tape()
    a = t.leaf(np.zeros((2, 2)))
    v = a.sin()
    with pytest.raises(TapeError, match="scalar"):
        backward(t, v)


def test_backward_skips_constant_only_subgraphs():
    t = Tape()
    a = t.leaf(np.ones((2, 2)))
    c = t.constant(np.ones((2, 2)))
    loss = ((a @ c) + (c * c)).sum()
    grads = backward(t, loss)
    assert set(grads) == {a.idx}


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_softmax_rows_sum_to_one(seed):
    rng = RNG(seed)
    t = Tape()
    s = t.leaf(rng.normal(size=(3, 6), scale=4)).softmax()
    assert np.allclose(s.value.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(s.value >= 0)


def test_adam_first_step_matches_closed_form():
    # with bias correction and no warmup, step one is -lr * g / (|g| + eps)
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.1, -0.2])}
    st_ = AdamState(lr=1e-3)
    new = adam_step(st_, p, g)
    expect = p["w"] - 1e-3 * g["w"] / (np.abs(g["w"]) + 1e-8)
    assert np.allclose(new["w"], expect, rtol=0, atol=1e-12)


def test_adam_warmup_scales_first_step():
    p = {"w": np.array([1.0])}
    g = {"w": np.array([0.1])}
    st_ = AdamState(lr=1e-3, warmup_steps=1000)
    new = adam_step(st_, p, g)
    expect = p["w"] - (1e-3 / 1000) * g["w"] / (np.abs(g["w"]) + 1e-8)
    assert np.allclose(new["w"], expect, rtol=0, atol=1e-15)
    assert st_.effective_lr(1000) == pytest.approx(1e-3)
    assert st_.effective_lr(5000) == pytest.approx(1e-3)


def test_adam_weight_decay_is_decoupled():
    p = {"w": np.array([2.0])}
    g = {"w": np.array([0.0])}
    st_ = AdamState(lr=0.1, weight_decay=0.5)
    new = adam_step(st_, p, g)
    # zero gradient: only the decay term moves the weight
    assert np.allclose(new["w"], 2.0 - 0.1 * 0.5 * 2.0)


def test_adam_rejects_non_finite_gradient_by_name():
    st_ = AdamState()
    with pytest.raises(NonFiniteError, match="spam"):
        adam_step(st_, {"spam": np.ones(2)}, {"spam": np.array([1.0, np.nan])})


def test_adam_determinism():
    def run():
        rng = RNG(3)
        p = {"a": rng.normal(size=(4, 4)), "b": rng.normal(size=(4,))}
        st_ = AdamState(lr=1e-2, weight_decay=1e-2, warmup_steps=5)
        for _ in range(20):
            g = {k: np.sin(v) for k, v in p.items()}
            p = adam_step(st_, p, g)
        return p

    p1, p2 = run(), run()
    assert all(p1[k].tobytes() == p2[k].tobytes() for k in p1)
