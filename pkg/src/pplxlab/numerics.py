"""Dense float64 tensors with a recording tape for reverse-mode differentiation.

Tensors are thin wrappers around ``numpy.ndarray``.  A tensor created through
:meth:`Tape.leaf` (or produced by an op with at least one taped input) carries
a node id on that tape; everything else is a plain value.  Running an op on
value-only tensors does no bookkeeping, which is what inference paths use.

Only the operations the toy Transformers need are provided.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

EPS_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: Tape | None = None, node_id: int | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise FloatingPointError("tensor contains non-finite entries")
        self.data = arr
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        where = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{where})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    parents: tuple[int | None, ...]
    vjp: Callable[[np.ndarray], tuple] | None
    shape: tuple[int, ...]


class Tape:
    """Ordered record of operations; node ids are indices into ``nodes``."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def leaf(self, data) -> Tensor:
        t = Tensor(data)
        t.tape = self
        t.node_id = len(self.nodes)
        self.nodes.append(_Node((), None, t.shape))
        return t

    def _record(self, out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
        t = Tensor(out)
        t.tape = self
        t.node_id = len(self.nodes)
        parents = tuple(x.node_id if x.tape is self else None for x in inputs)
        self.nodes.append(_Node(parents, vjp, t.shape))
        return t


def _make(out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    tape = None
    for x in inputs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("inputs recorded on different tapes")
            tape = x.tape
    if tape is None:
        return Tensor(out)
    return tape._record(out, inputs, vjp)


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a gradient for every leaf on the tape; leaves that do not
    influence the loss get zeros.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in range(loss.node_id, -1, -1):
        node = tape.nodes[nid]
        g = grads.get(nid)
        if g is None or node.vjp is None:
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            if pid is None or pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    out = {}
    for nid, node in enumerate(tape.nodes):
        if node.vjp is None:
            g = grads.get(nid)
            out[nid] = Tensor(np.zeros(node.shape) if g is None else g)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.data, b.data
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def power(a: Tensor, k: float) -> Tensor:
    av = a.data
    return _make(av ** k, (a,), lambda g: (g * k * av ** (k - 1),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _make(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.full(shape, float(g) / n),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def vjp(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)

    return _make(out, (a,), vjp)


# -- shape -------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def gather_rows(table: Tensor, index) -> Tensor:
    """Embedding lookup: ``table[index]`` for an integer array ``index``."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError("row index out of range")
    shape = table.shape

    def vjp(g):
        gt = np.zeros(shape)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _make(table.data[idx], (table,), vjp)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul needs at least 2-d operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    av, bv = a.data, b.data
    out = av @ bv

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2:
            # shared weight: fold every leading axis into one big product
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return _unbroadcast(ga, av.shape), gb

    return _make(out, (a, b), vjp)


# -- normalisation / probabilities ---------------------------------------------

def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    xv, gv = x.data, gain.data
    r = 1.0 / np.sqrt((xv * xv).mean(axis=-1, keepdims=True) + eps)
    u = xv * r

    def vjp(g):
        gg = g * gv
        gx = r * (gg - u * (gg * u).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * u, gv.shape)

    return _make(u * gv, (x, gain), vjp)


def _softmax_vjp(p: np.ndarray):
    return lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),)


def _stable_softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def row_softmax(logits: Tensor) -> Tensor:
    if logits.data.ndim == 0 or logits.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last axis")
    p = _stable_softmax(logits.data)
    return _make(p, (logits,), _softmax_vjp(p))


def causal_softmax(scores: Tensor) -> Tensor:
    """Softmax over the key axis with query ``i`` restricted to keys ``<= i``."""
    t = scores.shape[-1]
    allowed = np.tril(np.ones((t, t), dtype=bool))
    z = np.where(allowed, scores.data, -np.inf)
    p = _stable_softmax(z)
    return _make(p, (scores,), _softmax_vjp(p))


def rope_tables(positions, d_head: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    if d_head % 2:
        raise ValueError(f"head dimension must be even, got {d_head}")
    pos = np.asarray(positions, dtype=np.float64)
    inv_freq = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    ang = pos[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    ev, od = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = ev * cos - od * sin
    out[..., 1::2] = ev * sin + od * cos
    return out


def rope(x: Tensor, positions, base: float) -> Tensor:
    """Rotate consecutive feature pairs of ``x[..., T, d]`` by ``pos * base**(-2i/d)``."""
    cos, sin = rope_tables(positions, x.shape[-1], base)
    return _make(_rotate(x.data, cos, sin), (x,), lambda g: (_rotate(g, cos, -sin),))


def cross_entropy(probs: Tensor, targets, weights=None, floor: float = EPS_FLOOR) -> Tensor:
    """Mean of ``-log(max(p[target], floor))`` over rows.

    ``probs`` may carry leading batch axes; ``targets`` matches them.  Rows with
    zero ``weights`` are ignored and the mean is taken over the total weight.
    """
    v = probs.shape[-1]
    pv = probs.data.reshape(-1, v)
    tg = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tg.shape[0] != pv.shape[0]:
        raise ShapeError(f"{tg.shape[0]} targets for {pv.shape[0]} rows")
    w = np.ones(tg.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    live = w != 0
    if live.any() and (tg[live].min() < 0 or tg[live].max() >= v):
        raise IndexError(f"target outside [0, {v})")
    safe = np.where(live, tg, 0)
    rows = np.arange(tg.shape[0])
    pt = pv[rows, safe]
    clamped = np.maximum(pt, floor)
    total = w.sum()
    if total <= 0:
        raise ValueError("no weighted targets")
    loss = -(w * np.log(clamped)).sum() / total
    shape = probs.shape

    def vjp(g):
        gp = np.zeros_like(pv)
        coef = np.where(pt > floor, -w / (total * np.where(pt > floor, pt, 1.0)), 0.0)
        gp[rows, safe] = float(g) * coef
        return (gp.reshape(shape),)

    return _make(np.asarray(loss), (probs,), vjp)


# -- optimisation --------------------------------------------------------------

@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    step_count: int = 0
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_div: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray], **hyper) -> AdamState:
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, **hyper)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs are not modified.

    Entries whose gradient is exactly zero keep their value (their moments
    still decay), so a zero gradient never moves a parameter.
    """
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape or state.first_moment[name].shape != p.shape:
            raise ShapeError(f"shape mismatch for {name}: {p.shape} vs {g.shape}")
        m = b1 * state.first_moment[name] + (1 - b1) * g
        v = b2 * state.second_moment[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        upd = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon_div)
        new_p[name] = np.where(g != 0, p - upd, p)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(new_m, new_v, t, state.learning_rate, b1, b2, state.epsilon_div)


# -- gradient oracle -----------------------------------------------------------

LossFn = Callable[[Mapping[str, Tensor]], Tensor]


def grad_of(fn: LossFn, point: Mapping[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``fn`` on a fresh tape and return ``(loss, grads by name)``."""
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in point.items()}
    loss = fn(leaves)
    g = backward(tape, loss)
    return loss.item(), {k: g[t.node_id].data for k, t in leaves.items()}


def finite_diff_check(fn: LossFn, point: Mapping[str, np.ndarray], h: float = 1e-3,
                      n_samples: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max of ``|g_ad - g_fd| / max(1, |g_ad|)`` over sampled coordinates.

    ``g_fd`` is the central difference ``(f(x+h) - f(x-h)) / 2h``.  With
    ``n_samples=None`` every coordinate is checked.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    _, ad = grad_of(fn, point)
    coords = [(k, i) for k, v in point.items() for i in range(v.size)]
    if n_samples is not None and n_samples < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[j] for j in sorted(pick)]
    base = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    worst = 0.0
    for name, i in coords:
        arr = base[name].reshape(-1)
        orig = arr[i]
        arr[i] = orig + h
        fp = fn({k: Tensor(v) for k, v in base.items()}).item()
        arr[i] = orig - h
        fm = fn({k: Tensor(v) for k, v in base.items()}).item()
        arr[i] = orig
        fd = (fp - fm) / (2 * h)
        g = ad[name].reshape(-1)[i]
        worst = max(worst, abs(g - fd) / max(1.0, abs(g)))
    return worst
