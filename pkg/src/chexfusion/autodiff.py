"""Minimal reverse-mode automatic differentiation on numpy arrays.

A Tape records every primitive application (op kind, inputs, attrs, saved
values, output).  Backward walks the tape in reverse and accumulates
vector-Jacobian products.  All math is float64 by default; stochastic
primitives (dropout, stochastic depth) draw their randomness at record time
and save it, so replaying a tape is bitwise reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Raised when primitive inputs do not conform."""


class DomainError(ValueError):
    """Raised when a primitive is evaluated outside its domain (e.g. log of x <= 0)."""


def derive_seed(*parts) -> int:
    """Derive a 64-bit seed from a tuple of ints/strings (counter-based reproducibility)."""
    import hashlib

    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little")


def derive_rng(*parts) -> np.random.Generator:
    """Counter-based generator keyed by (seed, name, step, ...)."""
    return np.random.Generator(np.random.Philox(key=derive_seed(*parts)))


class Tensor:
    """Immutable-by-convention array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_uid")
    _next_uid = 0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        Tensor._next_uid += 1
        self._uid = Tensor._next_uid

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through eval_primitive so they land on the tape
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return sub(_as_tensor(0.0), self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    kind: str
    inputs: tuple
    output: Tensor
    attrs: dict
    saved: dict = field(default_factory=dict)


@dataclass
class Tape:
    """Ordered record of primitive applications."""

    nodes: list = field(default_factory=list)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def replay(self):
        """Re-run every recorded primitive; returns the recomputed output arrays.

        Stochastic primitives reuse their saved draws, so the result is
        bitwise identical to the recorded outputs.
        """
        outs = []
        for node in self.nodes:
            data = [t.data for t in node.inputs]
            outs.append(_FORWARD[node.kind](data, node.attrs, node.saved))
        return outs


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach grad's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_finite(kind, out):
    if not np.all(np.isfinite(out)):
        raise DomainError(f"{kind}: non-finite output")
    return out


# --- forward rules: fn(list_of_input_arrays, attrs, saved) -> output array ---

def _fw_matmul(xs, attrs, saved):
    a, b = xs
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot contract {a.shape} with {b.shape}")
    return a @ b


def _fw_add(xs, attrs, saved):
    return _bcast_op("add", xs, np.add)


def _fw_sub(xs, attrs, saved):
    return _bcast_op("sub", xs, np.subtract)


def _fw_mul(xs, attrs, saved):
    return _bcast_op("mul", xs, np.multiply)


def _bcast_op(kind, xs, fn):
    a, b = xs
    try:
        return fn(a, b)
    except ValueError as e:
        raise ShapeError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from e


def _fw_sigmoid(xs, attrs, saved):
    (x,) = xs
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _fw_exp(xs, attrs, saved):
    return _check_finite("exp", np.exp(xs[0]))


def _fw_log(xs, attrs, saved):
    (x,) = xs
    if np.any(x <= 0):
        raise DomainError("log: non-positive argument")
    return np.log(x)


def _fw_clamp_min(xs, attrs, saved):
    return np.maximum(xs[0], attrs["floor"])


def _fw_clip(xs, attrs, saved):
    return np.clip(xs[0], attrs["lo"], attrs["hi"])


def _fw_powc(xs, attrs, saved):
    return _check_finite("powc", np.power(xs[0], attrs["exponent"]))


def _fw_softmax(xs, attrs, saved):
    (x,) = xs
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _fw_layernorm(xs, attrs, saved):
    (x,) = xs
    eps = attrs["eps"]
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _fw_gelu(xs, attrs, saved):
    (x,) = xs
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _fw_affine(xs, attrs, saved):
    x, w, b = xs
    if x.shape[-1] != w.shape[-1]:
        raise ShapeError(f"affine: input dim {x.shape[-1]} != weight dim {w.shape[-1]}")
    return x @ w.T + b


def _fw_gather_rows(xs, attrs, saved):
    (table,) = xs
    idx = attrs["indices"]
    if np.any(np.asarray(idx) >= table.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for table with {table.shape[0]} rows")
    return table[idx]


def _fw_concat(xs, attrs, saved):
    try:
        return np.concatenate(xs, axis=attrs["axis"])
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from e


def _fw_transpose(xs, attrs, saved):
    return np.transpose(xs[0], attrs["perm"])


def _fw_reshape(xs, attrs, saved):
    (x,) = xs
    shape = attrs["shape"]
    try:
        return x.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from e


def _fw_reduce_sum(xs, attrs, saved):
    return xs[0].sum(axis=attrs["axes"], keepdims=attrs["keepdims"])


def _fw_reduce_mean(xs, attrs, saved):
    return xs[0].mean(axis=attrs["axes"], keepdims=attrs["keepdims"])


def _fw_dropout(xs, attrs, saved):
    (x,) = xs
    p = attrs["p"]
    if "mask" not in saved:
        saved["mask"] = (attrs.pop("rng").random(x.shape) >= p).astype(np.float64)
    return x * saved["mask"] / (1.0 - p)


def _fw_depth_gate(xs, attrs, saved):
    (x,) = xs
    p = attrs["p"]
    if "keep" not in saved:
        saved["keep"] = 1.0 if attrs.pop("rng").random() >= p else 0.0
    return x * (saved["keep"] / (1.0 - p))


_FORWARD = {
    "matmul": _fw_matmul,
    "add": _fw_add,
    "sub": _fw_sub,
    "mul": _fw_mul,
    "sigmoid": _fw_sigmoid,
    "exp": _fw_exp,
    "log": _fw_log,
    "clamp_min": _fw_clamp_min,
    "clip": _fw_clip,
    "powc": _fw_powc,
    "softmax": _fw_softmax,
    "layernorm": _fw_layernorm,
    "gelu": _fw_gelu,
    "affine": _fw_affine,
    "gather_rows": _fw_gather_rows,
    "concat": _fw_concat,
    "transpose": _fw_transpose,
    "reshape": _fw_reshape,
    "reduce_sum": _fw_reduce_sum,
    "reduce_mean": _fw_reduce_mean,
    "dropout": _fw_dropout,
    "depth_gate": _fw_depth_gate,
}


# --- backward rules: fn(node, grad_out) -> list of grads aligned with inputs ---

def _bw_matmul(node, g):
    a, b = (t.data for t in node.inputs)
    ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
    gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
    return [ga, gb]


def _bw_add(node, g):
    a, b = node.inputs
    return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]


def _bw_sub(node, g):
    a, b = node.inputs
    return [_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)]


def _bw_mul(node, g):
    a, b = node.inputs
    return [_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)]


def _bw_sigmoid(node, g):
    y = node.output.data
    return [g * y * (1.0 - y)]


def _bw_exp(node, g):
    return [g * node.output.data]


def _bw_log(node, g):
    return [g / node.inputs[0].data]


def _bw_clamp_min(node, g):
    x = node.inputs[0].data
    return [g * (x > node.attrs["floor"])]


def _bw_clip(node, g):
    x = node.inputs[0].data
    inside = (x > node.attrs["lo"]) & (x < node.attrs["hi"])
    return [g * inside]


def _bw_powc(node, g):
    p = node.attrs["exponent"]
    if p == 0:
        return [np.zeros_like(node.inputs[0].data)]
    x = node.inputs[0].data
    return [g * p * np.power(x, p - 1)]


def _bw_softmax(node, g):
    y = node.output.data
    return [(g - (g * y).sum(axis=-1, keepdims=True)) * y]


def _bw_layernorm(node, g):
    x = node.inputs[0].data
    eps = node.attrs["eps"]
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv
    gm = g.mean(axis=-1, keepdims=True)
    gym = (g * y).mean(axis=-1, keepdims=True)
    return [inv * (g - gm - y * gym)]


def _bw_gelu(node, g):
    x = node.inputs[0].data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return [g * (cdf + x * pdf)]


def _bw_affine(node, g):
    x, w, b = (t.data for t in node.inputs)
    gx = g @ w
    g2 = g.reshape(-1, g.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    gw = g2.T @ x2
    gb = g2.sum(axis=0)
    return [gx, gw, gb]


def _bw_gather_rows(node, g):
    table = node.inputs[0].data
    gt = np.zeros_like(table)
    np.add.at(gt, node.attrs["indices"], g)
    return [gt]


def _bw_concat(node, g):
    axis = node.attrs["axis"]
    sizes = [t.data.shape[axis] for t in node.inputs]
    splits = np.cumsum(sizes)[:-1]
    return list(np.split(g, splits, axis=axis))


def _bw_transpose(node, g):
    perm = node.attrs["perm"]
    inv = np.argsort(perm)
    return [np.transpose(g, inv)]


def _bw_reshape(node, g):
    return [g.reshape(node.inputs[0].data.shape)]


def _bw_reduce_sum(node, g):
    x = node.inputs[0].data
    axes = node.attrs["axes"]
    if not node.attrs["keepdims"] and axes is not None:
        for ax in sorted(np.atleast_1d(axes)):
            g = np.expand_dims(g, ax)
    return [np.broadcast_to(g, x.shape).copy()]


def _bw_reduce_mean(node, g):
    x = node.inputs[0].data
    axes = node.attrs["axes"]
    if axes is None:
        n = x.size
    else:
        n = int(np.prod([x.shape[a] for a in np.atleast_1d(axes)]))
    (gs,) = _bw_reduce_sum(node, np.asarray(g, dtype=np.float64))
    return [gs / n]


def _bw_dropout(node, g):
    return [g * node.saved["mask"] / (1.0 - node.attrs["p"])]


def _bw_depth_gate(node, g):
    return [g * (node.saved["keep"] / (1.0 - node.attrs["p"]))]


_BACKWARD = {
    "matmul": _bw_matmul,
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "sigmoid": _bw_sigmoid,
    "exp": _bw_exp,
    "log": _bw_log,
    "clamp_min": _bw_clamp_min,
    "clip": _bw_clip,
    "powc": _bw_powc,
    "softmax": _bw_softmax,
    "layernorm": _bw_layernorm,
    "gelu": _bw_gelu,
    "affine": _bw_affine,
    "gather_rows": _bw_gather_rows,
    "concat": _bw_concat,
    "transpose": _bw_transpose,
    "reshape": _bw_reshape,
    "reduce_sum": _bw_reduce_sum,
    "reduce_mean": _bw_reduce_mean,
    "dropout": _bw_dropout,
    "depth_gate": _bw_depth_gate,
}


def eval_primitive(kind: str, inputs, attrs: dict | None = None) -> Tensor:
    """Evaluate one primitive; record it on the active tape when present."""
    if kind not in _FORWARD:
        raise ValueError(f"unknown primitive: {kind}")
    inputs = tuple(_as_tensor(x) for x in inputs)
    attrs = dict(attrs or {})
    saved: dict = {}
    out = Tensor(_FORWARD[kind]([t.data for t in inputs], attrs, saved))
    tape = active_tape()
    if tape is not None:
        tape.nodes.append(Node(kind, inputs, out, attrs, saved))
    return out


# thin wrappers, one per primitive

def matmul(a, b):
    return eval_primitive("matmul", [a, b])


def add(a, b):
    return eval_primitive("add", [a, b])


def sub(a, b):
    return eval_primitive("sub", [a, b])


def mul(a, b):
    return eval_primitive("mul", [a, b])


def sigmoid(x):
    return eval_primitive("sigmoid", [x])


def exp(x):
    return eval_primitive("exp", [x])


def log(x):
    return eval_primitive("log", [x])


def clamp_min(x, floor: float):
    return eval_primitive("clamp_min", [x], {"floor": float(floor)})


def clip(x, lo: float, hi: float):
    return eval_primitive("clip", [x], {"lo": float(lo), "hi": float(hi)})


def powc(x, exponent: float):
    return eval_primitive("powc", [x], {"exponent": float(exponent)})


def softmax(x):
    return eval_primitive("softmax", [x])


def layernorm(x, eps: float = 1e-6):
    return eval_primitive("layernorm", [x], {"eps": float(eps)})


def gelu(x):
    return eval_primitive("gelu", [x])


def affine(x, w, b):
    return eval_primitive("affine", [x, w, b])


def gather_rows(table, indices):
    return eval_primitive("gather_rows", [table], {"indices": list(int(i) for i in indices)})


def concat(tensors, axis: int = 0):
    return eval_primitive("concat", list(tensors), {"axis": int(axis)})


def transpose(x, perm):
    return eval_primitive("transpose", [x], {"perm": tuple(int(p) for p in perm)})


def reshape(x, shape):
    return eval_primitive("reshape", [x], {"shape": tuple(int(s) for s in shape)})


def reduce_sum(x, axes=None, keepdims: bool = False):
    axes = None if axes is None else tuple(np.atleast_1d(axes).tolist())
    return eval_primitive("reduce_sum", [x], {"axes": axes, "keepdims": keepdims})


def reduce_mean(x, axes=None, keepdims: bool = False):
    axes = None if axes is None else tuple(np.atleast_1d(axes).tolist())
    return eval_primitive("reduce_mean", [x], {"axes": axes, "keepdims": keepdims})


def dropout(x, p: float, rng: np.random.Generator):
    if p <= 0:
        return _as_tensor(x)
    return eval_primitive("dropout", [x], {"p": float(p), "rng": rng})


def depth_gate(x, p: float, rng: np.random.Generator):
    """Stochastic-depth gate: scales a residual branch by 0 or 1/(1-p)."""
    if p <= 0:
        return _as_tensor(x)
    return eval_primitive("depth_gate", [x], {"p": float(p), "rng": rng})


class Parameter:
    """Named trainable (or frozen) tensor."""

    __slots__ = ("name", "value", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        self.name = name
        self.value = Tensor(value, requires_grad=trainable)
        self.trainable = trainable

    @property
    def grad(self):
        return self.value.grad

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape}, trainable={self.trainable})"


def backward(root: Tensor, tape: Tape) -> dict:
    """Accumulate gradients of a scalar root over the tape.

    Attaches .grad to every requires_grad leaf tensor and returns a map
    uid -> gradient array for all tensors that received one.
    """
    if root.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {root._uid: np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.output._uid)
        if g is None:
            continue
        for t, gi in zip(node.inputs, _BACKWARD[node.kind](node, g)):
            if t._uid in grads:
                grads[t._uid] = grads[t._uid] + gi
            else:
                grads[t._uid] = gi
    recorded_outputs = {n.output._uid for n in tape.nodes}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and t._uid not in recorded_outputs:
                got = grads.get(t._uid)
                t.grad = np.zeros_like(t.data) if got is None else got
    return grads


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_index: int
    passed: bool


@dataclass
class GradCheckReport:
    entries: list
    passed: bool
    seeds: list

    def summary(self) -> str:
        lines = []
        for e in self.entries:
            status = "ok" if e.passed else "FAIL"
            lines.append(f"{status:4s} {e.name:40s} max_rel_err={e.max_rel_err:.3e}")
        return "\n".join(lines)


def grad_check(builder, seeds, h: float = 1e-6, tol: float = 1e-5,
               max_entries_per_param: int | None = None) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    builder(seed) must return (loss_fn, params) where loss_fn() evaluates a
    scalar Tensor from the current parameter values and params is a list of
    Parameter.  Relative error: |ga - gn| / max(1e-8, |ga| + |gn|).
    """
    entries = []
    for seed in seeds:
        loss_fn, params = builder(seed)
        with Tape() as tape:
            loss = loss_fn()
        if not np.isfinite(loss.item()):
            raise DomainError(f"grad_check: non-finite loss for seed {seed}")
        backward(loss, tape)
        analytic = {p.name: (np.zeros_like(p.value.data) if p.value.grad is None
                             else p.value.grad.copy())
                    for p in params if p.trainable}
        for p in params:
            if not p.trainable:
                continue
            flat = p.value.data.reshape(-1)
            ga = analytic[p.name].reshape(-1)
            idxs = range(flat.size)
            if max_entries_per_param is not None and flat.size > max_entries_per_param:
                pick = derive_rng(seed, "gradcheck", p.name)
                idxs = sorted(pick.choice(flat.size, size=max_entries_per_param, replace=False))
            worst = 0.0
            worst_i = -1
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + h
                lp = loss_fn().item()
                flat[i] = orig - h
                lm = loss_fn().item()
                flat[i] = orig
                gn = (lp - lm) / (2.0 * h)
                rel = abs(ga[i] - gn) / max(1e-8, abs(ga[i]) + abs(gn))
                if rel > worst:
                    worst, worst_i = rel, i
            entries.append(GradCheckEntry(f"seed{seed}:{p.name}", worst, worst_i, worst <= tol))
    return GradCheckReport(entries, all(e.passed for e in entries), list(seeds))
