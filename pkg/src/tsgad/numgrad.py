"""Float64 tensors with tape-based reverse-mode differentiation.

Every primitive applied to a `Tensor` appends one node to its `Tape`;
operands always precede results, so `Tape.backward` is a single reverse
sweep that visits each node exactly once. Intermediates can be labelled
with `Tape.tag` and their gradients read back via `Gradients.at_tag`,
which is how the trainer extracts the shared-representation gradient
without a second graph traversal.

Any NaN or Inf appearing in a forward result aborts immediately with the
name of the offending node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

LEAKY_SLOPE = 0.2  # negative-side slope of the graph attention scores

PARTITIONS = ("shared", "pred", "recon")


class ShapeError(ValueError):
    """Operands do not satisfy a primitive's shape contract."""


class NumericError(FloatingPointError):
    """A forward result contained NaN or Inf."""


class Tensor:
    """Handle to an ndarray plus its position on a tape.

    Tensor data is treated as immutable once created; reusing a tensor as
    the operand of several downstream ops is fine and its gradient
    contributions accumulate.
    """

    __slots__ = ("data", "tape", "idx")

    def __init__(self, data: np.ndarray, tape: "Tape", idx: int):
        self.data = data
        self.tape = tape
        self.idx = idx

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.data.shape}, node={self.idx})"


class _Node:
    __slots__ = ("op", "parents", "vjps", "shape")

    def __init__(self, op, parents, vjps, shape):
        self.op = op
        self.parents = parents
        self.vjps = vjps
        self.shape = shape


class Tape:
    """Append-only record of primitive applications.

    With record=False the same forward code runs without bookkeeping,
    which the finite-difference harness uses for cheap value-only passes.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[_Node] = []
        self.tags: dict[str, int] = {}

    def leaf(self, data) -> Tensor:
        """Enter a constant or parameter array onto the tape."""
        # asarray with order="C" keeps 0-d shapes (ascontiguousarray would not)
        arr = np.asarray(data, dtype=np.float64, order="C")
        return self._emit("leaf", arr, (), ())

    def _emit(self, op: str, out: np.ndarray, parents: tuple, vjps: tuple) -> Tensor:
        if not np.isfinite(out).all():
            raise NumericError(
                f"non-finite values produced by '{op}' (node {len(self.nodes)})"
            )
        if not self.record:
            return Tensor(out, self, -1)
        idx = len(self.nodes)
        self.nodes.append(_Node(op, parents, vjps, out.shape))
        return Tensor(out, self, idx)

    def tag(self, t: Tensor, label: str) -> Tensor:
        if self.record:
            self.tags[label] = t.idx
        return t

    def backward(self, out: Tensor, seed: np.ndarray | None = None) -> "Gradients":
        """Reverse sweep from `out`; returns gradients for every recorded node.

        `out` must be scalar unless an explicit seed (the output adjoint)
        of matching shape is supplied.
        """
        if not self.record:
            raise ValueError("cannot run backward on a non-recording tape")
        if out.tape is not self or out.idx < 0:
            raise ValueError("output tensor does not belong to this tape")
        if seed is None:
            if out.data.size != 1:
                raise ShapeError(
                    f"backward requires a scalar loss, got shape {out.data.shape}"
                )
            seed_arr = np.ones_like(out.data)
        else:
            seed_arr = np.asarray(seed, dtype=np.float64)
            if seed_arr.shape != out.data.shape:
                raise ShapeError("seed shape must match the output shape")
        slots: list[np.ndarray | None] = [None] * (out.idx + 1)
        slots[out.idx] = seed_arr
        nodes = self.nodes
        for i in range(out.idx, -1, -1):
            g = slots[i]
            if g is None:
                continue
            node = nodes[i]
            for p, vjp in zip(node.parents, node.vjps):
                contrib = vjp(g)
                prev = slots[p]
                slots[p] = contrib if prev is None else prev + contrib
        return Gradients(self, slots)


class Gradients:
    """Read-only gradient map produced by one backward sweep.

    Nodes not on the loss path report zero gradients of the right shape.
    """

    def __init__(self, tape: Tape, slots: list):
        self._tape = tape
        self._slots = slots

    def wrt(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape or t.idx < 0:
            raise ValueError("tensor does not belong to the differentiated tape")
        if t.idx >= len(self._slots) or self._slots[t.idx] is None:
            return np.zeros(self._tape.nodes[t.idx].shape)
        return self._slots[t.idx]

    def at_tag(self, label: str) -> np.ndarray:
        if label not in self._tape.tags:
            raise KeyError(f"unknown tape tag '{label}'")
        idx = self._tape.tags[label]
        if idx >= len(self._slots) or self._slots[idx] is None:
            return np.zeros(self._tape.nodes[idx].shape)
        return self._slots[idx]


def grad_at_tag(loss: Tensor, label: str) -> np.ndarray:
    """Gradient of a scalar loss with respect to the tagged intermediate."""
    return loss.tape.backward(loss).at_tag(label)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _join(a: Tensor, b: Tensor) -> Tape:
    if a.tape is not b.tape:
        raise ValueError("operands were recorded on different tapes")
    return a.tape


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _forward(op: str, fn):
    try:
        return fn()
    except ValueError as exc:
        raise ShapeError(f"{op}: {exc}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _join(a, b)
    out = _forward("add", lambda: a.data + b.data)
    sa, sb = a.data.shape, b.data.shape
    return tape._emit(
        "add",
        out,
        (a.idx, b.idx),
        (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(g, sb)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _join(a, b)
    out = _forward("sub", lambda: a.data - b.data)
    sa, sb = a.data.shape, b.data.shape
    return tape._emit(
        "sub",
        out,
        (a.idx, b.idx),
        (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(-g, sb)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _join(a, b)
    out = _forward("mul", lambda: a.data * b.data)
    ad, bd = a.data, b.data
    return tape._emit(
        "mul",
        out,
        (a.idx, b.idx),
        (
            lambda g: _unbroadcast(g * bd, ad.shape),
            lambda g: _unbroadcast(g * ad, bd.shape),
        ),
    )


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _matmul_grad(g: np.ndarray, a: np.ndarray, b: np.ndarray, wrt: str) -> np.ndarray:
    # Promote 1-D operands to matrices, mirroring numpy's matmul rules, so a
    # single rule (dA = g B^T, dB = A^T g, plus batch unbroadcast) covers all
    # supported shapes.
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    if a.ndim == 1 and b.ndim == 1:
        g2 = g.reshape(1, 1)
    elif a.ndim == 1:
        g2 = g[..., None, :]
    elif b.ndim == 1:
        g2 = g[..., :, None]
    else:
        g2 = g
    if wrt == "a":
        out = _unbroadcast(g2 @ _swap(b2), a2.shape)
        return out[0] if a.ndim == 1 else out
    out = _unbroadcast(_swap(a2) @ g2, b2.shape)
    return out[:, 0] if b.ndim == 1 else out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _join(a, b)
    out = _forward("matmul", lambda: a.data @ b.data)
    ad, bd = a.data, b.data
    return tape._emit(
        "matmul",
        np.asarray(out, dtype=np.float64),
        (a.idx, b.idx),
        (
            lambda g: _matmul_grad(g, ad, bd, "a"),
            lambda g: _matmul_grad(g, ad, bd, "b"),
        ),
    )


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat needs at least one operand")
    tape = parts[0].tape
    for p in parts[1:]:
        _join(parts[0], p)
    out = _forward("concat", lambda: np.concatenate([p.data for p in parts], axis=axis))
    ax = axis % out.ndim
    offsets = np.cumsum([0] + [p.data.shape[ax] for p in parts])

    def make_vjp(lo: int, hi: int):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            return g[tuple(sl)]

        return vjp

    vjps = tuple(make_vjp(offsets[i], offsets[i + 1]) for i in range(len(parts)))
    return tape._emit("concat", out, tuple(p.idx for p in parts), vjps)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return x.tape._emit(
        "relu", np.where(mask, x.data, 0.0), (x.idx,), (lambda g: g * mask,)
    )


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope)
    return x.tape._emit(
        "leaky_relu", x.data * factor, (x.idx,), (lambda g: g * factor,)
    )


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(over="ignore"):
        out = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-xd)), np.exp(xd) / (1.0 + np.exp(xd)))
    return x.tape._emit("sigmoid", out, (x.idx,), (lambda g: g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return x.tape._emit("tanh", out, (x.idx,), (lambda g: g * (1.0 - out * out),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return x.tape._emit("exp", out, (x.idx,), (lambda g: g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return x.tape._emit("log", out, (x.idx,), (lambda g: g / xd,))


def softmax(x: Tensor, axis: int) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return x.tape._emit("softmax", out, (x.idx,), (vjp,))


def l1_norm(x: Tensor) -> Tensor:
    """Sum of absolute values, as a scalar."""
    xd = x.data
    out = np.asarray(np.abs(xd).sum())
    return x.tape._emit("l1_norm", out, (x.idx,), (lambda g: g * np.sign(xd),))


def sq_l2_norm(x: Tensor) -> Tensor:
    """Sum of squared values, as a scalar."""
    xd = x.data
    out = np.asarray((xd * xd).sum())
    return x.tape._emit("sq_l2_norm", out, (x.idx,), (lambda g: g * (2.0 * xd),))


def mean(x: Tensor) -> Tensor:
    """Mean of all elements, as a scalar."""
    size = x.data.size
    shape = x.data.shape
    out = np.asarray(x.data.mean())
    return x.tape._emit(
        "mean", out, (x.idx,), (lambda g: np.full(shape, float(g) / size),)
    )


# Plumbing primitives. Not part of the mathematical core but needed to stitch
# graphs together (shape bookkeeping only; gradients pass through).


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = x.data.shape
    out = _forward("reshape", lambda: x.data.reshape(shape))
    return x.tape._emit("reshape", out, (x.idx,), (lambda g: g.reshape(orig),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.data.ndim < 2:
        raise ShapeError("transpose needs at least 2 dimensions")
    return x.tape._emit(
        "transpose", _swap(x.data), (x.idx,), (lambda g: _swap(g),)
    )


def take_col(x: Tensor, i: int) -> Tensor:
    """Select index i along the last axis."""
    if x.data.ndim < 1 or not -x.data.shape[-1] <= i < x.data.shape[-1]:
        raise ShapeError(f"take_col: index {i} out of range for shape {x.data.shape}")
    shape = x.data.shape

    def vjp(g):
        z = np.zeros(shape)
        z[..., i] = g
        return z

    return x.tape._emit("take_col", x.data[..., i], (x.idx,), (vjp,))


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = x.data.shape
    out = _forward("broadcast_to", lambda: np.broadcast_to(x.data, shape))
    return x.tape._emit(
        "broadcast_to", out, (x.idx,), (lambda g: _unbroadcast(g, orig),)
    )


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    return x.tape._emit("scale", x.data * c, (x.idx,), (lambda g: g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    """Add a python scalar constant."""
    return x.tape._emit("shift", x.data + float(c), (x.idx,), (lambda g: g,))


PRIMITIVE_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "concat": concat,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "softmax": softmax,
    "l1_norm": l1_norm,
    "sq_l2_norm": sq_l2_norm,
    "mean": mean,
    "reshape": reshape,
    "transpose": transpose,
    "take_col": take_col,
    "broadcast_to": broadcast_to,
    "scale": scale,
    "shift": shift,
}


def primitive_forward(op: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by name (generic dispatch used by tooling and tests)."""
    if op not in PRIMITIVE_OPS:
        raise KeyError(f"unknown primitive '{op}'")
    return PRIMITIVE_OPS[op](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# parameter storage and initialization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamSpec:
    """Shape plus initialization rule for one named parameter tensor."""

    shape: tuple[int, ...]
    kind: str = "weight"  # weight | bias | embedding
    fan_in: int | None = None  # defaults to shape[0] for weights


@dataclass
class ParamStore:
    """Named float64 parameter tensors partitioned into shared/pred/recon."""

    groups: dict[str, dict[str, np.ndarray]]
    rng_seed: int

    def flat(self) -> Iterator[tuple[str, str, np.ndarray]]:
        for group, tensors in self.groups.items():
            for name, arr in tensors.items():
                yield group, name, arr

    def total_params(self) -> int:
        return sum(arr.size for _, _, arr in self.flat())

    def copy(self) -> "ParamStore":
        return ParamStore(
            {g: {n: a.copy() for n, a in ts.items()} for g, ts in self.groups.items()},
            self.rng_seed,
        )


Layout = dict[str, dict[str, ParamSpec]]


def init_params(layout: Layout, seed: int) -> ParamStore:
    """Materialize a layout: weights uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)],
    biases zero, embeddings re-jittered if a row comes out degenerate."""
    rng = np.random.default_rng(seed)
    groups: dict[str, dict[str, np.ndarray]] = {}
    for gname, specs in layout.items():
        tensors: dict[str, np.ndarray] = {}
        for name, spec in specs.items():
            if spec.kind == "bias":
                tensors[name] = np.zeros(spec.shape)
                continue
            fan = spec.fan_in if spec.fan_in is not None else spec.shape[0]
            bound = 1.0 / math.sqrt(fan)
            arr = rng.uniform(-bound, bound, spec.shape)
            if spec.kind == "embedding":
                # no sensor embedding may be the zero vector
                for r in range(arr.shape[0]):
                    while np.linalg.norm(arr[r]) < 1e-12:
                        arr[r] = rng.uniform(-bound, bound, arr.shape[1:])
            tensors[name] = arr
        groups[gname] = tensors
    return ParamStore(groups, seed)


def bind(tape: Tape, store: ParamStore) -> dict[str, dict[str, Tensor]]:
    """Mount every parameter of a store onto a tape as leaf tensors."""
    return {
        g: {n: tape.leaf(arr) for n, arr in ts.items()}
        for g, ts in store.groups.items()
    }


def param_grads(
    grads: Gradients, bound: dict[str, dict[str, Tensor]]
) -> dict[str, dict[str, np.ndarray]]:
    """Collect gradients for every bound parameter (zeros when off-path)."""
    return {g: {n: grads.wrt(t) for n, t in ts.items()} for g, ts in bound.items()}
