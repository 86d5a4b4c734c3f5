"""Dense float64 arrays with taped reverse-mode differentiation.

Everything trainable in this package routes through the small fixed op
catalog below: affine maps, elementwise arithmetic, SiLU/tanh, softmax,
scaled-dot-product cross-attention, row gathers, reductions and a squared
error. Each op validates shapes and finiteness up front, computes with
numpy in float64, and records itself on the active tape so `backward` can
replay the ops in exact reverse execution order.

Arrays are treated as immutable once recorded; one training step mutates
parameters at a time (single-writer contract).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteValue(ValueError):
    """An operand (or gradient) contains NaN or infinity."""


class TapeError(RuntimeError):
    """Backward was asked about a value the tape never produced."""


def _as_f64(data) -> np.ndarray:
    # note: ascontiguousarray would promote 0-d scalars to 1-d
    return np.asarray(data, dtype=np.float64, order="C")


class Tensor:
    """A float64 array, optionally a trainable parameter.

    Tensors are created either as leaves (constants or parameters) or as
    op outputs; op outputs remember the node that produced them.
    """

    __slots__ = ("data", "param", "name", "node")

    def __init__(self, data, param: bool = False, name: str | None = None):
        self.data = _as_f64(data)
        self.param = param
        self.name = name
        self.node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = self.name or ("param" if self.param else "tensor")
        return f"Tensor({tag}, shape={self.data.shape})"


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, param=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    """One executed op: inputs, output and the local backward rule."""

    __slots__ = ("op", "inputs", "output", "backward_fn", "tape")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
                 tape: "Tape"):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Ordered record of executed ops; replayed backward for gradients."""

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def nodes(self) -> list[Node]:
        return self._nodes


_TAPE_STACK: list[Tape] = []


class recording:
    """Context manager enabling op recording onto `tape`."""

    def __init__(self, tape: Tape):
        self.tape = tape

    def __enter__(self) -> Tape:
        _TAPE_STACK.append(self.tape)
        return self.tape

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _check_finite(op: str, name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteValue(f"{op}: operand '{name}' contains non-finite values")


def _needs_grad(t: Tensor) -> bool:
    return t.param or t.node is not None


def apply_op(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
             backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Create an op output and record it on the active tape, if any.

    `backward_fn(upstream)` must return one gradient array per input
    (None for inputs that need no gradient). Other modules use this hook
    to add ops with custom backward rules (e.g. hash-grid lookups).
    """
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        node = Node(op, tuple(inputs), out, backward_fn, tape)
        out.node = node
        tape._nodes.append(node)
    return out


def backward(tape: Tape, loss: Tensor,
             params: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate gradients of a scalar loss for every reachable tensor.

    Replays the tape in exact reverse execution order. Returns a map from
    parameter tensors to gradient arrays; when `params` is given, every
    listed parameter appears in the map, unreached ones with exact zeros.
    """
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None or loss.node.tape is not tape:
        raise TapeError("backward: loss was not produced under this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    by_id: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape._nodes):
        up = grads.get(id(node.output))
        if up is None:
            continue
        local = node.backward_fn(up)
        for inp, g in zip(node.inputs, local):
            if g is None or not _needs_grad(inp):
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                by_id[key] = inp

    out: dict[Tensor, np.ndarray] = {}
    for key, g in grads.items():
        t = by_id[key]
        if t.param:
            out[t] = g
    if params is not None:
        for p in params:
            if p not in out:
                out[p] = np.zeros_like(p.data)
    return out


# ---------------------------------------------------------------------------
# op catalog


def _binary(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} are not "
                            "equal and neither operand is scalar")
    _check_finite(op, "lhs", a.data)
    _check_finite(op, "rhs", b.data)


def _reduce_to(shape: tuple[int, ...], g: np.ndarray) -> np.ndarray:
    # undo scalar broadcast in binary-op gradients
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary("add", a, b)
    out = a.data + b.data

    def bwd(up):
        return _reduce_to(a.shape, up), _reduce_to(b.shape, up)

    return apply_op("add", (a, b), out, bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary("sub", a, b)
    out = a.data - b.data

    def bwd(up):
        return _reduce_to(a.shape, up), _reduce_to(b.shape, -up)

    return apply_op("sub", (a, b), out, bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary("mul", a, b)
    out = a.data * b.data
    need_a, need_b = _needs_grad(a), _needs_grad(b)

    def bwd(up):
        return (_reduce_to(a.shape, up * b.data) if need_a else None,
                _reduce_to(b.shape, up * a.data) if need_b else None)

    return apply_op("mul", (a, b), out, bwd)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    _check_finite("scale", "x", a.data)
    if not math.isfinite(s):
        raise NonFiniteValue("scale: factor is non-finite")
    out = a.data * s

    def bwd(up):
        return (up * s,)

    return apply_op("scale", (a,), out, bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    _check_finite("matmul", "lhs", a.data)
    _check_finite("matmul", "rhs", b.data)
    out = a.data @ b.data
    need_a, need_b = _needs_grad(a), _needs_grad(b)

    def bwd(up):
        return (up @ b.data.T if need_a else None,
                a.data.T @ up if need_b else None)

    return apply_op("matmul", (a, b), out, bwd)


def affine(x, w, b) -> Tensor:
    """y = x @ w + b with x (N, d_in), w (d_in, d_out), b (d_out,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"affine: input {x.shape} does not chain with weights {w.shape}")
    if b.data.ndim != 1 or b.shape[0] != w.shape[1]:
        raise ShapeMismatch(f"affine: bias {b.shape} does not match weights {w.shape}")
    _check_finite("affine", "x", x.data)
    _check_finite("affine", "weights", w.data)
    _check_finite("affine", "bias", b.data)
    out = x.data @ w.data + b.data
    need_x = _needs_grad(x)

    def bwd(up):
        return (up @ w.data.T if need_x else None,
                x.data.T @ up, up.sum(axis=0))

    return apply_op("affine", (x, w, b), out, bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # stable for all x via the tanh identity
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x) -> Tensor:
    x = as_tensor(x)
    _check_finite("silu", "x", x.data)
    sig = _sigmoid(x.data)
    out = x.data * sig

    def bwd(up):
        d = 1.0 - sig
        d *= x.data
        d += 1.0
        d *= sig
        d *= up
        return (d,)

    return apply_op("silu", (x,), out, bwd)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    _check_finite("tanh", "x", x.data)
    out = np.tanh(x.data)

    def bwd(up):
        return (up * (1.0 - out * out),)

    return apply_op("tanh", (x,), out, bwd)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite("softmax", "x", x.data)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(up):
        dot = np.sum(up * out, axis=axis, keepdims=True)
        return (out * (up - dot),)

    return apply_op("softmax", (x,), out, bwd)


def attention(q, k, v) -> Tensor:
    """Scaled-dot-product cross-attention.

    Queries (Nq, d_k) attend over keys (Nt, d_k) to mix value rows
    (Nt, d_v); output is (Nq, d_v), a convex combination of value rows.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ShapeMismatch("attention: q, k, v must be 2-D")
    if q.shape[1] != k.shape[1]:
        raise ShapeMismatch(f"attention: query dim {q.shape} vs key dim {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeMismatch(f"attention: {k.shape[0]} keys vs {v.shape[0]} values")
    for nm, t in (("q", q), ("k", k), ("v", v)):
        _check_finite("attention", nm, t.data)

    inv = 1.0 / math.sqrt(q.shape[1])
    scores = (q.data @ k.data.T) * inv
    scores -= np.max(scores, axis=1, keepdims=True)
    e = np.exp(scores)
    weights = e / np.sum(e, axis=1, keepdims=True)
    out = weights @ v.data
    need_q, need_k = _needs_grad(q), _needs_grad(k)

    def bwd(up):
        dv = weights.T @ up
        da = up @ v.data.T
        ds = weights * (da - np.sum(da * weights, axis=1, keepdims=True))
        dq = (ds @ k.data) * inv if need_q else None
        dk = (ds.T @ q.data) * inv if need_k else None
        return dq, dk, dv

    return apply_op("attention", (q, k, v), out, bwd)


def gather_rows(x, indices) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if x.data.ndim != 2:
        raise ShapeMismatch(f"gather_rows: expected 2-D input, got {x.shape}")
    if idx.min(initial=0) < 0 or idx.max(initial=-1) >= x.shape[0]:
        raise ShapeMismatch(f"gather_rows: index out of range for {x.shape[0]} rows")
    _check_finite("gather_rows", "x", x.data)
    out = x.data[idx]

    def bwd(up):
        g = np.zeros_like(x.data)
        np.add.at(g, idx, up)
        return (g,)

    return apply_op("gather_rows", (x,), out, bwd)


def sum_(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    _check_finite("sum", "x", x.data)
    out = np.sum(x.data, axis=axis)

    def bwd(up):
        if axis is None:
            return (np.full_like(x.data, float(up)),)
        return (np.broadcast_to(np.expand_dims(up, axis), x.shape).copy(),)

    return apply_op("sum", (x,), out, bwd)


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    _check_finite("mean", "x", x.data)
    out = np.mean(x.data, axis=axis)
    n = x.data.size if axis is None else x.shape[axis]

    def bwd(up):
        if axis is None:
            return (np.full_like(x.data, float(up) / n),)
        return (np.broadcast_to(np.expand_dims(up, axis), x.shape) / n,)

    return apply_op("mean", (x,), out, bwd)


def squared_error(a, b) -> Tensor:
    """Mean over elements of (a - b)**2, reduced to a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"squared_error: shapes {a.shape} and {b.shape} differ")
    _check_finite("squared_error", "lhs", a.data)
    _check_finite("squared_error", "rhs", b.data)
    diff = a.data - b.data
    n = diff.size
    out = np.asarray(np.mean(diff * diff))

    def bwd(up):
        g = (2.0 * float(up) / n) * diff
        return g, -g

    return apply_op("squared_error", (a, b), out, bwd)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction; rejects non-finite gradients atomically."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        gs = []
        for p in self.params:
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeMismatch(f"adam: gradient shape {g.shape} does not "
                                    f"match parameter shape {p.data.shape}")
            if not np.isfinite(g).all():
                raise NonFiniteValue(
                    f"adam: non-finite gradient for {p.name or 'parameter'}; "
                    "step rejected, state unchanged")
            gs.append(g)

        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(self.params, gs, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    mean_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    deterministic: bool = True
    checked: int = 0

    def ok(self, tolerance: float) -> bool:
        return self.deterministic and self.max_rel_error <= tolerance


def _rel_err(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def finite_diff_check(fn: Callable[[], Tensor], params: Sequence[Tensor],
                      h: float = 1e-5, sample: int | None = None,
                      rng: np.random.Generator | None = None,
                      floor: float = 1e-6) -> FiniteDiffReport:
    """Compare taped gradients of `fn()` against central differences.

    `fn` must be a deterministic scalar function of `params`; when
    `sample` is given, only that many randomly chosen components are
    probed (spread across all parameters), otherwise every component is.
    The relative-error denominator is floored at `floor`: central
    differences resolve no finer than machine-eps * |f| / h, so
    components near zero would otherwise report spurious errors.
    """
    tape = Tape()
    with recording(tape):
        loss = fn()
    grads = backward(tape, loss, params)
    base = float(loss.data)

    again = float(fn().data)
    deterministic = again == base

    slots = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if sample is not None and sample < len(slots):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(slots), size=sample, replace=False)
        slots = [slots[int(i)] for i in pick]

    errs: list[float] = []
    per_param: dict[str, list[float]] = {}
    for i, j in slots:
        p = params[i]
        flat = p.data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        f_plus = float(fn().data)
        flat[j] = orig - h
        f_minus = float(fn().data)
        flat[j] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        analytic = float(grads[p].reshape(-1)[j])
        e = _rel_err(analytic, numeric, floor)
        errs.append(e)
        per_param.setdefault(p.name or f"param{i}", []).append(e)

    return FiniteDiffReport(
        max_rel_error=max(errs) if errs else 0.0,
        mean_rel_error=float(np.mean(errs)) if errs else 0.0,
        per_param={k: max(v) for k, v in per_param.items()},
        deterministic=deterministic,
        checked=len(errs),
    )
