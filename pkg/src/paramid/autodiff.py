"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records one primitive per produced tensor, in creation order, which
doubles as a topological order: backward is a single reversed sweep and replay
is a single forward sweep. Every primitive validates shapes eagerly and
rejects non-finite outputs, so numerical blow-ups surface at the op that
caused them.

Straight-through gates (``bernoulli_st``, ``threshold_st``) are intentionally
biased estimators: hard {0,1} forward, sigmoid-derivative backward. They are
excluded from finite-difference validation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "Gradients",
    "AutodiffError",
    "ShapeError",
    "NumericError",
    "AdamState",
    "adam_init",
    "adam_step",
    "finite_diff_check",
]


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class NumericError(AutodiffError):
    pass


class Tensor:
    __slots__ = ("data", "tape", "_idx")

    def __init__(self, data: np.ndarray, tape: "Tape", idx: int):
        self.data = data
        self.tape = tape
        self._idx = idx

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, idx={self._idx})"

    # light operator sugar; the named functions below are the primary API
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


class _Record:
    __slots__ = ("kind", "out", "inputs", "backward", "forward")

    def __init__(self, kind, out, inputs, backward, forward):
        self.kind = kind
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.forward = forward


class Gradients:
    """Gradient lookup by tensor; tensors without influence read as zero."""

    def __init__(self, table: dict[int, np.ndarray], tape: "Tape"):
        self._table = table
        self._tape = tape

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._table.get(t._idx)
        return np.zeros_like(t.data) if g is None else g


class Tape:
    """Ordered record of primitives for one forward computation."""

    def __init__(self, check_finite: bool = True):
        self.check_finite = check_finite
        self._records: list[_Record] = []
        self._count = 0

    def _new_tensor(self, data: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(data, dtype=np.float64), self, self._count)
        self._count += 1
        return t

    def leaf(self, data) -> Tensor:
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError("leaf contains non-finite values")
        return self._new_tensor(arr.copy())

    constant = leaf

    def _emit(self, kind, inputs, forward, backward) -> Tensor:
        for t in inputs:
            if t.tape is not self:
                raise AutodiffError("tensors from different tapes cannot be mixed")
        with np.errstate(all="ignore"):  # non-finite results are rejected below
            out_data = forward()
        if self.check_finite and not np.isfinite(out_data).all():
            raise NumericError(f"non-finite result in primitive {kind!r}")
        out = self._new_tensor(out_data)
        self._records.append(_Record(kind, out, tuple(inputs), backward, forward))
        return out

    def backward(self, out: Tensor) -> Gradients:
        if out.tape is not self:
            raise AutodiffError("output does not belong to this tape")
        if out.data.shape != ():
            raise ShapeError("backward requires a scalar output")
        table: dict[int, np.ndarray] = {out._idx: np.ones(())}
        for rec in reversed(self._records):
            g = table.pop(rec.out._idx, None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None:
                    continue
                acc = table.get(t._idx)
                table[t._idx] = gi if acc is None else acc + gi
        return Gradients(table, self)

    def replay(self) -> None:
        """Recompute every recorded primitive from current leaf values."""
        for rec in self._records:
            rec.out.data = rec.forward()


# ---------------------------------------------------------------------------
# shape helpers


def _same_shape(kind, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{kind}: shapes {a.data.shape} and {b.data.shape} differ")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (inverse of broadcasting it up)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ashape, bshape = a.data.shape, b.data.shape
    if a.data.ndim == 2 and b.data.ndim == 2:
        if ashape[1] != bshape[0]:
            raise ShapeError(f"matmul: {ashape} @ {bshape}")

        def back(g):
            return (g @ b.data.T, a.data.T @ g)

    elif a.data.ndim == 3 and b.data.ndim == 2:
        if ashape[2] != bshape[0]:
            raise ShapeError(f"matmul: {ashape} @ {bshape}")

        def back(g):
            da = g @ b.data.T
            db = a.data.reshape(-1, ashape[2]).T @ g.reshape(-1, g.shape[-1])
            return (da, db)

    elif a.data.ndim == 3 and b.data.ndim == 3:
        if ashape[0] != bshape[0] or ashape[2] != bshape[1]:
            raise ShapeError(f"matmul: {ashape} @ {bshape}")

        def back(g):
            return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    else:
        raise ShapeError(f"matmul: unsupported ranks {ashape} @ {bshape}")
    return a.tape._emit("matmul", (a, b), lambda: a.data @ b.data, back)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return a.tape._emit("add", (a, b), lambda: a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return a.tape._emit("sub", (a, b), lambda: a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return a.tape._emit("mul", (a, b), lambda: a.data * b.data, lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    return a.tape._emit(
        "div",
        (a, b),
        lambda: a.data / b.data,
        lambda g: (g / b.data, -g * a.data / (b.data * b.data)),
    )


def broadcast_add(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b broadcast up to x's shape (bias-style)."""
    try:
        np.broadcast_to(b.data, x.data.shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_add: {b.data.shape} onto {x.data.shape}") from exc
    return x.tape._emit(
        "broadcast_add",
        (x, b),
        lambda: x.data + b.data,
        lambda g: (g, _unbroadcast(g, b.data.shape)),
    )


def broadcast_mul(x: Tensor, b: Tensor) -> Tensor:
    """x * b with b broadcast up to x's shape (per-slot scaling)."""
    try:
        np.broadcast_to(b.data, x.data.shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_mul: {b.data.shape} onto {x.data.shape}") from exc
    return x.tape._emit(
        "broadcast_mul",
        (x, b),
        lambda: x.data * b.data,
        lambda g: (g * b.data, _unbroadcast(g * x.data, b.data.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return x.tape._emit("scale", (x,), lambda: x.data * c, lambda g: (g * c,))


def texp(x: Tensor) -> Tensor:
    out = x.tape._emit("exp", (x,), lambda: np.exp(x.data), lambda g: (g * out.data,))
    return out


def tlog(x: Tensor) -> Tensor:
    return x.tape._emit("log", (x,), lambda: np.log(x.data), lambda g: (g / x.data,))


def sigmoid(x: Tensor) -> Tensor:
    def fwd():
        return _sigmoid_np(x.data)

    out = x.tape._emit("sigmoid", (x,), fwd, lambda g: (g * out.data * (1.0 - out.data),))
    return out


def tanh(x: Tensor) -> Tensor:
    out = x.tape._emit("tanh", (x,), lambda: np.tanh(x.data), lambda g: (g * (1.0 - out.data**2),))
    return out


def square(x: Tensor) -> Tensor:
    return x.tape._emit("square", (x,), lambda: x.data**2, lambda g: (2.0 * g * x.data,))


def softmax_rows(x: Tensor) -> Tensor:
    def fwd():
        shifted = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)

    def back(g):
        s = out.data
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    out = x.tape._emit("softmax_rows", (x,), fwd, back)
    return out


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return x.tape._emit(
            "sum", (x,), lambda: x.data.sum(), lambda g: (np.broadcast_to(g, x.data.shape).copy(),)
        )
    ax = axis if axis >= 0 else x.data.ndim + axis

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, ax), x.data.shape).copy(),)

    return x.tape._emit("sum_axis", (x,), lambda: x.data.sum(axis=ax), back)


def tmean(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = x.data.size
        return x.tape._emit(
            "mean",
            (x,),
            lambda: x.data.mean(),
            lambda g: (np.broadcast_to(g / n, x.data.shape).copy(),),
        )
    ax = axis if axis >= 0 else x.data.ndim + axis
    n = x.data.shape[ax]

    def back(g):
        return (np.broadcast_to(np.expand_dims(g / n, ax), x.data.shape).copy(),)

    return x.tape._emit("mean_axis", (x,), lambda: x.data.mean(axis=ax), back)


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ShapeError("concat of nothing")
    ax = axis if axis >= 0 else parts[0].data.ndim + axis
    sizes = [p.data.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=ax) for i in range(len(parts))
        )

    return parts[0].tape._emit(
        "concat", tuple(parts), lambda: np.concatenate([p.data for p in parts], axis=ax), back
    )


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis if axis >= 0 else x.data.ndim + axis
    if not (0 <= start < stop <= x.data.shape[ax]):
        raise ShapeError(f"slice [{start}:{stop}] out of bounds for axis {ax} of {x.data.shape}")
    idx = tuple(slice(None) if i != ax else slice(start, stop) for i in range(x.data.ndim))

    def back(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return x.tape._emit("slice", (x,), lambda: x.data[idx].copy(), back)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape) if not isinstance(shape, int) else (shape,)
    return x.tape._emit(
        "reshape",
        (x,),
        lambda: x.data.reshape(shape),
        lambda g: (g.reshape(x.data.shape),),
    )


def swap_last_axes(x: Tensor) -> Tensor:
    if x.data.ndim < 2:
        raise ShapeError("swap_last_axes needs rank >= 2")
    return x.tape._emit(
        "swap_last_axes",
        (x,),
        lambda: np.swapaxes(x.data, -1, -2).copy(),
        lambda g: (np.swapaxes(g, -1, -2),),
    )


def expand(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    try:
        np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"expand: {x.data.shape} to {shape}") from exc
    return x.tape._emit(
        "expand",
        (x,),
        lambda: np.broadcast_to(x.data, shape).copy(),
        lambda g: (_unbroadcast(g, x.data.shape),),
    )


_MASK_FILL = -1e30


def masked_fill(x: Tensor, mask, fill: float = _MASK_FILL) -> Tensor:
    """Keep x where mask is 1, write `fill` where it is 0. No mask gradient."""
    mask_data = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if mask_data.shape != x.data.shape:
        raise ShapeError(f"masked_fill: mask {mask_data.shape} vs {x.data.shape}")
    keep = mask_data != 0

    def back(g):
        return (np.where(keep, g, 0.0),)

    return x.tape._emit("masked_fill", (x,), lambda: np.where(keep, x.data, fill), back)


def stop_gradient(x: Tensor) -> Tensor:
    return x.tape._emit("stop_gradient", (x,), lambda: x.data.copy(), lambda g: (None,))


def bernoulli_st(logits: Tensor, rng: np.random.Generator, temperature: float = 1.0) -> Tensor:
    """Hard Bernoulli(sigmoid(logits/T)) sample; straight-through sigmoid backward."""
    u = rng.random(logits.data.shape)

    def fwd():
        return (u < _sigmoid_np(logits.data / temperature)).astype(np.float64)

    def back(g):
        p = _sigmoid_np(logits.data / temperature)
        return (g * p * (1.0 - p) / temperature,)

    return logits.tape._emit("bernoulli_st", (logits,), fwd, back)


def threshold_st(logits: Tensor, threshold: float = 0.5, temperature: float = 1.0) -> Tensor:
    """Deterministic hard gate sigmoid(logits/T) > threshold; sigmoid backward."""

    def fwd():
        return (_sigmoid_np(logits.data / temperature) > threshold).astype(np.float64)

    def back(g):
        p = _sigmoid_np(logits.data / temperature)
        return (g * p * (1.0 - p) / temperature,)

    return logits.tape._emit("threshold_st", (logits,), fwd, back)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_init(params: dict[str, np.ndarray], lr: float, **kwargs) -> AdamState:
    state = AdamState(lr=lr, **kwargs)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p)
        state.v[name] = np.zeros_like(p)
    return state


def adam_step(
    state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]
) -> dict[str, np.ndarray]:
    """Bias-corrected adaptive-moment update, applied in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam: gradient shape {g.shape} vs parameter {p.shape} ({name})")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_check(fn, point: dict[str, np.ndarray], h: float = 1e-5) -> float:
    """Worst relative disagreement between backward() and central differences.

    ``fn(tape, tensors)`` must build a scalar Tensor from the named leaves.
    The denominator floors at 1e-8 so zero-gradient coordinates compare
    absolutely.
    """
    point = {k: np.asarray(v, dtype=np.float64) for k, v in point.items()}

    def value_at(p) -> float:
        tape = Tape()
        tensors = {k: tape.leaf(v) for k, v in p.items()}
        return float(fn(tape, tensors).data)

    tape = Tape()
    tensors = {k: tape.leaf(v) for k, v in point.items()}
    out = fn(tape, tensors)
    grads = tape.backward(out)

    worst = 0.0
    for name, arr in point.items():
        analytic = grads[tensors[name]]
        flat = arr.reshape(-1)
        for i in range(flat.size):
            up = {k: v.copy() for k, v in point.items()}
            dn = {k: v.copy() for k, v in point.items()}
            up[name].reshape(-1)[i] += h
            dn[name].reshape(-1)[i] -= h
            numeric = (value_at(up) - value_at(dn)) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
