"""Small reverse-mode autodiff over numpy arrays.

Values are plain ``np.ndarray`` wrapped in :class:`Var`. Operations executed
while a :class:`Tape` is active are recorded together with a closure that maps
the output gradient to input gradients; :meth:`Tape.backward` replays those
closures in exact reverse order. Outside a tape every op is a thin numpy call,
which is what inference paths use.

Tensors are batched: temporal layers take ``(batch, time, channels)`` arrays,
and the unbatched ``(time, channels)`` form is accepted everywhere too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

__all__ = [
    "NonFiniteError",
    "Var",
    "Tape",
    "Freeze",
    "ParamStore",
    "backward",
    "adam_step",
    "finite_difference_check",
    "FDReport",
    "temporal_conv_forward",
    "temporal_deconv_forward",
    "linear_forward",
    "activation",
]


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up at an operation boundary."""


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {where}")


class Var:
    """A value node. ``grad`` is only populated for parameter leaves."""

    __slots__ = ("value", "requires_grad", "name", "grad")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64) if not isinstance(value, np.ndarray) else value
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))


_ACTIVE: list["Tape"] = []


@dataclass
class _Record:
    out: Var
    inputs: tuple[Var, ...]
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of differentiable ops.

    Use as a context manager; ops record themselves only while it is active
    and at least one input requires a gradient.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._closed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)
        self._closed = True

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Var, params: "ParamStore | None" = None) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(.) through the recorded ops.

        Gradients of parameter leaves are accumulated into ``params`` when
        given. Returns the gradient map keyed by ``id(var)``.
        """
        if not self.records:
            raise RuntimeError("backward called on an empty tape; run the forward pass inside `with Tape():`")
        if loss.value.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for rec in reversed(self.records):
            g_out = grads.pop(id(rec.out), None)
            if g_out is None:
                continue
            g_in = rec.grad_fn(g_out)
            for var, g in zip(rec.inputs, g_in):
                if g is None or not var.requires_grad:
                    continue
                key = id(var)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        if params is not None:
            params.accumulate(grads)
        return grads


def backward(tape: Tape | None, loss: Var, params: "ParamStore | None" = None) -> dict[int, np.ndarray]:
    if tape is None:
        raise RuntimeError("backward requires a recorded tape")
    return tape.backward(loss, params)


def _record(out: Var, inputs: tuple[Var, ...], grad_fn) -> Var:
    _check_finite(out.value, "op output")
    if _ACTIVE and any(v.requires_grad for v in inputs):
        out.requires_grad = True
        _ACTIVE[-1].records.append(_Record(out, inputs, grad_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _record(
        Var(a.value + b.value),
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _record(
        Var(a.value - b.value),
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _record(
        Var(a.value * b.value),
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def square(a: Var) -> Var:
    return _record(Var(a.value * a.value), (a,), lambda g: (2.0 * a.value * g,))


def sum_all(a: Var) -> Var:
    return _record(Var(np.asarray(a.value.sum())), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Var) -> Var:
    n = a.value.size
    return _record(
        Var(np.asarray(a.value.sum() / n)),
        (a,),
        lambda g: (np.full(a.shape, float(g) / n),),
    )


def reshape(a: Var, shape: tuple[int, ...]) -> Var:
    return _record(Var(a.value.reshape(shape)), (a,), lambda g: (g.reshape(a.shape),))


def matmul(a: Var, b: Var) -> Var:
    """``a @ b`` for 2-D operands."""
    return _record(
        Var(a.value @ b.value),
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


class Freeze:
    """Record, then replay, every non-differentiable value of a forward pass.

    Stop-gradient outputs, straight-through offsets and discrete decisions
    (code indices) are captured during a base evaluation and substituted on
    later evaluations. The replayed forward is a smooth function of the
    parameters whose true derivative at the base point equals the taped
    gradient, which is what finite differences can check.
    """

    def __init__(self):
        self.values: list = []
        self.replaying = False
        self._pos = 0

    def __enter__(self) -> "Freeze":
        _FREEZE.append(self)
        self._pos = 0
        return self

    def __exit__(self, *exc) -> None:
        _FREEZE.remove(self)
        if self.replaying and exc[0] is None and self._pos != len(self.values):
            raise RuntimeError("replayed forward pass consumed fewer frozen values than recorded")

    def replay(self) -> "Freeze":
        self.replaying = True
        return self

    def _take(self, compute):
        if not self.replaying:
            v = compute()
            self.values.append(v)
            return v
        if self._pos >= len(self.values):
            raise RuntimeError("replayed forward pass diverged from the recorded one")
        v = self.values[self._pos]
        self._pos += 1
        return v


_FREEZE: list[Freeze] = []


def frozen(compute: Callable[[], object]):
    """Evaluate a non-differentiable decision, or replay it under :class:`Freeze`."""
    return _FREEZE[-1]._take(compute) if _FREEZE else compute()


def stop_gradient(a: Var) -> Var:
    """Same value, no gradient edge."""
    return Var(frozen(lambda: a.value.copy()))


def straight_through(x: Var, q: Var) -> Var:
    """Forward ``q``; backward routes the incoming gradient to ``x`` unchanged.

    ``q`` receives nothing through this edge. Under :class:`Freeze` replay
    the value is ``x + (q0 - x0)`` from the recorded pass, i.e. the usual
    ``x + sg(q - x)`` surrogate.
    """
    if x.shape != q.shape:
        raise ValueError(f"straight_through shape mismatch: {x.shape} vs {q.shape}")
    if _FREEZE:
        offset = frozen(lambda: q.value - x.value)
        value = q.value.copy() if not _FREEZE[-1].replaying else x.value + offset
    else:
        value = q.value.copy()
    return _record(Var(value), (x,), lambda g: (g,))


def take_rows(table: Var, idx: np.ndarray) -> Var:
    """Row gather ``table[idx]`` with scatter-add backward."""
    idx = np.asarray(idx, dtype=np.intp)

    def grad_fn(g):
        out = np.zeros_like(table.value)
        np.add.at(out, idx, g)
        return (out,)

    return _record(Var(table.value[idx]), (table,), grad_fn)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Var) -> Var:
    """Exact GELU, ``x * Phi(x)``."""
    x = a.value
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def grad_fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _record(Var(x * cdf), (a,), grad_fn)


def tanh(a: Var) -> Var:
    y = np.tanh(a.value)
    return _record(Var(y), (a,), lambda g: (g * (1.0 - y * y),))


def log_softmax(a: Var) -> Var:
    """Log-softmax over the last axis."""
    x = a.value
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse

    def grad_fn(g):
        p = np.exp(y)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record(Var(y), (a,), grad_fn)


def pick(a: Var, idx: np.ndarray) -> Var:
    """``a[i, idx[i]]`` for a 2-D ``a``."""
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.shape[0])

    def grad_fn(g):
        out = np.zeros_like(a.value)
        out[rows, idx] = g
        return (out,)

    return _record(Var(a.value[rows, idx]), (a,), grad_fn)


# ---------------------------------------------------------------------------
# layers


def activation(x):
    """GELU on a Var or a raw array (the latter returns an array)."""
    if isinstance(x, Var):
        return gelu(x)
    arr = np.asarray(x, dtype=np.float64)
    _check_finite(arr, "activation input")
    return arr * 0.5 * (1.0 + erf(arr * _INV_SQRT2))


def linear(x: Var, weight: Var, bias: Var | None = None) -> Var:
    """``x @ weight.T + bias`` over the last axis of ``x``."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} does not match weight {weight.shape}")
    xv = x.value
    lead = xv.shape[:-1]
    x2 = xv.reshape(-1, xv.shape[-1])
    out = x2 @ weight.value.T
    if bias is not None:
        out = out + bias.value
    out = out.reshape(*lead, weight.shape[0])

    def grad_fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.value).reshape(xv.shape)
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(Var(out), inputs, grad_fn)


def _batched(xv: np.ndarray, what: str) -> tuple[np.ndarray, bool]:
    if xv.ndim == 2:
        return xv[None], True
    if xv.ndim == 3:
        return xv, False
    raise ValueError(f"{what}: expected (time, channels) or (batch, time, channels), got shape {xv.shape}")


def conv1d(x: Var, kernels: Var, bias: Var | None, stride: int = 1, padding: int = 0) -> Var:
    """Convolution along time. ``kernels`` is ``(c_out, c_in, width)``."""
    if stride < 1:
        raise ValueError(f"conv1d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv1d: padding must be >= 0, got {padding}")
    xb, squeeze = _batched(x.value, "conv1d")
    c_out, c_in, w = kernels.shape
    B, T, C = xb.shape
    if C != c_in:
        raise ValueError(f"conv1d: input has {C} channels, kernels expect {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv1d: bias shape {bias.shape} != ({c_out},)")
    Tp = T + 2 * padding
    if Tp < w:
        raise ValueError(f"conv1d: padded length {Tp} shorter than kernel width {w}")
    n_out = (Tp - w) // stride + 1
    xp = np.pad(xb, ((0, 0), (padding, padding), (0, 0))) if padding else xb
    # (B, Tp-w+1, C, w) -> strided windows
    cols = sliding_window_view(xp, w, axis=1)[:, ::stride][:, :n_out]
    cols2 = np.ascontiguousarray(cols).reshape(B * n_out, C * w)
    kmat = kernels.value.reshape(c_out, C * w)
    out = cols2 @ kmat.T
    if bias is not None:
        out = out + bias.value
    out = out.reshape(B, n_out, c_out)

    def grad_fn(g):
        gb3 = g[None] if squeeze else g
        g2 = gb3.reshape(B * n_out, c_out)
        gk = (g2.T @ cols2).reshape(kernels.shape)
        gcols = (g2 @ kmat).reshape(B, n_out, C, w)
        gxp = np.zeros((B, Tp, C))
        span = stride * (n_out - 1) + 1
        for j in range(w):
            gxp[:, j : j + span : stride, :] += gcols[:, :, :, j]
        gx = gxp[:, padding : padding + T, :]
        if squeeze:
            gx = gx[0]
        gbias = g2.sum(axis=0) if bias is not None else None
        return (gx, gk, gbias)

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return _record(Var(out[0] if squeeze else out), inputs, grad_fn)


def conv_transpose1d(
    x: Var,
    kernels: Var,
    bias: Var | None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Var:
    """Adjoint of :func:`conv1d` along time, plus bias.

    ``kernels`` uses the layout of the convolution being transposed,
    ``(c_in_here, c_out_here, width)``; i.e. a conv with these kernels maps
    ``c_out_here -> c_in_here`` and this op is its transpose. Output length is
    ``(T - 1) * stride + width - 2 * padding + output_padding``.
    """
    if stride < 1:
        raise ValueError(f"conv_transpose1d: stride must be >= 1, got {stride}")
    xb, squeeze = _batched(x.value, "conv_transpose1d")
    c_in, c_out, w = kernels.shape
    B, T, C = xb.shape
    if C != c_in:
        raise ValueError(f"conv_transpose1d: input has {C} channels, kernels expect {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv_transpose1d: bias shape {bias.shape} != ({c_out},)")
    full = (T - 1) * stride + w
    n_out = full - 2 * padding + output_padding
    if n_out < 1 or output_padding < 0 or padding < 0:
        raise ValueError("conv_transpose1d: invalid padding for this input length")
    total = max(full, padding + n_out)
    kmat = kernels.value.reshape(c_in, c_out * w)
    x2 = xb.reshape(B * T, C)
    contrib = (x2 @ kmat).reshape(B, T, c_out, w)
    buf = np.zeros((B, total, c_out))
    span = stride * (T - 1) + 1
    for j in range(w):
        buf[:, j : j + span : stride, :] += contrib[:, :, :, j]
    out = buf[:, padding : padding + n_out, :]
    if bias is not None:
        out = out + bias.value

    def grad_fn(g):
        gb3 = g[None] if squeeze else g
        gbuf = np.zeros((B, total, c_out))
        gbuf[:, padding : padding + n_out, :] = gb3
        gcols = np.empty((B, T, c_out, w))
        for j in range(w):
            gcols[:, :, :, j] = gbuf[:, j : j + span : stride, :]
        gc2 = gcols.reshape(B * T, c_out * w)
        gx = (gc2 @ kmat.T).reshape(B, T, C)
        gk = (x2.T @ gc2).reshape(kernels.shape)
        gbias = gb3.reshape(-1, c_out).sum(axis=0) if bias is not None else None
        return (gx[0] if squeeze else gx, gk, gbias)

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return _record(Var(out[0] if squeeze else np.ascontiguousarray(out)), inputs, grad_fn)


# Array-level wrappers with the plain (time, channels) signatures.


def temporal_conv_forward(input, kernels, bias, stride: int = 1, padding: int = 0) -> np.ndarray:
    x = np.asarray(input, dtype=np.float64)
    _check_finite(x, "temporal_conv_forward input")
    return conv1d(Var(x), as_var(kernels), as_var(bias), stride, padding).value


def temporal_deconv_forward(input, kernels, bias, stride: int = 1, padding: int = 0) -> np.ndarray:
    x = np.asarray(input, dtype=np.float64)
    _check_finite(x, "temporal_deconv_forward input")
    b = None if bias is None else as_var(bias)
    return conv_transpose1d(Var(x), as_var(kernels), b, stride, padding).value


def linear_forward(input, weight, bias) -> np.ndarray:
    x = np.asarray(input, dtype=np.float64)
    _check_finite(x, "linear_forward input")
    w = np.asarray(weight, dtype=np.float64)
    if x.ndim != 1 or w.ndim != 2:
        raise ValueError(f"linear_forward: expected vector input and matrix weight, got {x.shape} and {w.shape}")
    return linear(Var(x), Var(w), as_var(bias)).value


# ---------------------------------------------------------------------------
# parameters and optimisation


@dataclass
class ParamStore:
    """Named float64 parameters with gradient slots and Adam moments."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    _vars: dict[str, Var] = field(default_factory=dict, repr=False)

    def add(self, name: str, value: np.ndarray) -> Var:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        _check_finite(arr, f"parameter {name}")
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        self._vars[name] = Var(arr, requires_grad=True, name=name)
        return self._vars[name]

    def __getitem__(self, name: str) -> Var:
        return self._vars[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def accumulate(self, grads: dict[int, np.ndarray]) -> None:
        for name, var in self._vars.items():
            g = grads.get(id(var))
            if g is not None:
                self.grads[name] += g

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def set_value(self, name: str, value: np.ndarray) -> None:
        """Overwrite in place so live Vars keep seeing the parameter."""
        self.params[name][...] = value

    def state_equal(self, other: "ParamStore") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self.params[n], other.params[n]) for n in self.params)


def adam_step(
    params: ParamStore,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam, in place; clears gradients afterwards."""
    for name, g in params.grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r} at step {params.step + 1}")
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.params.items():
        g = params.grads[name]
        m = params.m[name]
        v = params.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    params.zero_grad()


@dataclass
class FDReport:
    max_rel_error: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_rel_error.values())

    def worst(self) -> tuple[str, float]:
        name = max(self.max_rel_error, key=self.max_rel_error.get)
        return name, self.max_rel_error[name]


def finite_difference_check(
    forward: Callable[[], Var],
    params: ParamStore,
    tolerance: float = 1e-3,
    h: float = 1e-5,
    names: Iterable[str] | None = None,
    floor: float = 1e-6,
) -> FDReport:
    """Compare taped gradients of ``forward()`` with central differences.

    ``forward`` must be deterministic and read its parameters from ``params``.
    Perturbed evaluations replay the base pass's stop-gradient values and
    discrete choices (see :class:`Freeze`).
    Per element the relative error is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps exactly-zero gradients from dividing by zero.
    """
    params.zero_grad()
    freeze = Freeze()
    with freeze, Tape() as tape:
        loss = forward()
    tape.backward(loss, params)
    analytic = {n: g.copy() for n, g in params.grads.items()}
    params.zero_grad()
    freeze.replay()

    def evaluate() -> float:
        with freeze:
            return float(forward().value)

    report: dict[str, float] = {}
    for name in names if names is not None else params.names():
        p = params.params[name]
        flat = p.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = evaluate()
            flat[i] = orig - h
            down = evaluate()
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * h)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        report[name] = float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
    return FDReport(report, tolerance)
