"""Reverse-mode differentiation over a small set of numpy primitives.

Every primitive accepts plain arrays as well as :class:`Tensor` objects.
With array inputs it simply evaluates the numpy expression, so numerical
kernels written against these functions serve both the fast inference
path and the recorded training path.

A :class:`Tape` owns the recorded nodes. Tensors remember their tape and
any primitive touching a tensor appends one node to it, so the order of
the tape is a valid topological order for the backward sweep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "NonFiniteError",
    "Tape",
    "Tensor",
    "GradientReport",
    "gradient",
    "check_gradient",
    "value_of",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "square",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "artanh",
    "clamp",
    "leaky_relu",
    "sum",
    "norm",
    "matvec",
    "where",
    "take",
    "segment_sum",
    "reshape",
]


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or infinity while recording or differentiating."""


class Tape:
    """Ordered record of primitive applications.

    Tapes are not thread safe; build one per worker.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def variable(self, value, name: str | None = None) -> "Tensor":
        t = Tensor(np.array(value, dtype=np.float64), self, op="leaf", name=name)
        self.nodes.append(t)
        return t

    def constant(self, value) -> np.ndarray:
        return np.asarray(value, dtype=np.float64)

    def __len__(self):
        return len(self.nodes)

    def replay(self) -> None:
        """Recompute every node's value from the current leaf values."""
        for node in self.nodes:
            if node.fn is None:
                continue
            args = [p.value if isinstance(p, Tensor) else p for p in node.inputs]
            node.value = node.fn(*args)
            _check_finite(node.value, node.op)


class Tensor:
    __slots__ = ("value", "tape", "op", "name", "inputs", "fn", "vjp")
    # make ``ndarray <op> Tensor`` dispatch to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, value, tape, op="leaf", name=None, inputs=(), fn=None, vjp=None):
        self.value = value
        self.tape = tape
        self.op = op
        self.name = name
        self.inputs = inputs
        self.fn = fn
        self.vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.value.shape})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return _getitem(self, index)


def value_of(x):
    return x.value if isinstance(x, Tensor) else x


def _check_finite(value, op):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by primitive '{op}'")


def _apply(op: str, fn: Callable, vjp: Callable, *inputs):
    """Evaluate ``fn`` on the inputs and record a node if any input is a Tensor.

    ``vjp(g, out, *input_values)`` returns one cotangent per input (None for
    inputs that need none).
    """
    tape = None
    for x in inputs:
        if isinstance(x, Tensor):
            tape = x.tape
            break
    values = [value_of(x) for x in inputs]
    if tape is None:
        return fn(*values)
    with np.errstate(all="ignore"):  # reported below as NonFiniteError
        out = fn(*values)
    _check_finite(out, op)
    node = Tensor(out, tape, op=op, inputs=inputs, fn=fn, vjp=vjp)
    tape.nodes.append(node)
    return node


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _shape(x):
    return np.shape(x)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    return _apply(
        "add",
        np.add,
        lambda g, out, a, b: (_unbroadcast(g, _shape(a)), _unbroadcast(g, _shape(b))),
        a,
        b,
    )


def sub(a, b):
    return _apply(
        "sub",
        np.subtract,
        lambda g, out, a, b: (_unbroadcast(g, _shape(a)), _unbroadcast(-g, _shape(b))),
        a,
        b,
    )


def mul(a, b):
    return _apply(
        "mul",
        np.multiply,
        lambda g, out, a, b: (_unbroadcast(g * b, _shape(a)), _unbroadcast(g * a, _shape(b))),
        a,
        b,
    )


def div(a, b):
    return _apply(
        "div",
        np.divide,
        lambda g, out, a, b: (
            _unbroadcast(g / b, _shape(a)),
            _unbroadcast(-g * out / b, _shape(b)),
        ),
        a,
        b,
    )


def neg(a):
    return _apply("neg", np.negative, lambda g, out, a: (-g,), a)


def square(a):
    return _apply("square", np.square, lambda g, out, a: (2.0 * a * g,), a)


def exp(a):
    return _apply("exp", np.exp, lambda g, out, a: (g * out,), a)


def log(a):
    return _apply("log", np.log, lambda g, out, a: (g / a,), a)


def sqrt(a):
    return _apply("sqrt", np.sqrt, lambda g, out, a: (g * 0.5 / out,), a)


def tanh(a):
    return _apply("tanh", np.tanh, lambda g, out, a: (g * (1.0 - out * out),), a)


def sigmoid(a):
    """Logistic function, stable for any finite input."""
    return _apply("sigmoid", expit, lambda g, out, a: (g * out * (1.0 - out),), a)


def clamp(a, lo=-math.inf, hi=math.inf):
    """Clip to ``[lo, hi]``; the derivative is zero where clipping is active."""

    def fn(a):
        return np.clip(a, lo, hi)

    def vjp(g, out, a):
        return (np.where((a >= lo) & (a <= hi), g, 0.0),)

    return _apply("clamp", fn, vjp, a)


def artanh(a, bound=1.0 - 1e-5):
    """Inverse hyperbolic tangent with its argument clipped to ``[-bound, bound]``."""
    z = clamp(a, -bound, bound)
    return _apply("artanh", np.arctanh, lambda g, out, a: (g / (1.0 - a * a),), z)


def leaky_relu(a, slope=0.01):
    def fn(a):
        return np.where(a > 0, a, slope * a)

    def vjp(g, out, a):
        return (np.where(a > 0, g, slope * g),)

    return _apply("leaky_relu", fn, vjp, a)


def where(cond, a, b):
    """Select elementwise; ``cond`` is a plain boolean array (never differentiated)."""
    cond = np.asarray(cond)

    def fn(a, b):
        return np.where(cond, a, b)

    def vjp(g, out, a, b):
        return (
            _unbroadcast(np.where(cond, g, 0.0), _shape(a)),
            _unbroadcast(np.where(cond, 0.0, g), _shape(b)),
        )

    return _apply("where", fn, vjp, a, b)


# ---------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    def fn(a):
        return np.sum(a, axis=axis, keepdims=keepdims)

    def vjp(g, out, a):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, np.shape(a)).copy(),)

    return _apply("sum", fn, vjp, a)


def norm(a, axis=-1, keepdims=True):
    """Euclidean norm; the backward pass takes the zero subgradient at 0."""

    def fn(a):
        return np.sqrt(np.sum(a * a, axis=axis, keepdims=keepdims))

    def vjp(g, out, a):
        if not keepdims:
            g = np.expand_dims(g, axis)
            out = np.expand_dims(out, axis)
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * a / safe, 0.0),)

    return _apply("norm", fn, vjp, a)


# ---------------------------------------------------------------- linear algebra


def matvec(m, x):
    """Apply matrix ``m`` (out x in) to the last axis of ``x``."""

    def fn(m, x):
        return x @ m.T

    def vjp(g, out, m, x):
        if x.ndim == 1:
            gm = np.outer(g, x)
        else:
            gm = g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])
        return gm, g @ m

    return _apply("matvec", fn, vjp, m, x)


def reshape(a, shape):
    return _apply(
        "reshape",
        lambda a: np.reshape(a, shape),
        lambda g, out, a: (np.reshape(g, np.shape(a)),),
        a,
    )


# ---------------------------------------------------------------- indexing


def take(a, index):
    """Gather rows ``a[index]``; repeated indices accumulate in the backward pass."""
    index = np.asarray(index, dtype=np.intp)

    def vjp(g, out, a):
        ga = np.zeros_like(a)
        np.add.at(ga, index, g)
        return (ga,)

    return _apply("take", lambda a: a[index], vjp, a)


def _getitem(a, index):
    def vjp(g, out, a):
        ga = np.zeros_like(a)
        np.add.at(ga, index, g)
        return (ga,)

    return _apply("getitem", lambda a: a[index], vjp, a)


def segment_sum(a, segment_ids, num_segments):
    """Sum rows of ``a`` into ``num_segments`` buckets given per-row segment ids."""
    segment_ids = np.asarray(segment_ids, dtype=np.intp)

    def fn(a):
        out = np.zeros((num_segments,) + np.shape(a)[1:], dtype=np.float64)
        np.add.at(out, segment_ids, a)
        return out

    def vjp(g, out, a):
        return (g[segment_ids],)

    return _apply("segment_sum", fn, vjp, a)


# ---------------------------------------------------------------- backward


def gradient(loss: Tensor, params: Iterable[Tensor]) -> dict[str, np.ndarray]:
    """Euclidean gradient of a scalar ``loss`` with respect to each leaf in ``params``.

    Leaves that the loss does not depend on receive zero gradients. The
    result is keyed by leaf name (or position when unnamed).
    """
    params = list(params)
    if not isinstance(loss, Tensor):
        return {_key(p, i): np.zeros_like(p.value) for i, p in enumerate(params)}
    if np.size(loss.value) != 1:
        raise ValueError("gradient() needs a scalar loss")
    tape = loss.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None) if node.vjp is not None else grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        values = [value_of(x) for x in node.inputs]
        contribs = node.vjp(g, node.value, *values)
        for x, gx in zip(node.inputs, contribs):
            if not isinstance(x, Tensor) or gx is None:
                continue
            _check_finite(gx, node.op)
            prev = grads.get(id(x))
            grads[id(x)] = gx if prev is None else prev + gx
    out = {}
    for i, p in enumerate(params):
        g = grads.get(id(p))
        out[_key(p, i)] = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=np.float64)
    return out


def _key(p, i):
    return p.name if p.name is not None else str(i)


# ---------------------------------------------------------------- gradient check


@dataclass
class GradientReport:
    max_rel_error: float
    tolerance: float
    failures: list[tuple[str, tuple[int, ...], float, float]] = field(default_factory=list)
    checked: int = 0

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __str__(self):
        status = "ok" if self.ok else f"{len(self.failures)} failing coordinates"
        return (
            f"gradient check over {self.checked} coordinates: "
            f"max relative error {self.max_rel_error:.3e} (tol {self.tolerance:g}), {status}"
        )


def check_gradient(
    loss_fn: Callable[[Mapping[str, object]], object],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    names: Sequence[str] | None = None,
) -> GradientReport:
    """Compare reverse-mode gradients against central finite differences.

    ``loss_fn`` receives a mapping from parameter name to either a Tensor
    (recorded pass) or a float64 array (finite-difference passes) and must
    return a scalar built from the primitives in this module.

    Relative error per coordinate is ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.
    """
    names = list(names or params.keys())
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    tape = Tape()
    leaves = {k: tape.variable(v, name=k) for k, v in base.items()}
    loss = loss_fn(leaves)
    analytic = gradient(loss, [leaves[k] for k in names])

    report = GradientReport(max_rel_error=0.0, tolerance=tol)
    for name in names:
        arr = base[name]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = float(np.asarray(loss_fn(base)))
            arr[idx] = orig - h
            down = float(np.asarray(loss_fn(base)))
            arr[idx] = orig
            fd = (up - down) / (2.0 * h)
            ad_ = float(analytic[name][idx])
            err = abs(ad_ - fd) / max(1e-8, abs(ad_) + abs(fd))
            report.checked += 1
            report.max_rel_error = max(report.max_rel_error, err)
            if err > tol:
                report.failures.append((name, idx, ad_, fd))
    return report
