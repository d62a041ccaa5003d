"""Reverse-mode automatic differentiation on small dense arrays.

Operations executed inside a ``with Tape():`` block are recorded in order;
:func:`backward` replays the record in reverse.  Outside a tape nothing is
recorded and tensors behave like plain arrays, which is what inference code
(controllers, diagnostics) wants.

Example:
    >>> p = Tensor([3.0, 4.0], requires_grad=True)
    >>> with Tape():
    ...     loss = l2_norm_sq(p)
    ...     (g,) = backward(loss, [p])
    >>> g
    array([6., 8.])
"""
import json
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from lalqr.errors import DimensionError, EvaluationError, NonFiniteError

_local = threading.local()


def _tape_stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class _Node:
    output: "Tensor"
    inputs: tuple
    vjp: object  # grad_out -> tuple of input grads (None where not needed)


class Tape:
    """Ordered record of differentiable operations.

    Inputs of every node precede it because nodes are appended as the
    forward computation runs.
    """

    def __init__(self):
        self.nodes = []

    def record(self, output, inputs, vjp):
        output.node_id = len(self.nodes)
        output.tape = self
        self.nodes.append(_Node(output, inputs, vjp))

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


class Tensor:
    """A float64 array that can take part in a recorded computation."""

    __array_priority__ = 100

    def __init__(self, values, requires_grad=False):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = None
        self.tape = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.values

    def item(self):
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.values!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def tensor(values, requires_grad=False):
    return values if isinstance(values, Tensor) else Tensor(values, requires_grad)


def _make(values, inputs, vjp):
    """Wrap an op result and record it when any input needs gradients."""
    out = Tensor(values)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = tensor(a), tensor(b)
    _check_broadcast(a, b, "add")
    return _make(
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def subtract(a, b):
    a, b = tensor(a), tensor(b)
    _check_broadcast(a, b, "subtract")
    return _make(
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def multiply(a, b):
    """Elementwise product."""
    a, b = tensor(a), tensor(b)
    _check_broadcast(a, b, "multiply")
    av, bv = a.values, b.values
    return _make(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def scale(a, c):
    a = tensor(a)
    c = float(c)
    return _make(a.values * c, (a,), lambda g: (g * c,))


def matmul(a, b):
    a, b = tensor(a), tensor(b)
    av, bv = a.values, b.values
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise DimensionError(f"matmul: shapes {av.shape} and {bv.shape} are not conformable")
    a2 = av.reshape(1, -1) if av.ndim == 1 else av
    b2 = bv.reshape(-1, 1) if bv.ndim == 1 else bv

    def vjp(g):
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        return (g2 @ b2.T).reshape(av.shape), (a2.T @ g2).reshape(bv.shape)

    return _make(av @ bv, (a, b), vjp)


def transpose(a):
    a = tensor(a)
    return _make(a.values.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    a = tensor(a)
    return _make(a.values.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def tanh(a):
    a = tensor(a)
    t = np.tanh(a.values)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a):
    a = tensor(a)
    mask = a.values > 0
    return _make(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def softplus(a):
    a = tensor(a)
    x = a.values
    out = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _make(out, (a,), lambda g: (g * sig,))


def square(a):
    a = tensor(a)
    x = a.values
    return _make(x * x, (a,), lambda g: (2.0 * g * x,))


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    a = tensor(a)
    out = a.values.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), vjp)


def mean(a, axis=None):
    a = tensor(a)
    count = a.values.size if axis is None else a.values.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / count)


def quadratic_form(z, q):
    """``z^T Q z`` for a vector ``z`` or row-wise for a batch ``z`` of shape (B, N)."""
    z, q = tensor(z), tensor(q)
    zv, qv = z.values, q.values
    if qv.ndim != 2 or qv.shape[0] != qv.shape[1] or zv.shape[-1] != qv.shape[0]:
        raise DimensionError(f"quadratic_form: z{zv.shape} and Q{qv.shape} do not conform")
    qz = zv @ qv.T  # rows are Q z_b
    out = np.einsum("...i,...i->...", zv, qz)

    def vjp(g):
        g = np.asarray(g)
        gz = g[..., None] * (qz + zv @ qv)
        gz2 = (g[..., None] * zv).reshape(-1, zv.shape[-1])
        gq = gz2.T @ zv.reshape(-1, zv.shape[-1])
        return gz, gq

    return _make(out, (z, q), vjp)


def l2_norm_sq(a, axis=-1):
    """Sum of squares along ``axis`` (the whole vector for 1-D input)."""
    return sum(square(a), axis=axis)


def place(values, index, shape, base=None):
    """Scatter ``values`` into a zero (or ``base``) array of ``shape``.

    ``index`` is a tuple of integer arrays as accepted by numpy fancy
    indexing; gradients flow back only to the scattered entries.
    """
    values = tensor(values)
    out = np.zeros(shape) if base is None else np.array(base, dtype=np.float64)
    out[index] = values.values.reshape(-1)
    return _make(out, (values,), lambda g: (g[index].reshape(values.shape),))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def backward(loss, params=()):
    """Accumulate d(loss)/d(param) for every tensor in ``params``.

    Each param's ``.grad`` is overwritten; parameters the loss does not reach
    get zeros.  Returns the gradients in the order of ``params``.
    """
    if loss.values.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    params = list(params)
    grads = {}
    if loss.tape is not None:
        nodes = loss.tape.nodes
        grads[id(loss)] = np.ones_like(loss.values)
        for node in reversed(nodes[: loss.node_id + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    out = []
    for p in params:
        g = grads.get(id(p))
        g = np.zeros_like(p.values) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
        p.grad = g
        out.append(g)
    return out


def grad(f, params):
    """Evaluate ``f()`` on a fresh tape and return ``(loss_value, grads)``."""
    with Tape():
        loss = f()
        grads = backward(loss, params)
    return loss.item(), grads


def jacobian(f, x):
    """Dense Jacobian of a vector function ``f`` at the point ``x``."""
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    with Tape():
        y = f(xt)
        rows = []
        for i in range(y.values.size):
            yi = _make(y.values.reshape(-1)[i], (y,), _selector(y.shape, i))
            rows.append(backward(yi, [xt])[0].reshape(-1))
    return np.array(rows).reshape(y.values.size, xt.values.size)


def _selector(shape, i):
    def vjp(g):
        out = np.zeros(shape)
        out.reshape(-1)[i] = g
        return (out,)

    return vjp


def gradient_check(f, params, h=1e-6):
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` is a zero-argument callable returning a scalar tensor computed from
    ``params``.  The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``: relative for
    large gradients, absolute for small ones (where the roundoff of ``f``
    dominates any central difference).
    """
    if not 0.0 < h <= 1e-3:
        raise ValueError(f"h must lie in (0, 1e-3], got {h}")
    _, analytic = grad(f, params)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.values.reshape(-1)
        a = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise EvaluationError(f"non-finite value probing coordinate {i}")
            num = (fp - fm) / (2.0 * h)
            worst = max(worst, abs(a[i] - num) / max(1.0, abs(a[i]), abs(num)))
    return worst


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(state, params, grads):
    """Apply one AdamW update in place.

    ``params`` maps names to tensors and ``grads`` maps the same names to
    arrays.  Moments are keyed by name.  Nothing is modified if any gradient
    is non-finite.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.values *= 1.0 - state.lr * state.weight_decay
        p.values -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


class AdamW:
    """Thin stateful wrapper around :func:`adamw_step`."""

    def __init__(self, params, lr=1e-3, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self, grads):
        if not isinstance(grads, dict):
            grads = dict(zip(self.params, grads))
        adamw_step(self.state, self.params, grads)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "lalqr-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors, meta=None):
    """Write named arrays as JSON: a metadata header plus (name, shape, values) entries.

    Floats are written with ``repr`` precision so a reload is bit-identical.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": dict(meta or {}),
        "tensors": [
            {
                "name": name,
                "shape": list(np.shape(_values(t))),
                "values": [float(x) for x in np.asarray(_values(t), dtype=np.float64).reshape(-1)],
            }
            for name, t in tensors.items()
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(arrays, meta)``."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    arrays = {
        e["name"]: np.array(e["values"], dtype=np.float64).reshape(e["shape"]) for e in doc["tensors"]
    }
    return arrays, doc["meta"]


def _values(t):
    return t.values if isinstance(t, Tensor) else t
