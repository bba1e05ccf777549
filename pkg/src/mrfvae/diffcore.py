"""Minimal reverse-mode autodiff over dense float64 arrays.

The primitive set is deliberately small: matmul, elementwise arithmetic,
relu/exp/ln/square, sum/mean reductions, concat/narrow/reshape/transpose,
lower-triangular solve and diagonal extraction. Everything else in the
package is composed from these so that every objective stays differentiable
end to end. Gradients are recorded on an explicit :class:`Tape`; two tapes
never share gradient state.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ContractError, DimensionError, ParseError, TrainingError

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    def __init__(self):
        self._ops = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def _record(self, out, inputs, bwd):
        self._ops.append((out, inputs, bwd))


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Var:
    """A float64 array plus an optional parameter name."""

    __slots__ = ("data", "name")

    def __init__(self, data, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Var(shape={self.data.shape}{tag})"

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

    def __matmul__(self, other):
        return matmul(self, other)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def value(x) -> np.ndarray:
    return x.data if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def _make(out_data, inputs, bwd):
    out = Var(out_data)
    tape = active_tape()
    if tape is not None:
        tape._record(out, inputs, bwd)
    return out


def add(a, b):
    a, b = as_var(a), as_var(b)

    def bwd(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b):
    a, b = as_var(a), as_var(b)

    def bwd(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b):
    a, b = as_var(a), as_var(b)

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bwd)


def matmul(a, b):
    a, b = as_var(a), as_var(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError("matmul requires array operands")
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), value(b).shape[:-2] + (value(b).shape[-1],))
    if b.ndim == 1:
        out = matmul(a, reshape(b, (b.shape[0], 1)))
        return reshape(out, out.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(a.data @ b.data, (a, b), bwd)


def relu(x):
    x = as_var(x)
    keep = x.data > 0

    def bwd(g):
        return (g * keep,)

    return _make(np.where(keep, x.data, 0.0), (x,), bwd)


def exp(x):
    x = as_var(x)
    out_data = np.exp(x.data)

    def bwd(g):
        return (g * out_data,)

    return _make(out_data, (x,), bwd)


def log(x):
    x = as_var(x)

    def bwd(g):
        return (g / x.data,)

    return _make(np.log(x.data), (x,), bwd)


def square(x):
    x = as_var(x)

    def bwd(g):
        return (2.0 * g * x.data,)

    return _make(np.square(x.data), (x,), bwd)


def absval(x):
    """|x| elementwise; subgradient 0 at 0."""
    x = as_var(x)
    s = np.sign(x.data)

    def bwd(g):
        return (g * s,)

    return _make(np.abs(x.data), (x,), bwd)


def clip_nonneg(x):
    """max(x, 0) with pass-through gradient on the positive part."""
    x = as_var(x)
    keep = x.data >= 0

    def bwd(g):
        return (g * keep,)

    return _make(np.where(keep, x.data, 0.0), (x,), bwd)


def vsum(x, axis=None, keepdims=False):
    x = as_var(x)
    in_shape = x.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bwd)


def vmean(x, axis=None, keepdims=False):
    x = as_var(x)
    if axis is None:
        n = x.data.size
    else:
        n = np.prod([x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(vsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def concat(parts, axis=-1):
    parts = [as_var(p) for p in parts]
    ax = axis
    sizes = [p.shape[ax if ax >= 0 else p.ndim + ax] for p in parts]

    def bwd(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=ax))

    return _make(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), bwd)


def narrow(x, axis, start, length):
    """Contiguous slice of extent `length` starting at `start` along `axis`."""
    x = as_var(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(g):
        full = np.zeros(x.shape)
        full[idx] = g
        return (full,)

    return _make(x.data[idx].copy(), (x,), bwd)


def reshape(x, shape):
    x = as_var(x)
    in_shape = x.shape

    def bwd(g):
        return (g.reshape(in_shape),)

    return _make(x.data.reshape(shape), (x,), bwd)


def transpose_last(x):
    x = as_var(x)

    def bwd(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(np.swapaxes(x.data, -1, -2).copy(), (x,), bwd)


def diag_part(x):
    """Diagonal of the trailing two axes: (..., D, D) -> (..., D)."""
    x = as_var(x)
    d = x.shape[-1]

    def bwd(g):
        full = np.zeros(x.shape)
        idx = np.arange(d)
        full[..., idx, idx] = g
        return (full,)

    return _make(np.diagonal(x.data, axis1=-2, axis2=-1).copy(), (x,), bwd)


def tril_solve(chol, rhs):
    """Solve L x = rhs for lower-triangular L; strictly-upper entries ignored.

    Gradients flow by reverse substitution (solves against L^T), never by
    forming an inverse.
    """
    chol, rhs = as_var(chol), as_var(rhs)
    if chol.shape[-1] != rhs.shape[-2]:
        raise DimensionError(f"tril_solve extents differ: {chol.shape} vs {rhs.shape}")
    ldata = np.tril(chol.data)
    x = np.linalg.solve(ldata, rhs.data)
    lt = np.swapaxes(ldata, -1, -2)

    def bwd(g):
        grad_rhs = np.linalg.solve(lt, g)
        grad_l = -(grad_rhs @ np.swapaxes(np.broadcast_to(x, grad_rhs.shape), -1, -2))
        grad_l = np.tril(grad_l)
        return (_unbroadcast(grad_l, chol.shape), _unbroadcast(grad_rhs, rhs.shape))

    return _make(x, (chol, rhs), bwd)


def tril_solve_vec(chol, rhs):
    """tril_solve against a trailing vector: rhs shape (..., D)."""
    rhs = as_var(rhs)
    if rhs.ndim == 1:
        out = tril_solve(chol, reshape(rhs, (rhs.shape[0], 1)))
        return reshape(out, (rhs.shape[0],))
    out = tril_solve(chol, reshape(rhs, rhs.shape + (1,)))
    return reshape(out, out.shape[:-1])


def matvec(a, b):
    """matmul against a trailing vector: (..., m, n) @ (..., n) -> (..., m)."""
    a, b = as_var(a), as_var(b)
    if b.ndim == 1:
        return matmul(a, b)
    out = matmul(a, reshape(b, b.shape + (1,)))
    return reshape(out, out.shape[:-1])


def quadratic_form(v):
    """0.5 * ||v||^2 summed over the last axis."""
    return mul(vsum(square(v), axis=-1), 0.5)


def logsumexp(x, axis=-1):
    """Numerically stable ln(sum(exp(x))) along `axis`."""
    x = as_var(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = sub(x, m)
    s = vsum(exp(shifted), axis=axis)
    return add(log(s), np.squeeze(m, axis=axis))


def backward(tape: Tape, loss: Var, wrt=None):
    """Accumulate d(loss)/d(v) for every named Var on `tape`.

    Returns a map name -> gradient array. Vars listed in `wrt` that never
    touched the tape get exact zeros.
    """
    if not isinstance(loss, Var):
        raise ContractError("loss must be a Var")
    if loss.data.shape != ():
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    named: dict[str, np.ndarray] = {}
    for out, inputs, bwd in reversed(tape._ops):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, bwd(g)):
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp.name is not None:
                named[inp.name] = grads[key]
    if wrt is not None:
        for v in wrt:
            if v.name is not None and v.name not in named:
                named[v.name] = np.zeros(v.shape)
    return named


_INITS = {"relu": 2.0, "linear": 1.0, "exp": 1.0, "square": 1.0}


class Mlp:
    """Fully connected stack with per-layer activation in {relu, linear, exp}."""

    def __init__(self, dims, activations, prefix, rng):
        if len(dims) < 2 or len(activations) != len(dims) - 1:
            raise ContractError("dims/activations lengths do not chain")
        for act in activations:
            if act not in _INITS:
                raise ContractError(f"unknown activation {act!r}")
        self.dims = list(dims)
        self.activations = list(activations)
        self.prefix = prefix
        self.layers = []
        for k, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
            scale = np.sqrt(_INITS[activations[k]] / n_in)
            w = Var(rng.standard_normal((n_in, n_out)) * scale, name=f"{prefix}.w{k}")
            b = Var(np.zeros(n_out), name=f"{prefix}.b{k}")
            self.layers.append((w, b, activations[k]))

    def params(self) -> dict[str, Var]:
        out = {}
        for w, b, _ in self.layers:
            out[w.name] = w
            out[b.name] = b
        return out

    def __call__(self, x):
        x = as_var(x)
        if x.shape[-1] != self.dims[0]:
            raise DimensionError(
                f"{self.prefix}: input extent {x.shape[-1]} != expected {self.dims[0]}"
            )
        for w, b, act in self.layers:
            x = add(matmul(x, w), b)
            if act == "relu":
                x = relu(x)
            elif act == "exp":
                x = exp(x)
            elif act == "square":
                x = square(x)
        return x

    forward = __call__


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update. `params`/`grads` map name -> array; returns new maps."""
    if state is None:
        state = {
            "t": 0,
            "m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()},
        }
    t = state["t"] + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}", param=name)
        m = beta1 * state["m"][name] + (1.0 - beta1) * g
        v = beta2 * state["v"][name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, {"t": t, "m": new_m, "v": new_v}


def _fmt(x: float) -> str:
    # 17 significant digits round-trips any finite float64 exactly
    return format(float(x), ".17g")


def params_to_json(params) -> str:
    """Serialize name -> array as a JSON document, reals at 17 sig digits."""
    items = []
    for name in sorted(params):
        arr = np.asarray(value(params[name]), dtype=np.float64)
        shape = json.dumps(list(arr.shape))
        vals = ",".join(_fmt(v) for v in arr.reshape(-1))
        items.append(f'{json.dumps(name)}:{{"shape":{shape},"values":[{vals}]}}')
    return "{" + ",".join(items) + "}"


def params_from_json(text: str) -> dict[str, np.ndarray]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed checkpoint: {e}", line=e.lineno) from e
    out = {}
    for name, entry in doc.items():
        if not isinstance(entry, dict) or "shape" not in entry or "values" not in entry:
            raise ParseError(f"checkpoint entry {name!r} missing shape/values")
        arr = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        out[name] = arr
    return out


def save_checkpoint(params, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(params_to_json(params))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "r", encoding="utf-8") as f:
        return params_from_json(f.read())
