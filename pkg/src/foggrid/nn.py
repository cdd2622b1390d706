"""Small differentiable kernel: dense layers, activations, masked softmax and
tape-based reverse-mode gradients over float64 numpy arrays.

Matrices are plain 2-D ``np.ndarray`` values. Every op also accepts a leading
batch axis, which is how minibatches of graphs are pushed through at once.

Gradients are recorded on a :class:`Tape`. Wrap parameters with
:meth:`Tape.watch`, run the forward computation, then call :func:`backward`::

    tape = Tape()
    p = tape.watch(params)
    loss = mse(dense(x, p["W"], p["b"]), y)
    grads = backward(loss)
"""

from __future__ import annotations

from collections.abc import Callable, Iterator, Mapping
from typing import Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "TapeError",
    "ParamSet",
    "Tape",
    "Var",
    "as_array",
    "dense_forward",
    "relu",
    "leaky_relu",
    "masked_softmax",
    "dense",
    "matmul",
    "add",
    "attention_logits",
    "gather_rows",
    "total",
    "mse",
    "backward",
    "sgd_step",
    "gradient_check",
    "init_params",
]


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class ParamSet(Mapping):
    """Immutable, ordered name -> array mapping.

    Arrays are copied to float64 and frozen on construction, so a ParamSet can
    be shared freely. Iteration order is insertion order.
    """

    __slots__ = ("_data",)

    def __init__(self, items: Mapping[str, np.ndarray] | Sequence[tuple[str, np.ndarray]]):
        pairs = items.items() if isinstance(items, Mapping) else items
        data = {}
        for name, value in pairs:
            arr = np.array(value, dtype=np.float64, copy=True)
            arr.setflags(write=False)
            data[name] = arr
        self._data = data

    def __getitem__(self, key: str) -> np.ndarray:
        return self._data[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._data.items())
        return f"ParamSet({shapes})"

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self._data.items()}

    def map(self, fn: Callable[[str, np.ndarray], np.ndarray]) -> "ParamSet":
        return ParamSet([(k, fn(k, v)) for k, v in self._data.items()])

    def zeros_like(self) -> "ParamSet":
        return self.map(lambda _, v: np.zeros_like(v))

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._data.values()]) if self._data else np.zeros(0)

    def equals(self, other: "ParamSet") -> bool:
        """Bit-exact equality (same keys, order, shapes and values)."""
        if list(self) != list(other):
            return False
        return all(self[k].shape == other[k].shape and np.array_equal(self[k], other[k]) for k in self)


# GradientSet shares the representation: same keys and shapes as its ParamSet.
GradientSet = ParamSet


def _check_compatible(a: Mapping, b: Mapping, what: str) -> None:
    if list(a) != list(b):
        raise ShapeError(f"{what}: key sets differ: {list(a)} vs {list(b)}")
    for k in a:
        if np.shape(a[k]) != np.shape(b[k]):
            raise ShapeError(f"{what}: shape mismatch for {k!r}: {np.shape(a[k])} vs {np.shape(b[k])}")


class Var:
    """An array value, optionally recorded on a tape."""

    __slots__ = ("value", "tape", "index", "name")

    def __init__(self, value: np.ndarray, tape: "Tape | None" = None, name: str | None = None):
        self.value = value
        self.tape = tape
        self.index = -1
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, tracked={self.tape is not None})"


class Tape:
    """Records forward ops in execution order for a reverse sweep."""

    def __init__(self) -> None:
        self.nodes: list[Var] = []
        self.backward_fns: list[Callable[[np.ndarray], None] | None] = []
        self.grads: list[np.ndarray | None] = []
        self.watched: dict[str, Var] = {}

    def watch(self, params: Mapping[str, np.ndarray]) -> dict[str, Var]:
        out = {}
        for name, value in params.items():
            v = self._register(Var(np.asarray(value, dtype=np.float64), self, name), None)
            out[name] = v
            self.watched[name] = v
        return out

    def _register(self, var: Var, backward_fn) -> Var:
        var.tape = self
        var.index = len(self.nodes)
        self.nodes.append(var)
        self.backward_fns.append(backward_fn)
        self.grads.append(None)
        return var

    def accumulate(self, var: Var, grad: np.ndarray) -> None:
        if var.tape is not self:
            return
        grad = _unbroadcast(grad, var.value.shape)
        cur = self.grads[var.index]
        self.grads[var.index] = grad if cur is None else cur + grad


def as_array(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise TapeError("inputs are recorded on different tapes")
            tape = x.tape
    return tape


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _emit(value: np.ndarray, inputs: tuple, backward_fn) -> Var | np.ndarray:
    """Wrap an op result: a recorded Var if any input is on a tape, else an array."""
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    return tape._register(Var(value), backward_fn)


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------- forward ops


def dense_forward(W, b, X) -> np.ndarray:
    """Rowwise affine map: row i of the result is ``W @ X[i] + b``."""
    W, b, X = as_array(W), as_array(b), as_array(X)
    if W.ndim != 2 or X.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"dense: W{W.shape}, b{b.shape} incompatible with X{X.shape}")
    rows = X.reshape(-1, X.shape[-1])
    if rows.shape[0] == 1:
        # BLAS takes a different path for one row; pad so results never depend on row count
        y = (np.vstack([rows, rows]) @ W.T)[:1] + b
    else:
        y = rows @ W.T + b
    return y.reshape(*X.shape[:-1], W.shape[0])


def dense(X, W, b):
    """Differentiable ``dense_forward``."""
    y = dense_forward(W, b, X)

    def back(g):
        tape = out.tape
        Xv, Wv = as_array(X), as_array(W)
        g2 = g.reshape(-1, g.shape[-1])
        if isinstance(X, Var):
            tape.accumulate(X, (g2 @ Wv).reshape(Xv.shape))
        if isinstance(W, Var):
            tape.accumulate(W, g2.T @ Xv.reshape(-1, Xv.shape[-1]))
        if isinstance(b, Var):
            tape.accumulate(b, g2.sum(axis=0))

    out = _emit(y, (X, W, b), back)
    return out


def matmul(A, B):
    a, b = as_array(A), as_array(B)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    y = a @ b

    def back(g):
        tape = out.tape
        if isinstance(A, Var):
            tape.accumulate(A, g @ _swap(b))
        if isinstance(B, Var):
            tape.accumulate(B, _swap(a) @ g)

    out = _emit(y, (A, B), back)
    return out


def add(A, B):
    a, b = as_array(A), as_array(B)
    y = a + b

    def back(g):
        tape = out.tape
        if isinstance(A, Var):
            tape.accumulate(A, g)
        if isinstance(B, Var):
            tape.accumulate(B, g)

    out = _emit(y, (A, B), back)
    return out


def relu(x):
    v = as_array(x)
    y = np.maximum(v, 0.0)

    def back(g):
        out.tape.accumulate(x, g * (v > 0))

    out = _emit(y, (x,), back)
    return out


def leaky_relu(x, slope: float = 0.2):
    v = as_array(x)
    pos = v >= 0
    y = np.where(pos, v, slope * v)

    def back(g):
        out.tape.accumulate(x, np.where(pos, g, slope * g))

    out = _emit(y, (x,), back)
    return out


def masked_softmax(logits, mask):
    """Softmax over the last axis restricted to entries where ``mask`` is nonzero.

    Masked-out entries are exactly 0. Every mask row must have at least one
    nonzero entry.
    """
    z = as_array(logits)
    m = np.asarray(mask) != 0
    if m.shape != z.shape[-m.ndim:] and m.shape != z.shape:
        raise ShapeError(f"masked_softmax: mask{m.shape} vs logits{z.shape}")
    if not m.any(axis=-1).all():
        raise ValueError("masked_softmax: mask has an all-zero row; insert self-loops first")
    shifted = np.where(m, z, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(m, np.exp(shifted), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        out.tape.accumulate(logits, y * (g - dot))

    out = _emit(y, (logits,), back)
    return out


def attention_logits(Z, a):
    """Pairwise scores ``a . [z_i || z_j]`` for all i, j: shape (..., N, N)."""
    z, av = as_array(Z), as_array(a)
    d = z.shape[-1]
    if av.shape != (2 * d,):
        raise ShapeError(f"attention vector has shape {av.shape}, expected ({2 * d},)")
    src = z @ av[:d]
    dst = z @ av[d:]
    y = src[..., :, None] + dst[..., None, :]

    def back(g):
        tape = out.tape
        gs = g.sum(axis=-1)
        gd = g.sum(axis=-2)
        if isinstance(Z, Var):
            tape.accumulate(Z, gs[..., None] * av[:d] + gd[..., None] * av[d:])
        if isinstance(a, Var):
            ga_src = (gs[..., None] * z).reshape(-1, d).sum(axis=0)
            ga_dst = (gd[..., None] * z).reshape(-1, d).sum(axis=0)
            tape.accumulate(a, np.concatenate([ga_src, ga_dst]))

    out = _emit(y, (Z, a), back)
    return out


def gather_rows(Q, index):
    """``Q[..., i, index[..., i]]``: pick one column per row."""
    q = as_array(Q)
    idx = np.asarray(index, dtype=np.int64)
    y = np.take_along_axis(q, idx[..., None], axis=-1)[..., 0]

    def back(g):
        full = np.zeros_like(q)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        out.tape.accumulate(Q, full)

    out = _emit(y, (Q,), back)
    return out


def total(x):
    """Sum of all entries as a scalar."""
    v = as_array(x)

    def back(g):
        out.tape.accumulate(x, np.broadcast_to(g, v.shape).copy())

    out = _emit(np.array(v.sum()), (x,), back)
    return out


def mse(pred, target):
    """Mean squared error against a constant target; returns a scalar."""
    p = as_array(pred)
    t = np.asarray(target, dtype=np.float64)
    diff = p - t
    y = np.array(np.mean(diff * diff))

    def back(g):
        out.tape.accumulate(pred, g * 2.0 * diff / diff.size)

    out = _emit(y, (pred,), back)
    return out


def backward(loss, loss_grad: float | np.ndarray = 1.0) -> ParamSet:
    """Reverse sweep from ``loss``; returns gradients for every watched parameter."""
    if not isinstance(loss, Var) or loss.tape is None:
        raise TapeError("backward needs a result recorded on a tape (call Tape.watch before the forward pass)")
    tape = loss.tape
    tape.grads = [None] * len(tape.nodes)
    tape.grads[loss.index] = np.broadcast_to(np.asarray(loss_grad, dtype=np.float64), loss.value.shape).copy()
    for i in range(loss.index, -1, -1):
        g = tape.grads[i]
        fn = tape.backward_fns[i]
        if g is None or fn is None:
            continue
        fn(g)
    return ParamSet(
        [
            (name, tape.grads[v.index] if tape.grads[v.index] is not None else np.zeros_like(v.value))
            for name, v in tape.watched.items()
        ]
    )


def sgd_step(params: ParamSet, grads: Mapping[str, np.ndarray], lr: float) -> ParamSet:
    _check_compatible(params, grads, "sgd_step")
    if lr == 0:
        return params
    return params.map(lambda k, v: v - lr * grads[k])


def gradient_check(
    fn: Callable[[Mapping], object],
    params: ParamSet,
    epsilon: float = 1e-5,
    per_param: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative error between tape gradients of ``fn`` and central differences.

    ``fn`` maps a parameter mapping (arrays or tape Vars) to a scalar. With
    ``per_param`` set, only that many randomly chosen entries of each
    parameter are probed; otherwise every entry is. ``floor`` bounds the
    denominator of the relative error from below: central differences carry
    roundoff of about ``eps_machine * |loss| / epsilon`` (~1e-11 here), so
    smaller gradients cannot be resolved relatively.
    """
    tape = Tape()
    analytic = backward(fn(tape.watch(params)))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in params:
        base = np.array(params[name], copy=True)
        entries = list(np.ndindex(base.shape))
        if per_param is not None and per_param < len(entries):
            entries = [entries[i] for i in rng.choice(len(entries), per_param, replace=False)]
        for idx in entries:
            probe = base.copy()
            probe[idx] = base[idx] + epsilon
            plus = float(as_array(fn(_replace(params, name, probe))))
            probe[idx] = base[idx] - epsilon
            minus = float(as_array(fn(_replace(params, name, probe))))
            cd = (plus - minus) / (2 * epsilon)
            an = float(analytic[name][idx])
            err = abs(an - cd) / max(abs(an), abs(cd), floor)
            worst = max(worst, err)
    return worst


def _replace(params: Mapping, name: str, value: np.ndarray) -> dict:
    out = dict(params)
    out[name] = value
    return out


def init_params(layers: Sequence[tuple[str, tuple[int, ...]]], seed: int) -> ParamSet:
    """Glorot-uniform weights and zero biases.

    ``layers`` is a sequence of (name, shape). 1-D shapes are biases (zeros);
    2-D shapes are weights of shape (fan_out, fan_in). A name ending in
    ``"attn"`` marks an attention vector of length 2d, drawn with fan_in = 2d,
    fan_out = 1.
    """
    rng = np.random.default_rng(seed)
    out = []
    for name, shape in layers:
        if name.endswith("attn"):
            limit = np.sqrt(6.0 / (shape[0] + 1))
            value = rng.uniform(-limit, limit, size=shape)
        elif len(shape) == 1:
            value = np.zeros(shape)
        else:
            fan_out, fan_in = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            value = rng.uniform(-limit, limit, size=shape)
        out.append((name, value))
    return ParamSet(out)
