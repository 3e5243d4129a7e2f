"""Dense NCHW tensors with reverse-mode automatic differentiation.

Only the operations needed by the ResNet generators and PatchGAN
discriminators are provided: padded convolution, transposed convolution,
instance normalization, pointwise activations, elementwise arithmetic and
the two reduction losses.  Arrays are plain numpy; every operation records
a closure that maps the output gradient to gradients of its parents.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Graph", "GraphError", "NonFiniteError",
    "conv2d", "conv_transpose2d", "instance_norm", "activation",
    "relu", "leaky_relu", "tanh", "sigmoid",
    "add", "sub", "mul", "scale", "elementwise", "reduce_loss", "sum_all",
    "backward", "grad_check", "GradCheckReport",
    "no_grad", "precision", "default_dtype",
]

_ids = itertools.count(1)
_state = threading.local()


class GraphError(RuntimeError):
    """Misuse of the recorded graph (non-scalar loss, double backward)."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (``float64`` for gradient checks)."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "_parents", "_backward",
                 "_op", "_released", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else default_dtype()
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._released = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        """Same values, no graph attachment (shares the buffer)."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.node_id = next(_ids)
        t._parents = ()
        t._backward = None
        t._op = "leaf"
        t._released = False
        return t

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: non-finite values in output")
    out = Tensor(data, dtype=data.dtype)
    out._op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


# -- padding ---------------------------------------------------------------

def _fold_reflect(g: np.ndarray, k: int, axis: int) -> np.ndarray:
    """Adjoint of reflect padding by k along one axis."""
    n = g.shape[axis] - 2 * k
    g = np.moveaxis(g, axis, 0)
    out = g[k:k + n].copy()
    for i in range(k):
        out[k - i] += g[i]
        out[n - 2 - i] += g[k + n + i]
    return np.moveaxis(out, 0, axis)


def _pad(x: np.ndarray, pad) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    mode, k = _parse_pad(pad)
    if k == 0:
        return x, lambda g: g
    width = ((0, 0), (0, 0), (k, k), (k, k))
    if mode == "zero":
        return np.pad(x, width), lambda g: g[:, :, k:-k, k:-k]
    if k >= x.shape[2] or k >= x.shape[3]:
        raise ValueError(f"reflect pad {k} needs spatial extent > {k}, got {x.shape[2:]}")
    return np.pad(x, width, mode="reflect"), lambda g: _fold_reflect(_fold_reflect(g, k, 2), k, 3)


def _parse_pad(pad) -> tuple[str, int]:
    if pad is None or pad == "none":
        return "zero", 0
    if isinstance(pad, str):
        mode, _, k = pad.partition(":")
        pad = (mode, int(k))
    mode, k = pad
    if mode not in ("zero", "reflect") or k < 0:
        raise ValueError(f"bad padding spec {pad!r}")
    return mode, int(k)


# -- convolution -----------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    n, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def _col2im(cols: np.ndarray, shape, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = shape[:2]
    cols = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, :, :, i, j]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad=None) -> Tensor:
    """2-D cross-correlation. ``pad`` is None, ``("zero", k)`` or ``("reflect", k)``."""
    if x.data.ndim != 4 or w.data.ndim != 4 or b.data.ndim != 1:
        raise ValueError("conv2d expects x (N,C,H,W), w (Cout,Cin,k,k), b (Cout,)")
    n, cin, _, _ = x.shape
    cout, wcin, k, k2 = w.shape
    if wcin != cin or k != k2 or b.shape[0] != cout:
        raise ValueError(f"conv2d shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    if stride < 1:
        raise ValueError("stride must be positive")
    xp, unpad = _pad(x.data, pad)
    hp, wp = xp.shape[2:]
    if hp < k or wp < k:
        raise ValueError(f"padded extent {hp}x{wp} smaller than kernel {k}")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    cols = _im2col(xp, k, stride, ho, wo)
    wm = w.data.reshape(cout, -1)
    out = (cols @ wm.T + b.data).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def grad_fn(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = gw = gb = None
        if x.requires_grad:
            if stride == 1 and cout < cin:
                # full correlation with the flipped kernel gathers over the narrower gradient
                gp = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
                wf = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
                gcols = _im2col(gp, k, 1, hp, wp)
                gxp = (gcols @ wf.T).reshape(n, hp, wp, cin).transpose(0, 3, 1, 2)
                gx = unpad(np.ascontiguousarray(gxp))
            else:
                gx = unpad(_col2im(gm @ wm, xp.shape, k, stride, ho, wo))
        if w.requires_grad:
            gw = (gm.T @ cols).reshape(w.shape)
        if b.requires_grad:
            gb = gm.sum(axis=0)
        return gx, gw, gb

    return _result(np.ascontiguousarray(out), (x, w, b), grad_fn, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0,
                     out_pad: int = 0) -> Tensor:
    """Adjoint of ``conv2d`` with zero padding ``pad``; ``w`` is (Cin, Cout, k, k)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or b.data.ndim != 1:
        raise ValueError("conv_transpose2d expects x (N,C,H,W), w (Cin,Cout,k,k), b (Cout,)")
    n, cin, h, wd = x.shape
    wcin, cout, k, k2 = w.shape
    if wcin != cin or k != k2 or b.shape[0] != cout:
        raise ValueError(f"conv_transpose2d shape mismatch: x {x.shape}, w {w.shape}")
    if stride < 1 or pad < 0 or not 0 <= out_pad < stride:
        raise ValueError("need stride >= 1, pad >= 0 and 0 <= out_pad < stride")
    ho = (h - 1) * stride - 2 * pad + k + out_pad
    wo = (wd - 1) * stride - 2 * pad + k + out_pad
    if ho < 1 or wo < 1:
        raise ValueError("non-positive output extent")
    full = (n, cout, max((h - 1) * stride + k, pad + ho), max((wd - 1) * stride + k, pad + wo))
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    wm = w.data.reshape(cin, -1)
    buf = _col2im(xm @ wm, full, k, stride, h, wd)
    out = buf[:, :, pad:pad + ho, pad:pad + wo] + b.data[None, :, None, None]

    def grad_fn(g):
        gbuf = np.zeros(full, dtype=g.dtype)
        gbuf[:, :, pad:pad + ho, pad:pad + wo] = g
        cols = _im2col(gbuf, k, stride, h, wd)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (cols @ wm.T).reshape(n, h, wd, cin).transpose(0, 3, 1, 2)
        if w.requires_grad:
            gw = (xm.T @ cols).reshape(w.shape)
        if b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _result(np.ascontiguousarray(out), (x, w, b), grad_fn, "conv_transpose2d")


# -- normalization and pointwise --------------------------------------------

def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel spatial standardization (no affine terms).

    A zero-variance slice with ``eps == 0`` maps to zeros.
    """
    if x.data.ndim != 4:
        raise ValueError("instance_norm expects (N,C,H,W)")
    xc = x.data - x.data.mean(axis=(2, 3), keepdims=True)
    var = (xc * xc).mean(axis=(2, 3), keepdims=True) + eps
    degenerate = var <= 0
    inv = np.where(degenerate, 0.0, 1.0 / np.sqrt(np.where(degenerate, 1.0, var))).astype(x.dtype)
    xhat = xc * inv

    def grad_fn(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gxh = (g * xhat).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - xhat * gxh),)

    return _result(xhat, (x,), grad_fn, "instance_norm")


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise ``relu``, ``leaky_relu`` (slope 0.2), ``tanh`` or ``sigmoid``."""
    d = x.data
    if kind == "relu":
        pos = d > 0
        return _result(d * pos, (x,), lambda g: (g * pos,), "relu")
    if kind == "leaky_relu":
        slope = np.where(d > 0, 1.0, 0.2).astype(d.dtype)
        return _result(d * slope, (x,), lambda g: (g * slope,), "leaky_relu")
    if kind == "tanh":
        y = np.tanh(d)
        return _result(y, (x,), lambda g: (g * (1 - y * y),), "tanh")
    if kind == "sigmoid":
        y = 0.5 * (1 + np.tanh(0.5 * d))
        return _result(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")
    raise ValueError(f"unknown activation {kind!r}")


def relu(x):
    return activation(x, "relu")


def leaky_relu(x):
    return activation(x, "leaky_relu")


def tanh(x):
    return activation(x, "tanh")


def sigmoid(x):
    return activation(x, "sigmoid")


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def elementwise(a: Tensor, b, kind: str) -> Tensor:
    ops = {"add": add, "sub": sub, "mul": mul, "scale": scale}
    if kind not in ops:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


def sum_all(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                   lambda g: (np.full(a.shape, g, dtype=a.dtype),), "sum")


def reduce_loss(a: Tensor, b, kind: str) -> Tensor:
    """Scalar ``l1`` (mean absolute) or ``mse`` (mean squared) distance.

    ``b`` may be a tensor of the same shape or a constant target.
    """
    b = _as_tensor(b, a)
    _check_same(a, b, kind)
    diff = a.data - b.data
    n = a.dtype.type(diff.size)
    if kind == "l1":
        val = np.abs(diff).mean(dtype=a.dtype)
        sign = np.sign(diff)

        def grad_fn(g):
            ga = g * sign / n
            return ga, -ga
    elif kind == "mse":
        val = (diff * diff).mean(dtype=a.dtype)

        def grad_fn(g):
            ga = (2 * g / n) * diff
            return ga, -ga
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    return _result(np.asarray(val, dtype=a.dtype), (a, b), grad_fn, kind)


# -- backward ---------------------------------------------------------------

@dataclass
class Graph:
    """Recorded nodes reachable from a root, in reverse topological order."""
    topo_order: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> Graph:
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.requires_grad and p.node_id not in seen:
                    stack.append((p, False))
        order.reverse()
        return cls(order)

    @property
    def nodes(self) -> list[Tensor]:
        return self.topo_order


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Gradients of a scalar loss, keyed by ``node_id``.

    Every leaf requiring grad that is reachable gets an entry; tensors listed
    in ``wrt`` but unreachable get zeros. The interior graph is released
    afterwards, so a second call on the same loss raises ``GraphError``.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise GraphError("graph already consumed by a previous backward; re-run the forward")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        grads[loss.node_id] = np.ones((), dtype=loss.dtype)
        for node in Graph.from_root(loss).topo_order:
            g = grads.get(node.node_id)
            if node.is_leaf:
                leaves[node.node_id] = node
                continue
            if g is not None:
                pgrads = node._backward(g)
                for p, pg in zip(node._parents, pgrads):
                    if pg is None or not p.requires_grad:
                        continue
                    if p.node_id in grads:
                        grads[p.node_id] = grads[p.node_id] + pg
                    else:
                        grads[p.node_id] = pg
                del grads[node.node_id]
            node._backward = None
            node._parents = ()
            node._released = True
    out = {i: grads.get(i, np.zeros(t.shape, t.dtype)) for i, t in leaves.items()}
    for t in wrt or ():
        out.setdefault(t.node_id, np.zeros(t.shape, t.dtype))
    loss._released = True
    return out


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    per_input: list[float]

    @property
    def pass_(self) -> bool:
        return self.passed


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray | Tensor],
               h: float = 1e-4, tol: float = 1e-5, seed: int = 0) -> GradCheckReport:
    """Compare ``backward`` against central differences for every input element.

    Non-scalar outputs are contracted with a fixed random weight tensor.
    The step for element x is ``h * max(1, |x|)``; the error for one input is
    ``max|analytic - numeric| / max(max|numeric|, max|analytic|, 1e-12)``.
    """
    arrays = [np.array(i.data if isinstance(i, Tensor) else i, dtype=np.float64) for i in inputs]
    with precision(np.float64):
        probe = fn(*[Tensor(a) for a in arrays])
        weight = np.random.default_rng(seed).standard_normal(probe.shape)

        def scalar(tensors):
            out = fn(*tensors)
            if out.data.ndim:
                out = sum_all(mul(out, Tensor(weight)))
            return out

        ts = [Tensor(a, requires_grad=True) for a in arrays]
        loss = scalar(ts)
        grads = backward(loss, wrt=ts)
        errs = []
        for k, a in enumerate(arrays):
            num = np.zeros_like(a)
            flat = a.reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                step = h * max(1.0, abs(orig))
                flat[idx] = orig + step
                fp = scalar([Tensor(x) for x in arrays]).item()
                flat[idx] = orig - step
                fm = scalar([Tensor(x) for x in arrays]).item()
                flat[idx] = orig
                num.reshape(-1)[idx] = (fp - fm) / (2 * step)
            ana = grads[ts[k].node_id]
            if not (np.isfinite(num).all() and np.isfinite(ana).all()):
                raise NonFiniteError("grad_check: non-finite gradient")
            denom = max(np.abs(num).max(initial=0.0), np.abs(ana).max(initial=0.0), 1e-12)
            errs.append(float(np.abs(ana - num).max(initial=0.0) / denom))
    worst = max(errs, default=0.0)
    return GradCheckReport(worst, worst <= tol, errs)
