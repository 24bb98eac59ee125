"""Minimal reverse-mode autodiff on numpy arrays.

Covers exactly the ops the codecs and transformers need: broadcasting
arithmetic, matmul, reductions, softmax/log-softmax, layer norm, embedding
lookup, causal 1-d (transposed) convolutions and a straight-through
primitive.  Double precision throughout; a module-level no_grad switch
turns every op into a plain numpy computation for inference.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager

import numpy as np

from .errors import CheckpointMissing, FormatError, NonFiniteValue, ShapeError

_grad_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- graph plumbing -------------------------------------------------

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without grad needs a scalar output")
            grad = np.ones_like(self.data)
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen or not isinstance(t, Tensor):
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        self.grad = np.asarray(grad, dtype=np.float64)
        for t in reversed(topo):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if isinstance(p, Tensor) and p.requires_grad)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic ----------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def power(a, p: float):
    a = as_tensor(a)
    out_data = a.data ** p

    def backward(g):
        a._accum(g * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), backward)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accum(g * out_data)

    return _make(out_data, (a,), backward)


def log(a):
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        a._accum(g / a.data)

    return _make(out_data, (a,), backward)


def sqrt(a):
    return power(a, 0.5)


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        a._accum(g * (1.0 - out_data ** 2))

    return _make(out_data, (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        a._accum(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def arccos(a):
    a = as_tensor(a)
    out_data = np.arccos(a.data)

    def backward(g):
        a._accum(-g / np.sqrt(1.0 - a.data ** 2))

    return _make(out_data, (a,), backward)


def clip(a, lo: float, hi: float):
    """Clamp with zero gradient outside [lo, hi]."""
    a = as_tensor(a)
    out_data = np.clip(a.data, lo, hi)
    mask = (a.data > lo) & (a.data < hi)

    def backward(g):
        a._accum(g * mask)

    return _make(out_data, (a,), backward)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    out_data = a.data * mask

    def backward(g):
        a._accum(g * mask)

    return _make(out_data, (a,), backward)


def gelu(a):
    """tanh-approximation GELU."""
    a = as_tensor(a)
    c = np.sqrt(2.0 / np.pi)
    u = c * (a.data + 0.044715 * a.data ** 3)
    t = np.tanh(u)
    out_data = 0.5 * a.data * (1.0 + t)

    def backward(g):
        du = c * (1.0 + 3 * 0.044715 * a.data ** 2)
        a._accum(g * (0.5 * (1.0 + t) + 0.5 * a.data * (1.0 - t ** 2) * du))

    return _make(out_data, (a,), backward)


# -- shape ops -----------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out_data = a.data.reshape(shape)
    in_shape = a.data.shape

    def backward(g):
        a._accum(g.reshape(in_shape))

    return _make(out_data, (a,), backward)


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    out_data = np.swapaxes(a.data, ax1, ax2)

    def backward(g):
        a._accum(np.swapaxes(g, ax1, ax2))

    return _make(out_data, (a,), backward)


def getitem(a, idx):
    a = as_tensor(a)
    out_data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accum(full)

    return _make(out_data, (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offs = np.cumsum([0] + sizes)
        for t, s0, s1 in zip(tensors, offs[:-1], offs[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(s0, s1)
                t._accum(g[tuple(sl)])

    return _make(out_data, tuple(tensors), backward)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.data.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / n)


# -- linear algebra ------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            if a.data.ndim == 1:
                ga = ga if g.ndim == 1 else ga.sum(axis=tuple(range(ga.ndim - 1)))
            else:
                ga = _unbroadcast(ga, a.data.shape)
            a._accum(ga)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            gb = _unbroadcast(gb, b.data.shape)
            b._accum(gb)

    return _make(out_data, (a, b), backward)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accum(out_data * (g - dot))

    return _make(out_data, (a,), backward)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    p = np.exp(out_data)

    def backward(g):
        a._accum(g - p * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data
    d = x.data.shape[-1]

    def backward(g):
        if gamma.requires_grad:
            gamma._accum(_unbroadcast(g * xhat, gamma.data.shape))
        if beta.requires_grad:
            beta._accum(_unbroadcast(g, beta.data.shape))
        if x.requires_grad:
            gx = g * gamma.data
            term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            x._accum(term * inv)

    return _make(out_data, (x, gamma, beta), backward)


def embedding(table, idx):
    """Row gather: table (V, d), idx int array (...,) -> (..., d)."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    out_data = table.data[idx]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        table._accum(full)

    return _make(out_data, (table,), backward)


def take(a, idx, axis):
    """np.take with gradient; idx is a plain int array."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out_data = np.take(a.data, idx, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.data.ndim
        flat_idx = idx.reshape(-1)
        g_moved = np.moveaxis(g, axis, 0) if idx.ndim == 1 else None
        if idx.ndim == 1:
            fm = np.moveaxis(full, axis, 0)
            np.add.at(fm, flat_idx, g_moved)
        else:
            raise ShapeError("take backward supports 1-d idx only")
        del sl
        a._accum(full)

    return _make(out_data, (a,), backward)


def straight_through(hard: np.ndarray, soft) -> Tensor:
    """Forward `hard`, backward d(soft) unchanged."""
    soft = as_tensor(soft)
    if hard.shape != soft.data.shape:
        raise ShapeError("straight_through shapes differ")
    out_data = np.asarray(hard, dtype=np.float64)

    def backward(g):
        soft._accum(g)

    return _make(out_data, (soft,), backward)


# -- causal 1-d convolutions ----------------------------------------------

def conv1d_causal(x, w, b, stride: int = 1):
    """Causal 1-d convolution.

    x: (B, T, Cin); w: (k, Cin, Cout); b: (Cout,).
    Left-pads by (k - stride) so output row t sees inputs <= t*stride + stride - 1.
    T must be divisible by stride; output length T // stride.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    B, T, cin = x.data.shape
    k, cin2, cout = w.data.shape
    if cin != cin2:
        raise ShapeError("conv1d channel mismatch")
    if T % stride != 0:
        raise ShapeError("conv1d length not divisible by stride")
    pad = k - stride
    xp = np.concatenate([np.zeros((B, pad, cin)), x.data], axis=1)
    t_out = T // stride
    # windows: (B, t_out, k, Cin)
    idx = (np.arange(t_out)[:, None] * stride + np.arange(k)[None, :])
    win = xp[:, idx, :]
    out_data = np.einsum("btkc,kcd->btd", win, w.data) + b.data

    def backward(g):
        if b.requires_grad:
            b._accum(g.sum(axis=(0, 1)))
        if w.requires_grad:
            w._accum(np.einsum("btkc,btd->kcd", win, g))
        if x.requires_grad:
            gwin = np.einsum("btd,kcd->btkc", g, w.data)
            gxp = np.zeros_like(xp)
            np.add.at(gxp, (slice(None), idx, slice(None)), gwin)
            x._accum(gxp[:, pad:, :])

    return _make(out_data, (x, w, b), backward)


def conv_transpose1d_causal(x, w, b, stride: int = 2):
    """Causal transposed 1-d convolution (upsample by `stride`).

    x: (B, T, Cin); w: (k, Cin, Cout); b: (Cout,).
    out[n] = sum_{t,i: n = stride*t + i} x[t] @ w[i], cropped to length stride*T,
    so output frames [stride*t, stride*t + stride) depend only on inputs <= t.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    B, T, cin = x.data.shape
    k, cin2, cout = w.data.shape
    if cin != cin2:
        raise ShapeError("conv_transpose1d channel mismatch")
    n_out = stride * T
    out_data = np.zeros((B, n_out, cout))
    contrib = np.einsum("btc,kcd->btkd", x.data, w.data)
    for i in range(k):
        pos = stride * np.arange(T) + i
        valid = pos < n_out
        out_data[:, pos[valid], :] += contrib[:, valid, i, :]
    out_data += b.data

    def backward(g):
        if b.requires_grad:
            b._accum(g.sum(axis=(0, 1)))
        gcontrib = np.zeros((B, T, k, cout))
        for i in range(k):
            pos = stride * np.arange(T) + i
            valid = pos < n_out
            gcontrib[:, valid, i, :] = g[:, pos[valid], :]
        if w.requires_grad:
            w._accum(np.einsum("btc,btkd->kcd", x.data, gcontrib))
        if x.requires_grad:
            x._accum(np.einsum("btkd,kcd->btc", gcontrib, w.data))

    return _make(out_data, (x, w, b), backward)


# -- optimizer, grad check, checkpoints ------------------------------------


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: dict, lr=1e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(f"grad shape mismatch for {name}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p.data -= self.lr * (mhat / (np.sqrt(vhat) + self.eps)
                                 + self.weight_decay * p.data)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def cosine_lr(step: int, total_steps: int, lr_max=1e-4, lr_min=1e-5) -> float:
    """Cosine anneal from lr_max to lr_min across a run."""
    if total_steps <= 1:
        return lr_max
    frac = min(step / (total_steps - 1), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + np.cos(np.pi * frac))


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central finite differences.

    f must return a scalar Tensor and must be deterministic (re-seed any
    internal noise per call).
    """
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteValue("f(x) not finite")
    out.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).data)
        flat[i] = orig - eps
        fm = float(f(x).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteValue("finite-difference probe not finite")
        numeric[i] = (fp - fm) / (2 * eps)
    numeric = numeric.reshape(x.data.shape)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


CHECKPOINT_MAGIC = b"GSCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    """Named-parameter flat file: JSON header + contiguous float64 payload."""
    entries = []
    payload = bytearray()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": len(payload)})
        payload += arr.tobytes()
    header = json.dumps({"version": CHECKPOINT_VERSION, "meta": meta or {},
                         "entries": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(bytes(payload))


def load_checkpoint(path):
    """Returns (params: dict[str, Tensor], meta: dict)."""
    try:
        fh = open(path, "rb")
    except FileNotFoundError as e:
        raise CheckpointMissing(str(path)) from e
    with fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen))
        if header.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {header.get('version')}")
        payload = fh.read()
    params = {}
    for ent in header["entries"]:
        shape = tuple(ent["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=n,
                            offset=ent["offset"]).reshape(shape).copy()
        t = Tensor(arr)
        t.requires_grad = True
        params[ent["name"]] = t
    return params, header.get("meta", {})
