"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Everything downstream (encoders, losses, the training loop) is built from the
handful of primitives defined here. Design constraints:

* shapes are plain numpy shapes; broadcasting is limited to scalars and a
  bias vector added over the last axis,
* gradients accumulate additively across uses of a tensor and are zeroed
  explicitly between optimizer steps,
* a global precision switch (float32 for training, float64 for verification)
  controls the dtype of newly created tensors,
* non-finite values are treated as errors, never silently propagated.
"""

from __future__ import annotations

import math
import struct
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "precision",
    "default_dtype",
    "matmul",
    "softmax",
    "log_softmax",
    "layer_norm",
    "l2_normalize",
    "gelu",
    "embedding",
    "select_positions",
    "concat",
    "gradient_check",
    "GradientCheckReport",
    "write_tensor",
    "read_tensor",
]

_DTYPE_STACK = [np.float32]
_GRAD_ENABLED = [True]

# Plain python floats: numpy scalar constants would promote float32
# activations to float64 under NEP 50 promotion rules.
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def default_dtype():
    return _DTYPE_STACK[-1]


@contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    _DTYPE_STACK.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE_STACK.pop()


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference, finite diffs)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled():
    return _GRAD_ENABLED[-1]


class Tensor:
    """A dense n-d array plus an optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=default_dtype())
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor contains non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # Internal constructor for op results: skips the finiteness scan on the
    # hot path; the check still guards all external entry points and losses.
    @classmethod
    def _result(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._parents = ()
        out._backward = None
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def assert_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {what}")
        return self

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        # Sum rule: gradients add across uses. No op mutates a stored grad
        # in place, so keeping a reference on first use is safe.
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self):
        """Reverse-mode sweep from a scalar tensor."""
        if self.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        self.assert_finite("loss")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; use reciprocal ops")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _slice(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def swapaxes(self, ax1, ax2):
        return swapaxes(self, ax1, ax2)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=default_dtype()))


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _reduce_to(grad, shape):
    """Sum a broadcasted gradient back down to the original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def _check_addable(a, b):
    # Equal shapes, a scalar operand, or a trailing-axes broadcast (covers
    # bias vectors over the last axis and position tables over the batch).
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    if a.ndim < b.ndim and b.shape[b.ndim - a.ndim:] == a.shape:
        return
    raise ValueError(f"incompatible shapes for elementwise op: {a.shape} vs {b.shape}")


# -- elementwise -------------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_addable(a, b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b.shape))

    return Tensor._result(out_data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_addable(a, b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b.shape))

    return Tensor._result(out_data, (a, b), backward)


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return Tensor._result(out_data, (a,), backward)


def log(a):
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise FloatingPointError("log of non-positive value")
    out_data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return Tensor._result(out_data, (a,), backward)


def gelu(a):
    """Gaussian error linear unit, x * Phi(x), with the exact erf form."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out_data = x * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        a._accumulate(g * (cdf + x * pdf))

    return Tensor._result(out_data, (a,), backward)


# -- shape manipulation ------------------------------------------------------


def reshape(a, shape):
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return Tensor._result(out_data, (a,), backward)


def swapaxes(a, ax1, ax2):
    a = _as_tensor(a)
    out_data = np.swapaxes(a.data, ax1, ax2)

    def backward(g):
        a._accumulate(np.swapaxes(g, ax1, ax2))

    return Tensor._result(out_data, (a,), backward)


def _slice(a, key):
    a = _as_tensor(a)
    out_data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        a._accumulate(full)

    return Tensor._result(out_data, (a,), backward)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accumulate(g[tuple(idx)])

    return Tensor._result(out_data, tuple(tensors), backward)


# -- reductions --------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return Tensor._result(np.asarray(out_data), (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    """Matrix product. `a` may carry leading batch axes; `b` is either 2-d
    (shared weights) or batched identically to `a`."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            da = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_reduce_to(da, a.shape))
        if b.requires_grad:
            db = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_reduce_to(db, b.shape))

    return Tensor._result(out_data, (a, b), backward)


# -- normalizations ----------------------------------------------------------


def softmax(a, axis=-1):
    """Numerically stable softmax along `axis` (max-subtraction)."""
    a = _as_tensor(a)
    if a.shape[axis] == 0:
        raise ValueError("softmax along an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - dot))

    return Tensor._result(out_data, (a,), backward)


def log_softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        p = np.exp(out_data)
        a._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return Tensor._result(out_data, (a,), backward)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Per-row normalization over the last axis followed by an affine map."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    if gamma.shape != a.shape[-1:] or beta.shape != a.shape[-1:]:
        raise ValueError(
            f"layer_norm affine params {gamma.shape}/{beta.shape} do not match last axis of {a.shape}"
        )
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gamma.data * xhat + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate(_reduce_to(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accumulate(_reduce_to(g, beta.shape))
        if a.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            a._accumulate(inv * (dxhat - m1 - xhat * m2))

    return Tensor._result(out_data, (a, gamma, beta), backward)


def l2_normalize(a, eps=1e-12):
    """Scale rows (last axis) to unit Euclidean norm."""
    a = _as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if np.any(norm < eps):
        raise FloatingPointError("l2_normalize on a (near-)zero vector")
    out_data = a.data / norm

    def backward(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        a._accumulate((g - out_data * dot) / norm)

    return Tensor._result(out_data, (a,), backward)


# -- indexing ----------------------------------------------------------------


def embedding(table, ids):
    """Row lookup `table[ids]` with scatter-add backward into the table."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"token id out of range [0, {table.shape[0]}): {int(ids.max())}"
        )
    out_data = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        table._accumulate(full)

    return Tensor._result(out_data, (table,), backward)


def select_positions(a, rows, cols):
    """Pick `a[rows[i], cols[i]]` from a 2-d tensor; used by token losses."""
    a = _as_tensor(a)
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    out_data = a.data[rows, cols]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, cols), g)
        a._accumulate(full)

    return Tensor._result(out_data, (a,), backward)


# -- verification harness ----------------------------------------------------


class GradientCheckReport:
    """Comparison of reverse-mode gradients against central differences."""

    def __init__(self, per_param):
        self.per_param = per_param
        self.max_rel_err = max(per_param.values()) if per_param else 0.0

    def ok(self, tol=1e-4):
        return self.max_rel_err < tol

    def __repr__(self):
        return f"GradientCheckReport(max_rel_err={self.max_rel_err:.3e})"


def gradient_check(fn, params, eps=1e-5):
    """Check d(fn)/d(param) for every element of every parameter.

    `fn` must be a deterministic closure that rebuilds the forward graph and
    returns a scalar Tensor. Run under float64 (`precision("float64")`) for
    meaningful tolerances.

    `eps` may be a single step size or a sequence; with several steps, each
    element's error is the minimum over steps. A small step suppresses
    truncation error and a large one suppresses roundoff on near-zero
    gradients, while a genuinely wrong gradient fails at every step.
    """
    eps_values = (eps,) if np.isscalar(eps) else tuple(eps)
    for p in params:
        p.zero_grad()
    loss = fn()
    if not np.isfinite(loss.item()):
        raise FloatingPointError("gradient_check: loss is non-finite")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    per_param = {}
    with no_grad():
        for i, p in enumerate(params):
            flat = p.data.reshape(-1)
            an = analytic[i].reshape(-1)
            err = np.full(flat.shape, np.inf)
            for e in eps_values:
                fd = np.zeros_like(flat)
                for j in range(flat.size):
                    orig = flat[j]
                    flat[j] = orig + e
                    f_plus = fn().item()
                    flat[j] = orig - e
                    f_minus = fn().item()
                    flat[j] = orig
                    fd[j] = (f_plus - f_minus) / (2.0 * e)
                denom = np.maximum(np.maximum(np.abs(an), np.abs(fd)), 1e-6)
                err = np.minimum(err, np.abs(an - fd) / denom)
            per_param[i] = float(np.max(err)) if flat.size else 0.0
    return GradientCheckReport(per_param)


# -- binary tensor format ----------------------------------------------------

_MAGIC = b"CMPT"
_FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def write_tensor(path, array):
    """Write an array in the binary tensor format:
    magic "CMPT", version u32, dtype tag u32, rank u32, shape u32*, payload LE.
    """
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _DTYPE_TAGS:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<III", _FORMAT_VERSION, _DTYPE_TAGS[arr.dtype], arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, tag, rank = struct.unpack("<III", f.read(12))
        if version != _FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        if tag not in _TAG_DTYPES:
            raise ValueError(f"{path}: unknown dtype tag {tag}")
        shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
        dtype = _TAG_DTYPES[tag]
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype.newbyteorder("<"))
    return data.astype(dtype).reshape(shape)
