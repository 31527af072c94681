"""Dense float64 tensors with taped reverse-mode differentiation.

Every operation records its inputs and a backward closure on the value it
returns; calling ``backward()`` on a scalar loss walks that tape once in
reverse topological order. Buffers are always float64 and reductions run in
a fixed index order, so repeated runs from the same seed are bit-identical.
"""

from __future__ import annotations

import threading

import numpy as np

# per-thread flag: parallel evaluation workers must not see each other's
# no_grad state, or an interleaved enter/exit could leave it stuck off
_grad_state = threading.local()


def _recording() -> bool:
    return getattr(_grad_state, "enabled", True)


class no_grad:
    """Context manager that disables tape recording inside its block."""

    def __enter__(self):
        self._prev = _recording()
        _grad_state.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_state.enabled = self._prev
        return False


class Tensor:
    """A numpy float64 buffer plus gradient bookkeeping.

    ``grad`` stays ``None`` until a backward pass deposits into it; gradients
    from repeated uses of the same tensor accumulate additively.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_spent")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.size != 1:
            raise ValueError(f"backward needs a scalar, got shape {self.shape}")
        if self._spent:
            raise RuntimeError(
                "this graph was already backpropagated; rebuild the forward "
                "pass (reset the tape) before calling backward again"
            )
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor requiring gradients")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in order:
            if node._parents:
                node._backward = None
                node._parents = ()
                node._spent = True

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _toposort(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _acc(t: Tensor, g: np.ndarray):
    # Additive accumulation; never mutate an existing grad buffer in place.
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _from_op(data, parents, backward) -> Tensor:
    req = _recording() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _from_op(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    return _from_op(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))

    return _from_op(out_data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _acc(a, -g)

    return _from_op(-a.data, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return _from_op(out_data, (a, b), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0

    def backward(g):
        _acc(a, g * mask)

    return _from_op(np.where(mask, a.data, 0.0), (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log: input must be strictly positive")

    def backward(g):
        _acc(a, g / a.data)

    return _from_op(np.log(a.data), (a,), backward)


def l2_normalize(a) -> Tensor:
    """Scale each vector along the last axis to unit Euclidean norm."""
    a = as_tensor(a)
    norms = np.sqrt((a.data ** 2).sum(axis=-1, keepdims=True))
    if np.any(norms == 0.0):
        raise ValueError("l2_normalize: zero vector has no direction")
    y = a.data / norms

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        _acc(a, (g - y * inner) / norms)

    return _from_op(y, (a,), backward)


def pairwise_sqdist(a, b) -> Tensor:
    """Squared Euclidean distances between row sets: (n,d),(m,d) -> (n,m)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"pairwise_sqdist: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out_data = (diff ** 2).sum(axis=-1)

    def backward(g):
        _acc(a, 2.0 * (g.sum(axis=1, keepdims=True) * a.data - g @ b.data))
        _acc(b, 2.0 * (g.sum(axis=0)[:, None] * b.data - g.T @ a.data))

    return _from_op(out_data, (a, b), backward)


def pairwise_dist(a, b) -> Tensor:
    """Euclidean distances between row sets: (n,d),(m,d) -> (n,m)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"pairwise_dist: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out_data = np.sqrt((diff ** 2).sum(axis=-1))

    def backward(g):
        if np.any((out_data == 0.0) & (g != 0.0)):
            raise RuntimeError("pairwise_dist: gradient undefined at zero distance")
        w = np.where(out_data > 0.0, g / np.where(out_data > 0.0, out_data, 1.0), 0.0)
        _acc(a, w.sum(axis=1, keepdims=True) * a.data - w @ b.data)
        _acc(b, w.sum(axis=0)[:, None] * b.data - w.T @ a.data)

    return _from_op(out_data, (a, b), backward)


def softmax_rows(a) -> Tensor:
    """Softmax along the last axis."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        _acc(a, p * (g - inner))

    return _from_op(p, (a,), backward)


def masked_softmax_rows(a, mask) -> Tensor:
    """Softmax along the last axis restricted to ``mask``.

    Excluded entries are exactly 0.0 in the output and never enter the
    shift, exponential, or denominator. ``mask`` is a boolean array
    broadcastable to the input's shape.
    """
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("masked_softmax_rows: some row has no admissible entry")
    mx = np.max(a.data, axis=-1, keepdims=True, initial=-np.inf, where=mask)
    shifted = np.where(mask, a.data, mx) - mx
    e = np.where(mask, np.exp(shifted), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        _acc(a, p * (g - inner))

    return _from_op(p, (a,), backward)


def gather_rows(a, idx) -> Tensor:
    """Pick one entry per row: (n,m),(n,) -> (n,)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ValueError(f"gather_rows: incompatible shapes {a.shape} and {idx.shape}")
    if idx.min(initial=0) < 0 or idx.max(initial=-1) >= a.shape[1]:
        raise IndexError("gather_rows: index out of range")
    rows = np.arange(a.shape[0])
    out_data = a.data[rows, idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, idx), g)
        _acc(a, full)

    return _from_op(out_data, (a,), backward)


def nll_rows(probs, idx) -> Tensor:
    """Per-row negative log-likelihood of the indexed entries: (n,m),(n,) -> (n,)."""
    probs = as_tensor(probs)
    idx = np.asarray(idx, dtype=np.intp)
    if probs.ndim != 2 or idx.shape != (probs.shape[0],):
        raise ValueError(f"nll_rows: incompatible shapes {probs.shape} and {idx.shape}")
    rows = np.arange(probs.shape[0])
    picked = probs.data[rows, idx]
    if np.any(picked <= 0.0):
        raise ValueError("nll_rows: target probability is not strictly positive")

    def backward(g):
        full = np.zeros_like(probs.data)
        np.add.at(full, (rows, idx), -g / picked)
        _acc(probs, full)

    return _from_op(-np.log(picked), (probs,), backward)


def topk_sum_rows(a, k: int) -> Tensor:
    """Sum of the k largest entries of each row; ties resolve to lower index.

    k is clamped to the row length.
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"topk_sum_rows: expected a matrix, got shape {a.shape}")
    if k < 1:
        raise ValueError("topk_sum_rows: k must be >= 1")
    k_eff = min(k, a.shape[1])
    order = np.argsort(-a.data, axis=1, kind="stable")[:, :k_eff]
    out_data = np.take_along_axis(a.data, order, axis=1).sum(axis=1)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, order, g[:, None], axis=1)
        _acc(a, full)

    return _from_op(out_data, (a,), backward)


def take_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if a.ndim < 1 or idx.ndim != 1:
        raise ValueError(f"take_rows: incompatible shapes {a.shape} and {idx.shape}")

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _acc(a, full)

    return _from_op(a.data[idx], (a,), backward)


def take_cols(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if a.ndim != 2 or idx.ndim != 1:
        raise ValueError(f"take_cols: incompatible shapes {a.shape} and {idx.shape}")

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (slice(None), idx), g)
        _acc(a, full)

    return _from_op(a.data[:, idx], (a,), backward)


def stack_cols(parts) -> Tensor:
    """Stack 1-d tensors of equal length as the columns of a matrix."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("stack_cols: need at least one column")
    n = parts[0].shape[0] if parts[0].ndim == 1 else -1
    for p in parts:
        if p.ndim != 1 or p.shape[0] != n:
            raise ValueError("stack_cols: all parts must be 1-d with equal length")
    out_data = np.stack([p.data for p in parts], axis=1)

    def backward(g):
        for j, p in enumerate(parts):
            _acc(p, g[:, j])

    return _from_op(out_data, tuple(parts), backward)


def concat_rows(parts) -> Tensor:
    """Concatenate matrices along axis 0."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_rows: need at least one part")
    for p in parts:
        if p.ndim != 2 or p.shape[1] != parts[0].shape[1]:
            raise ValueError("concat_rows: all parts must be matrices of equal width")
    out_data = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        for j, p in enumerate(parts):
            _acc(p, g[offsets[j]:offsets[j + 1]])

    return _from_op(out_data, tuple(parts), backward)


def mean(a) -> Tensor:
    """Mean over all entries, as a scalar tensor."""
    a = as_tensor(a)
    n = a.size
    if n == 0:
        raise ValueError("mean: empty tensor")

    def backward(g):
        _acc(a, np.full(a.shape, float(g) / n))

    return _from_op(a.data.mean(), (a,), backward)


def flatten_rows(a) -> Tensor:
    """Collapse all axes after the first: (n, ...) -> (n, k)."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ValueError(f"flatten_rows: expected at least 2 axes, got shape {a.shape}")
    new_shape = (a.shape[0], int(np.prod(a.shape[1:])))

    def backward(g):
        _acc(a, g.reshape(a.shape))

    return _from_op(a.data.reshape(new_shape), (a,), backward)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, ho: int, wo: int):
    b, c, hp, wp = x_shape
    dxp = np.zeros(x_shape)
    dwin = dcols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += dwin[:, :, i, j]
    return dxp


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution: x (B,C,H,W), w (F,C,kh,kw), optional bias (F,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    bias_t = as_tensor(bias) if bias is not None else None
    if bias_t is not None and bias_t.shape != (w.shape[0],):
        raise ValueError(f"conv2d: bias shape {bias_t.shape} does not match {w.shape[0]} filters")
    bsz, _, h, wd = x.shape
    f, c, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    w2 = w.data.reshape(f, c * kh * kw)
    out = np.matmul(w2, cols)
    if bias_t is not None:
        out = out + bias_t.data[:, None]
    out_data = out.reshape(bsz, f, ho, wo)
    parents = (x, w) if bias_t is None else (x, w, bias_t)

    def backward(g):
        g2 = g.reshape(bsz, f, ho * wo)
        _acc(w, np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape))
        if bias_t is not None:
            _acc(bias_t, g2.sum(axis=(0, 2)))
        dcols = np.matmul(w2.T, g2)
        dxp = _col2im(dcols, xp.shape, kh, kw, stride, ho, wo)
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        _acc(x, dxp)

    return _from_op(out_data, parents, backward)


def maxpool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling with floor semantics on odd extents."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"maxpool2d: expected (B,C,H,W), got shape {x.shape}")
    bsz, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise ValueError(f"maxpool2d: input {x.shape} smaller than pool size {size}")
    cropped = x.data[:, :, :ho * size, :wo * size]
    win = cropped.reshape(bsz, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(bsz, c, ho, wo, size * size)
    arg = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, arg[..., None], g[..., None], axis=-1)
        dcrop = dflat.reshape(bsz, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        dcrop = dcrop.reshape(bsz, c, ho * size, wo * size)
        full = np.zeros_like(x.data)
        full[:, :, :ho * size, :wo * size] = dcrop
        _acc(x, full)

    return _from_op(out_data, (x,), backward)


def group_norm(x, gamma, beta, groups: int, eps: float = 1e-5) -> Tensor:
    """Group normalization over (B,C) vectors or (B,C,H,W) maps."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim not in (2, 4):
        raise ValueError(f"group_norm: expected (B,C) or (B,C,H,W), got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"group_norm: scale/shift must have shape ({c},)")
    if groups < 1 or c % groups != 0:
        raise ValueError(f"group_norm: {groups} groups do not divide {c} channels")
    bsz = x.shape[0]
    spatial = int(np.prod(x.shape[2:])) if x.ndim == 4 else 1
    xg = x.data.reshape(bsz, groups, (c // groups) * spatial)
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat_g = (xg - mu) * istd
    xhat = xhat_g.reshape(x.shape)
    if x.ndim == 4:
        gamma_b = gamma.data.reshape(1, c, 1, 1)
        beta_b = beta.data.reshape(1, c, 1, 1)
    else:
        gamma_b = gamma.data.reshape(1, c)
        beta_b = beta.data.reshape(1, c)
    out_data = xhat * gamma_b + beta_b

    def backward(g):
        reduce_axes = (0, 2, 3) if x.ndim == 4 else (0,)
        _acc(gamma, (g * xhat).sum(axis=reduce_axes))
        _acc(beta, g.sum(axis=reduce_axes))
        dxhat = (g * gamma_b).reshape(bsz, groups, (c // groups) * spatial)
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat_g).mean(axis=-1, keepdims=True)
        dx = istd * (dxhat - m1 - xhat_g * m2)
        _acc(x, dx.reshape(x.shape))

    return _from_op(out_data, (x, gamma, beta), backward)
