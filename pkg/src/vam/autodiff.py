"""Reverse-mode automatic differentiation over numpy arrays.

A `Tensor` wraps an ndarray and records the operations applied to it; calling
`backward()` on a scalar result fills the `.grad` slot of every reachable
tensor that has `requires_grad` set. The op set is the minimum needed for
transformer-style models: broadcasting arithmetic, matmul, reshaping, slicing,
gather, concatenation, reductions, softmax, layer normalization and a couple
of smooth nonlinearities.

Graph construction can be suspended with `no_grad()`, in which case every op
returns a plain constant tensor (useful for frozen conditioning networks).
"""

from __future__ import annotations

import contextlib

import numpy as np


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """An ndarray plus an optional gradient slot and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # make numpy defer to our reflected operators
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # ---------------------------------------------------------------- basics

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

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # ------------------------------------------------------------- op helper

    @staticmethod
    def _lift(x, dtype=None):
        if isinstance(x, Tensor):
            return x
        arr = np.asarray(x, dtype=dtype)
        return Tensor(arr)

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, g):
        # Ownership rule: a backward closure may hand the raw upstream grad to
        # at most one parent (others receive fresh or disjoint arrays), so a
        # writeable g can be adopted without copying.
        if self.grad is None:
            if not g.flags.writeable:
                g = g.copy()
            self.grad = g
        else:
            self.grad += g

    # ------------------------------------------------------------ arithmetic

    def __add__(self, other):
        other = Tensor._lift(other, self.data.dtype)
        data = self.data + other.data

        def backward(g):
            handed_raw = False
            if self.requires_grad:
                ga = _unbroadcast(g, self.shape)
                handed_raw = ga is g
                self._accumulate(ga)
            if other.requires_grad:
                gb = _unbroadcast(g, other.shape)
                if gb is g and handed_raw:
                    gb = g.copy()
                other._accumulate(gb)

        return Tensor._make(data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        data = -self.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(-g)

        return Tensor._make(data, (self,), backward)

    def __sub__(self, other):
        other = Tensor._lift(other, self.data.dtype)
        data = self.data - other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g, other.shape))

        return Tensor._make(data, (self, other), backward)

    def __rsub__(self, other):
        return Tensor._lift(other, self.data.dtype).__sub__(self)

    def __mul__(self, other):
        other = Tensor._lift(other, self.data.dtype)
        data = self.data * other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._make(data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor) or isinstance(other, np.ndarray):
            other = Tensor._lift(other, self.data.dtype)
            data = self.data / other.data

            def backward(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g / other.data, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(-g * data / other.data, other.shape))

            return Tensor._make(data, (self, other), backward)
        return self * (1.0 / other)

    def pow(self, exponent):
        """Elementwise power with a constant scalar exponent."""
        e = float(exponent)
        data = self.data ** e

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * e * self.data ** (e - 1.0))

        return Tensor._make(data, (self,), backward)

    __pow__ = pow

    # ---------------------------------------------------------------- matmul

    def matmul(self, other):
        other = Tensor._lift(other, self.data.dtype)
        if self.ndim == 1 or other.ndim == 1:
            a2 = self.reshape(1, -1) if self.ndim == 1 else self
            b2 = other.reshape(-1, 1) if other.ndim == 1 else other
            out = a2.matmul(b2)
            shape = list(out.shape)
            if other.ndim == 1:
                shape.pop(-1)
            if self.ndim == 1:
                shape.pop(-1 if other.ndim == 1 else -2)
            return out.reshape(tuple(shape))
        a, b = self.data, other.data
        data = a @ b

        def backward(g):
            if self.requires_grad:
                ga = g @ np.swapaxes(b, -1, -2)
                if ga.shape != a.shape:
                    ga = _unbroadcast(ga, a.shape)
                self._accumulate(ga)
            if other.requires_grad:
                if b.ndim == 2 and a.ndim > 2:
                    k = a.shape[-1]
                    gb = a.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
                else:
                    gb = np.swapaxes(a, -1, -2) @ g
                    if gb.shape != b.shape:
                        gb = _unbroadcast(gb, b.shape)
                other._accumulate(gb)

        return Tensor._make(data, (self, other), backward)

    __matmul__ = matmul

    # ------------------------------------------------------------- reshaping

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.data.shape
        data = self.data.reshape(shape)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g.reshape(src_shape))

        return Tensor._make(data, (self,), backward)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        inv = np.argsort(axes)
        data = self.data.transpose(axes)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g.transpose(inv))

        return Tensor._make(data, (self,), backward)

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, index):
        data = self.data[index]
        src_shape = self.data.shape
        src_dtype = self.data.dtype
        is_fancy = isinstance(index, np.ndarray) and index.dtype.kind in "iu"

        def backward(g):
            if self.requires_grad:
                full = np.zeros(src_shape, dtype=src_dtype)
                if is_fancy:
                    np.add.at(full, index, g)
                else:
                    full[index] = g
                self._accumulate(full)

        return Tensor._make(data, (self,), backward)

    @staticmethod
    def concat(tensors, axis=0):
        tensors = [Tensor._lift(t) for t in tensors]
        data = np.concatenate([t.data for t in tensors], axis=axis)
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def backward(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(int(lo), int(hi))
                    t._accumulate(g[tuple(sl)])

        return Tensor._make(data, tuple(tensors), backward)

    # ------------------------------------------------------------ reductions

    def sum(self, axis=None, keepdims=False):
        data = self.data.sum(axis=axis, keepdims=keepdims)
        src_shape = self.data.shape

        def backward(g):
            if self.requires_grad:
                if axis is None:
                    self._accumulate(np.broadcast_to(g, src_shape).copy())
                else:
                    gg = g if keepdims else np.expand_dims(g, axis)
                    self._accumulate(np.broadcast_to(gg, src_shape).copy())

        return Tensor._make(data, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # ---------------------------------------------------------- nonlinearity

    def exp(self):
        data = np.exp(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * data)

        return Tensor._make(data, (self,), backward)

    def sigmoid(self):
        data = _sigmoid(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * data * (1.0 - data))

        return Tensor._make(data, (self,), backward)

    def silu(self):
        s = _sigmoid(self.data)
        data = self.data * s

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * (s * (1.0 + self.data * (1.0 - s))))

        return Tensor._make(data, (self,), backward)

    def tanh(self):
        data = np.tanh(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * (1.0 - data * data))

        return Tensor._make(data, (self,), backward)

    def softmax(self):
        """Softmax over the last axis."""
        m = self.data.max(axis=-1, keepdims=True)
        e = np.exp(self.data - m)
        data = e / e.sum(axis=-1, keepdims=True)

        def backward(g):
            if self.requires_grad:
                dot = (g * data).sum(axis=-1, keepdims=True)
                self._accumulate(data * (g - dot))

        return Tensor._make(data, (self,), backward)

    def normalize_last(self, eps=1e-5):
        """Zero-mean unit-variance over the last axis (the layer-norm core)."""
        mu = self.data.mean(axis=-1, keepdims=True)
        xc = self.data - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv

        def backward(g):
            if self.requires_grad:
                gm = g.mean(axis=-1, keepdims=True)
                gx = (g * xhat).mean(axis=-1, keepdims=True)
                self._accumulate(inv * (g - gm - xhat * gx))

        return Tensor._make(xhat, (self,), backward)

    # ----------------------------------------------------------- fused kernels

    def scaled_dot_attention(self, k, v, n_heads):
        """Fused multi-head attention core: softmax(q k^T / sqrt(dh)) v.

        self/k/v: (B, T, d). One primitive with a hand-written backward keeps
        every GEMM operand contiguous, which matters at long sequence lengths.
        """
        q = self
        b, tq, d = q.shape
        tk = k.shape[1]
        dh = d // n_heads
        scale = 1.0 / np.sqrt(dh).astype(q.data.dtype)

        def heads(x, t):
            return np.ascontiguousarray(
                x.reshape(b, t, n_heads, dh).transpose(0, 2, 1, 3))

        qh = heads(q.data, tq) * scale
        kh = heads(k.data, tk)
        vh = heads(v.data, tk)
        scores = qh @ kh.transpose(0, 1, 3, 2)
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=-1, keepdims=True)
        ctx = scores @ vh
        out = np.ascontiguousarray(ctx.transpose(0, 2, 1, 3)).reshape(b, tq, d)

        def backward(g):
            # keep every GEMM operand contiguous; one bulk copy beats numpy's
            # per-batch buffering on transposed views
            gh = heads(g, tq)
            if v.requires_grad:
                st = np.ascontiguousarray(scores.transpose(0, 1, 3, 2))
                gv = st @ gh
                v._accumulate(np.ascontiguousarray(
                    gv.transpose(0, 2, 1, 3)).reshape(b, tk, d))
            if q.requires_grad or k.requires_grad:
                vt = np.ascontiguousarray(vh.transpose(0, 1, 3, 2))
                gs = gh @ vt
                gs *= scores
                gs -= scores * gs.sum(axis=-1, keepdims=True)
                if q.requires_grad:
                    gq = gs @ kh
                    gq *= scale
                    q._accumulate(np.ascontiguousarray(
                        gq.transpose(0, 2, 1, 3)).reshape(b, tq, d))
                if k.requires_grad:
                    gst = np.ascontiguousarray(gs.transpose(0, 1, 3, 2))
                    gk = gst @ qh
                    k._accumulate(np.ascontiguousarray(
                        gk.transpose(0, 2, 1, 3)).reshape(b, tk, d))

        return Tensor._make(out, (q, k, v), backward)

    def affine_mod(self, scale, shift):
        """Fused x * (1 + scale) + shift with broadcasting (AdaLN modulation)."""
        scale = Tensor._lift(scale, self.data.dtype)
        shift = Tensor._lift(shift, self.data.dtype)
        data = self.data * (scale.data + 1.0) + shift.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * (scale.data + 1.0))
            if scale.requires_grad:
                scale._accumulate(_unbroadcast(g * self.data, scale.shape))
            if shift.requires_grad:
                shift._accumulate(_unbroadcast(g, shift.shape))

        return Tensor._make(data, (self, scale, shift), backward)

    # -------------------------------------------------------------- backward

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _sigmoid(x):
    # single vectorized pass; clipping keeps exp finite for float32
    z = np.exp(np.clip(np.asarray(x), -60.0, 60.0) * -1.0)
    if np.ndim(z) == 0:
        return 1.0 / (1.0 + z)
    z += 1.0
    np.reciprocal(z, out=z)
    return z


def sigmoid_array(x):
    return _sigmoid(np.asarray(x, dtype=np.float64))
