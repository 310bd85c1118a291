"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations the model and losses need are provided: broadcast
arithmetic, matmul, exp/log/sqrt/relu, reductions, indexing, softmax,
strided 2D convolution and bilinear upsampling. Everything is float64;
gradients are exact up to floating point, which is what the
finite-difference oracles in the test suite check.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import GraphNotRecorded


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce `grad` back to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    # -- graph plumbing ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    def _make(self, data, parents, backward):
        req = any(p.requires_grad for p in parents)
        return Tensor(data, requires_grad=req,
                      parents=parents if req else (),
                      backward=backward if req else None)

    def backward(self):
        if self.data.size != 1:
            raise GraphNotRecorded("backward() needs a scalar loss")
        if not self.requires_grad:
            raise GraphNotRecorded("loss does not depend on any parameter")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, g):
        g = _unbroadcast(np.asarray(g, dtype=np.float64), self.data.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # -- arithmetic --------------------------------------------------------
    @staticmethod
    def _wrap(x):
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = self._wrap(other)
        def bwd(g):
            if self.requires_grad:
                self._accum(g)
            if other.requires_grad:
                other._accum(g)
        return self._make(self.data + other.data, (self, other), bwd)

    __radd__ = __add__

    def __neg__(self):
        def bwd(g):
            self._accum(-g)
        return self._make(-self.data, (self,), bwd)

    def __sub__(self, other):
        return self + (-self._wrap(other))

    def __rsub__(self, other):
        return self._wrap(other) + (-self)

    def __mul__(self, other):
        other = self._wrap(other)
        def bwd(g):
            if self.requires_grad:
                self._accum(g * other.data)
            if other.requires_grad:
                other._accum(g * self.data)
        return self._make(self.data * other.data, (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._wrap(other)
        def bwd(g):
            if self.requires_grad:
                self._accum(g / other.data)
            if other.requires_grad:
                other._accum(-g * self.data / (other.data ** 2))
        return self._make(self.data / other.data, (self, other), bwd)

    def __rtruediv__(self, other):
        return self._wrap(other) / self

    def __pow__(self, n):
        assert isinstance(n, (int, float))
        def bwd(g):
            self._accum(g * n * self.data ** (n - 1))
        return self._make(self.data ** n, (self,), bwd)

    def __matmul__(self, other):
        other = self._wrap(other)
        def bwd(g):
            if self.requires_grad:
                self._accum(g @ other.data.T)
            if other.requires_grad:
                other._accum(self.data.T @ g)
        return self._make(self.data @ other.data, (self, other), bwd)

    # -- elementwise -------------------------------------------------------
    def exp(self):
        out_data = np.exp(self.data)
        def bwd(g):
            self._accum(g * out_data)
        return self._make(out_data, (self,), bwd)

    def log(self):
        def bwd(g):
            self._accum(g / self.data)
        return self._make(np.log(self.data), (self,), bwd)

    def sqrt(self):
        out_data = np.sqrt(self.data)
        def bwd(g):
            self._accum(g * 0.5 / out_data)
        return self._make(out_data, (self,), bwd)

    def relu(self):
        mask = self.data > 0
        def bwd(g):
            self._accum(g * mask)
        return self._make(self.data * mask, (self,), bwd)

    def clip_min(self, lo):
        mask = self.data > lo
        def bwd(g):
            self._accum(g * mask)
        return self._make(np.maximum(self.data, lo), (self,), bwd)

    # -- shape & reductions ------------------------------------------------
    def reshape(self, *shape):
        def bwd(g):
            self._accum(g.reshape(self.data.shape))
        return self._make(self.data.reshape(*shape), (self,), bwd)

    def sum(self, axis=None, keepdims=False):
        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.data.shape))
        return self._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), bwd)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / n

    def take(self, idx):
        """Select rows along axis 0 (with repeats allowed)."""
        idx = np.asarray(idx, dtype=np.intp)
        def bwd(g):
            acc = np.zeros_like(self.data)
            np.add.at(acc, idx, g)
            self._accum(acc)
        return self._make(self.data[idx], (self,), bwd)

    def gather_rows(self, col_idx):
        """For a 2D tensor, pick one column per row: out[i] = t[i, col_idx[i]]."""
        col_idx = np.asarray(col_idx, dtype=np.intp)
        rows = np.arange(self.data.shape[0])
        def bwd(g):
            acc = np.zeros_like(self.data)
            np.add.at(acc, (rows, col_idx), g)
            self._accum(acc)
        return self._make(self.data[rows, col_idx], (self,), bwd)

    def softmax(self, axis=-1):
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)
        def bwd(g):
            self._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))
        return self._make(y, (self,), bwd)

    def logsumexp(self, axis=-1):
        m = self.data.max(axis=axis, keepdims=True)
        e = np.exp(self.data - m)
        s = e.sum(axis=axis)
        out_data = np.log(s) + np.squeeze(m, axis=axis)
        def bwd(g):
            self._accum(np.expand_dims(g / s, axis) * e)
        return self._make(out_data, (self,), bwd)

    def l2_normalize_rows(self, eps=1e-12):
        """Unit-normalize each row of a 2D tensor (gradient flows through)."""
        n = np.sqrt((self.data ** 2).sum(axis=1, keepdims=True)) + eps
        y = self.data / n
        def bwd(g):
            dot = (g * y).sum(axis=1, keepdims=True)
            self._accum((g - y * dot) / n)
        return self._make(y, (self,), bwd)

    # -- structured ops ----------------------------------------------------
    def conv2d(self, weight: "Tensor", bias: "Tensor", stride: int = 1, pad: int = 1):
        """2D convolution; self is (H, W, Cin), weight (kh, kw, Cin, Cout)."""
        x = self.data
        kh, kw, cin, cout = weight.data.shape
        xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
        hp, wp = xp.shape[0], xp.shape[1]
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1
        out = np.tile(bias.data, (ho, wo, 1))
        for u in range(kh):
            for v in range(kw):
                sl = xp[u:u + stride * ho:stride, v:v + stride * wo:stride, :]
                out += np.tensordot(sl, weight.data[u, v], axes=([2], [0]))
        def bwd(g):
            if weight.requires_grad or self.requires_grad:
                dxp = np.zeros_like(xp) if self.requires_grad else None
                dw = np.zeros_like(weight.data) if weight.requires_grad else None
                for u in range(kh):
                    for v in range(kw):
                        sl = xp[u:u + stride * ho:stride, v:v + stride * wo:stride, :]
                        if dw is not None:
                            dw[u, v] = np.tensordot(sl, g, axes=([0, 1], [0, 1]))
                        if dxp is not None:
                            dxp[u:u + stride * ho:stride, v:v + stride * wo:stride, :] += \
                                np.tensordot(g, weight.data[u, v], axes=([2], [1]))
                if dw is not None:
                    weight._accum(dw)
                if dxp is not None:
                    self._accum(dxp[pad:hp - pad, pad:wp - pad, :] if pad else dxp)
            if bias.requires_grad:
                bias._accum(g.sum(axis=(0, 1)))
        return self._make(out, (self, weight, bias), bwd)

    def upsample_bilinear(self, factor: int):
        """Bilinear upsample of an (h, w, C) tensor by an integer factor."""
        h, w, _ = self.data.shape
        ar = _interp_matrix(h, h * factor)
        ac = _interp_matrix(w, w * factor)
        out = np.einsum("Hh,hwc,Ww->HWc", ar, self.data, ac, optimize=True)
        def bwd(g):
            self._accum(np.einsum("Hh,HWc,Ww->hwc", ar, g, ac, optimize=True))
        return self._make(out, (self,), bwd)


@lru_cache(maxsize=None)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic 1D bilinear interpolation matrix (align_corners=False)."""
    a = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        lo_c = min(max(lo, 0), n_in - 1)
        hi_c = min(max(lo + 1, 0), n_in - 1)
        a[i, lo_c] += 1.0 - frac
        a[i, hi_c] += frac
    return a


def concat(tensors, axis=0):
    tensors = [Tensor._wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])
    data = np.concatenate([t.data for t in tensors], axis=axis)
    req = any(t.requires_grad for t in tensors)
    return Tensor(data, requires_grad=req,
                  parents=tuple(tensors) if req else (),
                  backward=bwd if req else None)
