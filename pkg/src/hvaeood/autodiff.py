"""Reverse-mode automatic differentiation over a small, fixed op vocabulary.

Tensors wrap float64 numpy arrays. Each op records a backward closure; calling
``backward()`` on a scalar walks the recorded graph once in reverse topological
order and accumulates gradients into every reachable leaf. Graph recording can
be switched off with ``no_grad()`` for cheap evaluation passes.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested op."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation-only passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "_parents", "_backward", "name")

    def __init__(self, data, parents=(), backward=None, name=""):
        self.data = _as_array(data)
        self.grad = None
        self.name = name
        if _GRAD_ENABLED:
            self._parents = tuple(parents)
            self._backward = backward
        else:
            self._parents = ()
            self._backward = None

    # -- graph -------------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        visited: set[int] = set()
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

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    # -- arithmetic ----------------------------------------------------------

    @staticmethod
    def _lift(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    def __add__(self, other):
        other = Tensor._lift(other)
        out = Tensor(self.data + other.data, (self, other))

        def backward(g):
            self._accumulate(_unbroadcast(g, self.data.shape))
            other._accumulate(_unbroadcast(g, other.data.shape))

        out._backward = backward if _GRAD_ENABLED else None
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, (self,))
        out._backward = (lambda g: self._accumulate(-g)) if _GRAD_ENABLED else None
        return out

    def __sub__(self, other):
        other = Tensor._lift(other)
        out = Tensor(self.data - other.data, (self, other))

        def backward(g):
            self._accumulate(_unbroadcast(g, self.data.shape))
            other._accumulate(_unbroadcast(-g, other.data.shape))

        out._backward = backward if _GRAD_ENABLED else None
        return out

    def __rsub__(self, other):
        return Tensor._lift(other) - self

    def __mul__(self, other):
        other = Tensor._lift(other)
        out = Tensor(self.data * other.data, (self, other))

        def backward(g):
            self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        out._backward = backward if _GRAD_ENABLED else None
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        out = Tensor(self.data / other.data, (self, other))

        def backward(g):
            self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            other._accumulate(
                _unbroadcast(-g * self.data / other.data**2, other.data.shape)
            )

        out._backward = backward if _GRAD_ENABLED else None
        return out

    def __rtruediv__(self, other):
        return Tensor._lift(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar constant exponents are supported")
        out = Tensor(self.data**exponent, (self,))

        def backward(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1))

        out._backward = backward if _GRAD_ENABLED else None
        return out

    # -- linear algebra ------------------------------------------------------

    def matmul(self, other):
        other = Tensor._lift(other)
        if self.data.shape[-1] != other.data.shape[0]:
            raise ShapeMismatch(
                f"matmul: {self.data.shape} @ {other.data.shape}"
            )
        out = Tensor(self.data @ other.data, (self, other))

        def backward(g):
            self._accumulate(g @ other.data.T)
            other._accumulate(self.data.T @ g)

        out._backward = backward if _GRAD_ENABLED else None
        return out

    __matmul__ = matmul

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), (self,))
        out._backward = (
            (lambda g: self._accumulate(g.reshape(self.data.shape)))
            if _GRAD_ENABLED
            else None
        )
        return out

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,))

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape).copy())

        out._backward = backward if _GRAD_ENABLED else None
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def logsumexp(self, axis):
        m = self.data.max(axis=axis, keepdims=True)
        shifted = np.exp(self.data - m)
        total = shifted.sum(axis=axis, keepdims=True)
        out_data = np.squeeze(m + np.log(total), axis=axis)
        out = Tensor(out_data, (self,))
        softmax = shifted / total

        def backward(g):
            self._accumulate(np.expand_dims(g, axis) * softmax)

        out._backward = backward if _GRAD_ENABLED else None
        return out

    # -- elementwise nonlinearities -------------------------------------------

    def relu(self):
        out = Tensor(np.maximum(self.data, 0.0), (self,))
        if _GRAD_ENABLED:
            mask = self.data > 0
            out._backward = lambda g: self._accumulate(g * mask)
        return out

    def exp(self):
        value = np.exp(self.data)
        out = Tensor(value, (self,))
        out._backward = (lambda g: self._accumulate(g * value)) if _GRAD_ENABLED else None
        return out

    def log(self):
        out = Tensor(np.log(self.data), (self,))
        out._backward = (
            (lambda g: self._accumulate(g / self.data)) if _GRAD_ENABLED else None
        )
        return out

    def sigmoid(self):
        value = _sigmoid(self.data)
        out = Tensor(value, (self,))
        out._backward = (
            (lambda g: self._accumulate(g * value * (1.0 - value)))
            if _GRAD_ENABLED
            else None
        )
        return out

    def softplus(self, beta: float = 1.0):
        out = Tensor(_softplus(self.data, beta), (self,))
        if _GRAD_ENABLED:
            gate = _sigmoid(beta * self.data)
            out._backward = lambda g: self._accumulate(g * gate)
        return out

    def log_softplus(self, beta: float = 1.0):
        """log(softplus_beta(x)), stable where softplus underflows to zero.

        For beta*x << 0, softplus ~= exp(beta*x)/beta, so the log is the
        linear asymptote beta*x - log(beta) and the derivative tends to beta.
        """
        bx = beta * self.data
        sp = _softplus(self.data, beta)
        small = bx < -30.0
        value = np.where(small, bx - math.log(beta), np.log(np.where(small, 1.0, sp)))
        out = Tensor(value, (self,))
        if _GRAD_ENABLED:
            deriv = np.where(small, beta, _sigmoid(bx) / np.where(small, 1.0, sp))
            out._backward = lambda g: self._accumulate(g * deriv)
        return out

    def clip(self, lo: float, hi: float):
        mask = (self.data >= lo) & (self.data <= hi)
        out = Tensor(np.clip(self.data, lo, hi), (self,))
        out._backward = (lambda g: self._accumulate(g * mask)) if _GRAD_ENABLED else None
        return out

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"


def weightnorm_affine(x: Tensor, v: Tensor, g: Tensor, b: Tensor) -> Tensor:
    """Fused y = x @ (g * v / ||v||) + b with per-column normalization of v.

    One tape node instead of the seven-op decomposition; the backward
    distributes the weight gradient onto (v, g) through the normalization.
    """
    norms = np.sqrt(np.einsum("ij,ij->j", v.data, v.data))
    w = v.data * (g.data / norms)
    out = Tensor(x.data @ w + b.data, (x, v, g, b))

    if _GRAD_ENABLED:

        def backward(grad):
            x._accumulate(grad @ w.T)
            dw = x.data.T @ grad
            dot = np.einsum("ij,ij->j", dw, v.data)
            g._accumulate(dot / norms)
            v._accumulate((g.data / norms) * dw - (g.data * dot / norms**3) * v.data)
            b._accumulate(grad.sum(axis=0))

        out._backward = backward
    return out


def binary_cross_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise x*logsigmoid(l) + (1-x)*logsigmoid(-l), overflow-safe.

    `targets` is a constant 0/1 array. The backward is x - sigmoid(l).
    """
    l = logits.data
    value = targets * (-_softplus(-l, 1.0)) + (1.0 - targets) * (-_softplus(l, 1.0))
    out = Tensor(value, (logits,))
    if _GRAD_ENABLED:
        sig = _sigmoid(l)
        out._backward = lambda grad: logits._accumulate(grad * (targets - sig))
    return out


def concat(tensors, axis=1):
    """Concatenate tensors along `axis`; gradient splits back to the inputs."""
    tensors = [Tensor._lift(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            t._accumulate(g[tuple(index)])

    out._backward = backward if _GRAD_ENABLED else None
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray, beta: float) -> np.ndarray:
    # (1/beta) log(1 + exp(beta x)) without overflow: for large beta*x the
    # linear asymptote x + log1p(exp(-beta x))/beta is exact in float64.
    bx = beta * x
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(bx))) / beta


def softplus_beta(x, beta: float):
    """Smoothed ReLU (1/beta)*log(1 + exp(beta*x)); overflow-safe everywhere.

    Accepts a Tensor (differentiable) or a plain array/scalar.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    if isinstance(x, Tensor):
        return x.softplus(beta)
    return _softplus(_as_array(x), beta)


def log_sigmoid(x: Tensor) -> Tensor:
    """Numerically stable log(sigmoid(x)) = -softplus(-x)."""
    return -((-x).softplus(1.0))


ABS_FLOOR = 1e-8


def finite_diff_check(f, params, epsilon: float = 1e-5) -> float:
    """Max relative error between tape gradients of `f` and central differences.

    `f` maps the parameter Tensors to a scalar Tensor. Every coordinate of
    every parameter is perturbed by +/- epsilon. Absolute differences below
    the 1e-8 floor count as agreement (they are cancellation noise around
    zero gradients); above it the error is relative to the larger magnitude.
    """
    for p in params:
        p.zero_grad()
    out = f()
    out.backward()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, g in zip(params, grads):
        for idx in np.ndindex(p.data.shape):
            orig = p.data[idx]
            p.data[idx] = orig + epsilon
            with no_grad():
                hi = float(f().data)
            p.data[idx] = orig - epsilon
            with no_grad():
                lo = float(f().data)
            p.data[idx] = orig
            numeric = (hi - lo) / (2.0 * epsilon)
            diff = abs(numeric - g[idx])
            if diff < ABS_FLOOR:
                continue
            worst = max(worst, diff / max(abs(numeric), abs(g[idx])))
    return worst
