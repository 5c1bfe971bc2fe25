"""Minimal reverse-mode differentiation for small fixed computation graphs.

Everything is float64 numpy.  A forward pass builds a fresh graph of Tensor
nodes; `backward` walks it once and accumulates gradients into every node
created with requires_grad=True (and into leaf inputs marked the same way).
The op set is exactly what the feature-grid network needs: affine layers,
ReLU/sigmoid/softplus, concatenation, elementwise arithmetic, reductions,
and a weighted corner gather for bilinear interpolation.

Also home to the Adam optimizer and parameter initialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Operand shapes are inconsistent."""


class TapeConsumedError(RuntimeError):
    """backward() was called twice on the same graph output."""


class Tensor:
    """A float64 array with an optional gradient and graph linkage."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self._parents = ()
        self._backward_fn = None
        self._consumed = False

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._backward_fn is not None


def _node(values, parents, backward_fn) -> Tensor:
    out = Tensor(values)
    if any(_tracked(p) for p in parents):
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(
        a.values * b.values,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.values, a.shape),
            _unbroadcast(g * a.values, b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.values, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(
        a.values @ b.values,
        (a, b),
        lambda g: (g @ b.values.T, a.values.T @ g),
    )


def affine_apply(W: Tensor, b: Tensor, x) -> Tensor:
    """y = x @ W^T + b for x of shape (in,) or (batch, in)."""
    x = _as_tensor(x)
    W_, b_ = W.values, b.values
    if W_.ndim != 2 or b_.ndim != 1 or W_.shape[0] != b_.shape[0]:
        raise ShapeError(f"affine: W {W_.shape} incompatible with b {b_.shape}")
    if x.values.shape[-1] != W_.shape[1]:
        raise ShapeError(f"affine: x {x.values.shape} incompatible with W {W_.shape}")

    # einsum keeps a fixed reduction order, so batched evaluation is
    # bit-identical to row-by-row evaluation (BLAS gemm is not)
    y = np.einsum("...i,oi->...o", x.values, W_) + b_

    def backward_fn(g):
        if g.ndim == 1:
            gW = np.outer(g, x.values)
            gb = g
        else:
            gW = g.T @ x.values
            gb = g.sum(axis=0)
        gx = g @ W_
        return gW, gb, gx

    return _node(y, (W, b, x), backward_fn)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.values > 0
    return _node(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = expit(x.values)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),))


def softplus(x) -> Tensor:
    """log(1 + exp(x)), computed stably; derivative is sigmoid(x)."""
    x = _as_tensor(x)
    v = np.maximum(x.values, 0.0) + np.log1p(np.exp(-np.abs(x.values)))
    sig = expit(x.values)
    return _node(v, (x,), lambda g: (g * sig,))


def activation_apply(kind: str, x) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation kind: {kind!r}")


def concat_apply(a, b, axis: int = -1) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    na = a.values.shape[axis]
    out = np.concatenate([a.values, b.values], axis=axis)

    def backward_fn(g):
        ga, gb = np.split(g, [na], axis=axis)
        return ga, gb

    return _node(out, (a, b), backward_fn)


def tsum(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    out = x.values.sum(axis=axis)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _node(out, (x,), backward_fn)


def mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    n = x.values.size if axis is None else x.values.shape[axis]
    return mul(tsum(x, axis=axis), 1.0 / n)


def absolute(x) -> Tensor:
    x = _as_tensor(x)
    sign = np.sign(x.values)
    return _node(np.abs(x.values), (x,), lambda g: (g * sign,))


def square(x) -> Tensor:
    x = _as_tensor(x)
    return _node(x.values**2, (x,), lambda g: (g * 2.0 * x.values,))


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    v = np.sqrt(x.values)
    return _node(v, (x,), lambda g: (g * 0.5 / v,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    return _node(np.log(x.values), (x,), lambda g: (g / x.values,))


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    return _node(x.values.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def bilinear_gather(features: Tensor, idx: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted sum of feature rows: out[b] = sum_k weights[b,k] * features[idx[b,k]].

    idx and weights are (B, K) constants; gradients flow to `features` only.
    """
    f = features.values

    def backward_fn(g):
        gf = np.zeros_like(f)
        np.add.at(gf, idx.ravel(), (g[:, None, :] * weights[:, :, None]).reshape(-1, f.shape[1]))
        return (gf,)

    out = np.einsum("bk,bkd->bd", weights, f[idx])
    return _node(out, (features,), backward_fn)


# ---------------------------------------------------------------------------
# backward pass


def backward(output: Tensor, output_grad=None) -> None:
    """Accumulate d(output . output_grad)/d(node) into every tracked node's grad.

    output_grad defaults to ones.  A graph may be walked only once; a second
    call on the same output raises TapeConsumedError.
    """
    if output._consumed:
        raise TapeConsumedError("backward already ran on this graph output")
    output._consumed = True

    if output_grad is None:
        seed = np.ones_like(output.values)
    else:
        seed = np.broadcast_to(np.asarray(output_grad, dtype=np.float64), output.values.shape).copy()

    # iterative topological order over tracked nodes
    topo: List[Tensor] = []
    seen = set()
    stack = [(output, False)]
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
            if id(p) not in seen and (p._parents or _tracked(p)):
                stack.append((p, False))

    grads = {id(output): seed}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.values)
            node.grad += g
        if node._backward_fn is None:
            continue
        for parent, pg in zip(node._parents, node._backward_fn(g)):
            if pg is None or not (_tracked(parent) or parent._parents):
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# optimizer and initialization


@dataclass
class AdamState:
    """Per-parameter Adam accumulators plus hyperparameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float = 1e-3, **kw) -> "AdamState":
        state = cls(lr=lr, **kw)
        state.first_moment = [np.zeros_like(p.values) for p in params]
        state.second_moment = [np.zeros_like(p.values) for p in params]
        return state


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One in-place Adam update with bias correction; grads are not cleared."""
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.values -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def param_init(shape, rng: np.random.Generator, scheme: str = "uniform-fan-in",
               fan_in: Optional[int] = None, value: float = 0.0) -> Tensor:
    """Create a trainable parameter.

    uniform-fan-in draws from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in
    defaulting to the last axis length; constant fills with `value`.
    """
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if scheme == "constant":
        vals = np.full(shape, value, dtype=np.float64)
    elif scheme == "uniform-fan-in":
        if fan_in is None:
            fan_in = shape[-1]
        bound = 1.0 / math.sqrt(fan_in)
        vals = rng.uniform(-bound, bound, size=shape)
    else:
        raise ValueError(f"unknown init scheme: {scheme!r}")
    return Tensor(vals, requires_grad=True)
