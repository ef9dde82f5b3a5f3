"""Small reverse-mode autodiff core on float64 numpy arrays.

Only the operations the HGNN forward pass needs are provided. Every op
returns a new :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to parent gradients; :func:`backward` walks the
tape in reverse topological order.

Reductions along the contracted axis (matrix products, softmax row sums,
layer-norm moments, distances) accumulate sequentially. A row's result then
depends only on that row's inputs, never on how many other rows are batched
with it or on trailing masked (zero) entries, which keeps the batched and
per-graph IGNN paths bitwise identical.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(ValueError):
    """A softmax row has no unmasked entry."""


class ContractError(RuntimeError):
    """An API precondition was violated (non-scalar loss, missing gradient...)."""


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, values, requires_grad: bool = False, parents: tuple = (),
                 backward_fn: Callable | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward_fn = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)


class Param(Tensor):
    """A named trainable leaf tensor."""

    __slots__ = ("name",)

    def __init__(self, name: str, values):
        super().__init__(values, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(values, parents: Sequence[Tensor], backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(values)
    return Tensor(values, True, tuple(parents), backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def seq_sum(x: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    """Left-to-right sum along ``axis`` (order fixed, independent of other axes)."""
    out = np.cumsum(x, axis=axis).take([-1], axis=axis)
    return out if keepdims else np.squeeze(out, axis=axis)


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    prod = a[..., :, :, None] * b[..., None, :, :]
    return np.ascontiguousarray(np.cumsum(prod, axis=-2)[..., -1, :])


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.values + b.values, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.values - b.values, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _result(a.values * b.values, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        ga = g / b.values
        gb = -g * a.values / (b.values * b.values)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.values / b.values, (a, b), fn)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.values)
    return _result(out, (x,), lambda g: (g * out,))


def log(x, floor: float = 0.0) -> Tensor:
    """Natural log. With ``floor > 0`` inputs are clamped first (zero grad where clamped)."""
    x = as_tensor(x)
    if floor > 0.0:
        clamped = x.values < floor
        safe = np.where(clamped, floor, x.values)

        def fn(g):
            return (np.where(clamped, 0.0, g / safe),)

        return _result(np.log(safe), (x,), fn)
    return _result(np.log(x.values), (x,), lambda g: (g / x.values,))


def sqrt(x, eps: float = 0.0) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.values + eps)
    return _result(out, (x,), lambda g: (g / (2.0 * out),))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _result(x.values * x.values, (x,), lambda g: (2.0 * g * x.values,))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.abs(x.values), (x,), lambda g: (g * np.sign(x.values),))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"slope must lie in [0, 1), got {slope}")
    x = as_tensor(x)
    factor = np.where(x.values >= 0.0, 1.0, slope)
    return _result(x.values * factor, (x,), lambda g: (g * factor,))


# ------------------------------------------------------------------ structure

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def fn(g):
        ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
        gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(_mm(a.values, b.values), (a, b), fn)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.swapaxes(x.values, -1, -2), (x,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result(x.values.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def take(x, index) -> Tensor:
    """Basic or fancy indexing (``x[index]``)."""
    x = as_tensor(x)

    def fn(g):
        out = np.zeros_like(x.values)
        np.add.at(out, index, g)
        return (out,)

    return _result(x.values[index], (x,), fn)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.values for t in tensors], axis=axis), tensors, fn)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.sum(x.values, axis=axis, keepdims=keepdims), (x,), fn)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.values.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------- model primitives

def rowdot(x, y) -> Tensor:
    """Per-row inner product ``[..., m, 1]``, accumulated like :func:`matmul`."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"rowdot: shapes differ {x.shape} vs {y.shape}")
    out = seq_sum(x.values * y.values, axis=-1, keepdims=True)
    return _result(out, (x, y), lambda g: (g * y.values, g * x.values))


def softmax_rows(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked-out (``False``) entries are exactly 0."""
    x = as_tensor(x)
    v = x.values
    if mask is None:
        shifted = v - v.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateRowError("softmax_rows: a row has every entry masked")
        masked = np.where(mask, v, -np.inf)
        e = np.where(mask, np.exp(masked - masked.max(axis=-1, keepdims=True)), 0.0)
    out = e / seq_sum(e, axis=-1, keepdims=True)

    def fn(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _result(out, (x,), fn)


def layer_norm(x, scale, shift, eps: float = 1e-5) -> Tensor:
    """Normalise each row to mean 0 / population variance 1, then ``scale * . + shift``."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    d = x.shape[-1]
    if d < 1 or scale.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"layer_norm: feature dim {d} vs scale {scale.shape}, shift {shift.shape}")
    mu = seq_sum(x.values, keepdims=True) / d
    centred = x.values - mu
    var = seq_sum(centred * centred, keepdims=True) / d
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv_std
    out = xhat * scale.values + shift.values

    def fn(g):
        gxhat = g * scale.values
        gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, np.sum(g * xhat, axis=lead), np.sum(g, axis=lead)

    return _result(out, (x, scale, shift), fn)


def pairwise_sq_dist(x, y) -> Tensor:
    """``D[..., i, j] = sum_k (x[i, k] - y[j, k])**2``."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape[-1] != y.shape[-1]:
        raise ShapeError(f"pairwise_sq_dist: feature dims differ {x.shape} vs {y.shape}")
    diff = x.values[..., :, None, :] - y.values[..., None, :, :]
    out = seq_sum(diff * diff, axis=-1)

    def fn(g):
        weighted = 2.0 * g[..., None] * diff
        return (_unbroadcast(weighted.sum(axis=-2), x.shape),
                _unbroadcast(-weighted.sum(axis=-3), y.shape))

    return _result(out, (x, y), fn)


# ------------------------------------------------------------------- backward

def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    ``params``, when given, receive a zero gradient if the loss does not reach
    them, so optimiser steps see a populated ``grad`` for every parameter.
    """
    if loss.values.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            if p.grad is None:
                p.zero_grad()
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.values)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ----------------------------------------------------------------- optimisers

def _groups(params) -> list[dict]:
    params = list(params)
    if params and isinstance(params[0], dict):
        return [dict(g) for g in params]
    return [{"params": params}]


class Optimizer:
    """Base class: parameter groups, each with its own learning rate."""

    kind = "base"

    def __init__(self, params, lr: float):
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        self.param_groups = _groups(params)
        for group in self.param_groups:
            group["params"] = list(group["params"])
            group.setdefault("lr", lr)
        self.step_count = 0
        self.state: dict[int, dict[str, np.ndarray]] = {}

    @property
    def params(self) -> list[Tensor]:
        return [p for g in self.param_groups for p in g["params"]]

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def _check_grads(self) -> None:
        for p in self.params:
            if p.grad is None:
                name = getattr(p, "name", repr(p))
                raise ContractError(f"parameter {name} has no gradient; call backward first")

    def step(self) -> None:
        self._check_grads()
        self.step_count += 1
        for group in self.param_groups:
            for p in group["params"]:
                self._update(p, group["lr"], self.state.setdefault(id(p), {}))
                p.grad = np.zeros_like(p.values)

    def _update(self, p: Tensor, lr: float, state: dict) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    kind = "sgd"

    def __init__(self, params, lr: float, momentum: float = 0.0):
        super().__init__(params, lr)
        self.momentum = momentum

    def _update(self, p, lr, state):
        g = p.grad
        if self.momentum:
            buf = state.get("momentum_buffer")
            buf = g.copy() if buf is None else self.momentum * buf + g
            state["momentum_buffer"] = buf
            g = buf
        p.values -= lr * g


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        super().__init__(params, lr)
        if not all(0.0 < b < 1.0 for b in betas):
            raise ValueError(f"Adam betas must lie in (0, 1), got {betas}")
        self.betas = betas
        self.eps = eps

    def _update(self, p, lr, state):
        b1, b2 = self.betas
        g = p.grad
        m = state.get("exp_avg", np.zeros_like(g))
        v = state.get("exp_avg_sq", np.zeros_like(g))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state["exp_avg"], state["exp_avg_sq"] = m, v
        m_hat = m / (1.0 - b1 ** self.step_count)
        v_hat = v / (1.0 - b2 ** self.step_count)
        p.values -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def sgd_step(optimizer: SGD) -> None:
    optimizer.step()


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


# ------------------------------------------------------------ gradient checks

def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps ~0 gradients from exploding."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(loss_fn: Callable[[], Tensor], p: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``loss_fn()`` with respect to ``p`` (in place, restored)."""
    if eps <= 0:
        raise ValueError(f"finite-difference step must be positive, got {eps}")
    out = np.zeros_like(p.values)
    flat, grad = p.values.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(loss_fn().values)
        flat[i] = orig - eps
        down = float(loss_fn().values)
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * eps)
    return out


def gradient_report(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                    floor: float = 1e-4,
                    grad_hook: Callable[[Tensor, np.ndarray], np.ndarray] | None = None
                    ) -> dict[str, tuple[float, tuple[int, ...]]]:
    """Worst relative error and its coordinate for each parameter.

    ``grad_hook(param, analytic)`` may rewrite the analytic gradient before the
    comparison (used as a negative control).
    """
    if eps <= 0:
        raise ValueError(f"finite-difference step must be positive, got {eps}")
    zero_grad(params)
    backward(loss_fn(), params)
    report = {}
    for idx, p in enumerate(params):
        analytic = p.grad.copy()
        if grad_hook is not None:
            analytic = grad_hook(p, analytic)
        numeric = numeric_grad(loss_fn, p, eps)
        err = relative_error(analytic, numeric, floor)
        worst = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
        report[getattr(p, "name", f"param{idx}")] = (float(err.max()) if err.size else 0.0,
                                                     tuple(int(i) for i in worst))
    zero_grad(params)
    return report


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                      eps: float = 1e-5, floor: float = 1e-4) -> float:
    """Max relative error between :func:`backward` and central differences."""
    report = gradient_report(loss_fn, params, eps, floor)
    return max((err for err, _ in report.values()), default=0.0)
