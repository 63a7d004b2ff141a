"""Minimal reverse-mode autodiff on numpy arrays.

The op set is deliberately small: matmul, add, multiply, SiLU, sigmoid,
softmax, sum/mean, concatenation, and the two losses (KL divergence, MSE)
plus a numerically stable logistic loss for the discriminators. Each op
records its inputs on the computation graph; ``Tensor.backward`` replays the
recorded graph in reverse topological order.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

KL_FLOOR = 1e-12
FD_STEP = 1e-5


class UnsupportedOpError(TypeError):
    pass


class Tensor:
    """Array node on the computation graph, optionally carrying a gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=float)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate gradients into every reachable tensor that requires them."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()

        def visit(node: Tensor):
            if id(node) in seen:
                return
            seen.add(id(node))
            for p in node._parents:
                visit(p)
            order.append(node)

        visit(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # convenience operators (thin wrappers over the op functions below)
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return multiply(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    out._parents = tuple(parents)
    out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise UnsupportedOpError("matmul supports 2-D operands only")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return _make(x.data * s, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _make(y, (x,), backward)


def tensor_sum(x, axis=None) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy(),)

    return _make(x.data.sum(axis=axis), (x,), backward)


def tensor_mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.data.shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, x.data.shape).copy(),)

    return _make(x.data.mean(axis=axis), (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.data.shape),))


def take_rows(x, indices) -> Tensor:
    """Gather rows of a 2-D tensor (embedding lookup); backward scatter-adds."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=int)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(x.data[idx], (x,), backward)


def concat(parts, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def kl_divergence(p, q) -> Tensor:
    """D_KL(p || q) = sum p ln(p/q), with 0 ln 0 = 0 and q floored at 1e-12.

    ``p`` is the (differentiable) model distribution, ``q`` the target.
    """
    p = as_tensor(p)
    q_data = q.data if isinstance(q, Tensor) else np.asarray(q, dtype=float)
    if p.data.shape != q_data.shape:
        raise ValueError(f"shape mismatch {p.data.shape} vs {q_data.shape}")
    qf = np.maximum(q_data, KL_FLOOR)
    pf = np.maximum(p.data, KL_FLOOR)
    log_ratio = np.log(pf / qf)
    value = float(np.sum(np.where(p.data > 0, p.data * log_ratio, 0.0)))
    parents = (p, q) if isinstance(q, Tensor) else (p,)

    def backward(g):
        gp = g * (log_ratio + 1.0)
        if isinstance(q, Tensor):
            return (gp, g * (-p.data / qf))
        return (gp,)

    return _make(value, parents, backward)


def mse(pred, target) -> Tensor:
    """Mean squared componentwise difference."""
    pred = as_tensor(pred)
    t_data = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=float)
    if pred.data.shape != t_data.shape:
        raise ValueError(f"shape mismatch {pred.data.shape} vs {t_data.shape}")
    diff = pred.data - t_data
    n = diff.size
    parents = (pred, target) if isinstance(target, Tensor) else (pred,)

    def backward(g):
        gp = g * 2.0 * diff / n
        if isinstance(target, Tensor):
            return (gp, -gp)
        return (gp,)

    return _make(float(np.mean(diff * diff)), parents, backward)


def logistic_loss(logit, label: float) -> Tensor:
    """Stable binary cross-entropy of sigmoid(logit) against a 0/1 label."""
    x = as_tensor(logit)
    z = x.data
    value = float(np.mean(np.logaddexp(0.0, z) - label * z))
    s = 1.0 / (1.0 + np.exp(-z))

    def backward(g):
        return (g * (s - label) / z.size,)

    return _make(value, (x,), backward)


# ---------------------------------------------------------------------------
# sampling transforms (plain numpy; used at generation time, not in training)


def temperature_softmax(logits, tau: float) -> np.ndarray:
    """softmax(logits / tau); tau < 1 sharpens the distribution."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=float) / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def nucleus_filter(dist, top_p: float) -> np.ndarray:
    """Keep the smallest descending-probability prefix with mass >= top_p.

    Remaining tokens are zeroed and the prefix renormalized. Ties in
    probability break by token index (ascending).
    """
    if not 0.0 < top_p <= 1.0:
        raise ValueError(f"top_p must be in (0, 1], got {top_p}")
    dist = np.asarray(dist, dtype=float)
    order = np.lexsort((np.arange(dist.size), -dist))
    cum = np.cumsum(dist[order])
    # first index where cumulative mass reaches top_p
    cutoff = int(np.searchsorted(cum, top_p - 1e-12)) + 1
    kept = order[:cutoff]
    out = np.zeros_like(dist)
    out[kept] = dist[kept]
    return out / out.sum()


# ---------------------------------------------------------------------------
# gradient checking and optimizers


def grad_check(fn, x: Tensor, step: float = FD_STEP) -> float:
    """Max relative error between reverse-mode and central finite differences.

    ``fn`` must map a Tensor to a scalar Tensor using supported ops only.
    """
    x.zero_grad()
    x.requires_grad = True
    out = fn(x)
    if not isinstance(out, Tensor):
        raise UnsupportedOpError("function must return a Tensor")
    out.backward()
    g_ad = x.grad if x.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    g_fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = fn(x).item()
        flat[i] = orig - step
        f_minus = fn(x).item()
        flat[i] = orig
        g_fd[i] = (f_plus - f_minus) / (2.0 * step)
    g_fd = g_fd.reshape(x.data.shape)
    denom = np.maximum(1.0, np.abs(g_fd))
    return float(np.max(np.abs(g_ad - g_fd) / denom))


class SGD:
    """Plain gradient descent, theta <- theta - eta * grad."""

    def __init__(self, params, lr: float = 1e-3):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


class Adam:
    """Adam-style adaptive update; default betas (0.9, 0.999)."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * p.grad
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * p.grad**2
            m_hat = self.m[i] / (1 - self.beta1**self.t)
            v_hat = self.v[i] / (1 - self.beta2**self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def make_optimizer(params, lr: float = 1e-3, kind: str = "adam"):
    if kind == "adam":
        return Adam(params, lr=lr)
    if kind == "sgd":
        return SGD(params, lr=lr)
    raise ValueError(f"unknown optimizer kind {kind!r}")
