"""
Dense float64 tensors with reverse-mode automatic differentiation.

Only the layers used by the two networks are provided. Every op computes its
forward result with numpy and records a closure returning the exact analytic
gradient of each input. ``backward`` walks the recorded graph in reverse
topological order and writes ``.grad`` on the leaf tensors that require it.
"""

import logging
import math

import numpy as np
from scipy.special import erf

from .errors import (
    ConfigError,
    DegenerateMap,
    DegeneratePrediction,
    HeadDivisibility,
    InputTooSmall,
    LabelOutOfRange,
    NonScalarLoss,
    ShapeMismatch,
)


class Tensor:
    """
    Parameters
    ----------
    data : array-like
        Stored as a float64 array (copied).
    requires_grad : bool
        Leaf tensors with requires_grad receive ``.grad`` from ``backward``.
    name : str, optional
        Parameter path, e.g. "blocks.0.attn.wq".
    """

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None, op="leaf"):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return self._backward is None

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, None, tuple(parents), backward_fn, op)
    return Tensor(data, False, None, (), None, op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _swap(a):
    return np.swapaxes(a, -1, -2)


# =========================================================
# 1. Graph and backward
# =========================================================

class Graph:
    """The ops reachable from ``loss``, in topological order (inputs first)."""

    def __init__(self, loss):
        self.loss = loss
        self.nodes = self._topological_order(loss)

    @staticmethod
    def _topological_order(root):
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
            for p in reversed(node._parents):
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    @property
    def leaves(self):
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]

    def backward(self):
        if self.loss.data.size != 1:
            raise NonScalarLoss(f"loss must be a scalar, got shape {self.loss.shape}")

        leaves = self.leaves
        grads = {id(self.loss): np.ones_like(self.loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None or node.is_leaf:
                if node.is_leaf and node.requires_grad:
                    node.grad = g if g is not None else np.zeros_like(node.data)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        return leaves


def backward(loss):
    """Exact reverse-mode gradients; overwrites ``.grad`` of every leaf that requires it."""
    return Graph(loss).backward()


# =========================================================
# 2. Elementwise and structural ops
# =========================================================

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a, c):
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    return _node(
        a.data @ b.data, (a, b),
        lambda g: (_unbroadcast(g @ _swap(b.data), a.shape), _unbroadcast(_swap(a.data) @ g, b.shape)),
        "matmul",
    )


def reshape(a, shape):
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes):
    inverse = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors, axis=0):
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def sum(a):
    return _node(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a):
    n = a.data.size
    return _node(np.mean(a.data), (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),), "mean")


def relu(a):
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def gelu(a):
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return _node(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),), "gelu")


# =========================================================
# 3. Layers
# =========================================================

def linear(x, W, b):
    """xW + b for x[n, d_in], W[d_in, d_out], b[d_out]."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeMismatch(f"linear: x{x.shape} W{W.shape} b{b.shape}")
    return _node(
        x.data @ W.data + b.data, (x, W, b),
        lambda g: (g @ W.data.T, x.data.T @ g, g.sum(axis=0)),
        "linear",
    )


def layer_norm(x, gamma, beta, eps=1e-5):
    """Row-wise normalization to mean 0 / population variance 1, then scale and shift."""
    if x.data.ndim != 2 or x.shape[1] < 2 or gamma.shape != (x.shape[1],) or beta.shape != gamma.shape:
        raise ShapeMismatch(f"layer_norm: x{x.shape} gamma{gamma.shape} beta{beta.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv

    def back(g):
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _node(xhat * gamma.data + beta.data, (x, gamma, beta), back, "layer_norm")


def softmax(x):
    """Softmax over the last axis (max-subtracted)."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _node(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),), "softmax")


def mhsa(x, params, n_heads):
    """
    Multi-head self-attention over tokens x[n, d].

    ``params`` maps wq, bq, wk, bk, wv, bv, wo, bo to Tensors; weights are
    (d, d), biases (d,).
    """
    n, d = x.shape
    if d % n_heads:
        raise HeadDivisibility(f"embedding dim {d} not divisible by {n_heads} heads")
    dh = d // n_heads

    def heads(t):
        return transpose(reshape(t, (n, n_heads, dh)), (1, 0, 2))

    q = heads(linear(x, params["wq"], params["bq"]))
    k = heads(linear(x, params["wk"], params["bk"]))
    v = heads(linear(x, params["wv"], params["bv"]))

    scores = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    ctx = matmul(softmax(scores), v)
    ctx = reshape(transpose(ctx, (1, 0, 2)), (n, d))
    return linear(ctx, params["wo"], params["bo"])


def conv1x1(x, W, b):
    """Per-pixel channel mixing: x[c_in, h, w], W[c_in, c_out], b[c_out] -> [c_out, h, w]."""
    if x.data.ndim != 3 or W.data.ndim != 2 or x.shape[0] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeMismatch(f"conv1x1: x{x.shape} W{W.shape} b{b.shape}")
    out = np.tensordot(W.data, x.data, axes=([0], [0])) + b.data[:, None, None]

    def back(g):
        return (
            np.tensordot(W.data, g, axes=([1], [0])),
            np.tensordot(x.data, g, axes=([1, 2], [1, 2])),
            g.sum(axis=(1, 2)),
        )

    return _node(out, (x, W, b), back, "conv1x1")


def avg_pool2d(x, k=3, stride=2):
    c, h, w = x.shape
    if h < k or w < k:
        raise InputTooSmall(f"avg_pool2d needs at least {k}x{k} input, got {h}x{w}")
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    windows = [
        (slice(di, di + stride * (oh - 1) + 1, stride), slice(dj, dj + stride * (ow - 1) + 1, stride))
        for di in range(k) for dj in range(k)
    ]
    out = np.zeros((c, oh, ow))
    for rs, cs in windows:
        out += x.data[:, rs, cs]
    out /= k * k

    def back(g):
        gx = np.zeros_like(x.data)
        share = g / (k * k)
        for rs, cs in windows:
            gx[:, rs, cs] += share
        return (gx,)

    return _node(out, (x,), back, "avg_pool2d")


def _pool_matrix(n_in, n_out):
    A = np.zeros((n_out, n_in))
    for i in range(n_out):
        start = (i * n_in) // n_out
        end = max(((i + 1) * n_in) // n_out, start + 1)
        A[i, start:end] = 1.0 / (end - start)
    return A


def adaptive_avg_pool(x, out_h, out_w):
    """Window means over a partition of the input into out_h x out_w windows."""
    Ah = _pool_matrix(x.shape[1], out_h)
    Aw = _pool_matrix(x.shape[2], out_w)
    out = np.einsum("ih,chw,jw->cij", Ah, x.data, Aw)
    return _node(out, (x,), lambda g: (np.einsum("ih,cij,jw->chw", Ah, g, Aw),), "adaptive_avg_pool")


# =========================================================
# 4. Losses
# =========================================================

def cc_loss(pred, gt, strict=False):
    """
    1 - Pearson(pred, gt), differentiable in ``pred``.

    A constant prediction gives loss 1.0 with zero gradient, or raises
    DegeneratePrediction when ``strict``.
    """
    gt = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    if gt.shape != pred.shape:
        raise ShapeMismatch(f"cc_loss: pred{pred.shape} vs gt{gt.shape}")

    gc = (gt - gt.mean()).ravel()
    ng = math.sqrt(np.dot(gc, gc))
    if ng == 0:
        raise DegenerateMap("cc_loss target is constant")

    pc = (pred.data - pred.data.mean()).ravel()
    npred = math.sqrt(np.dot(pc, pc))
    if npred == 0:
        if strict:
            raise DegeneratePrediction("cc_loss: constant prediction")
        logging.warning("cc_loss: constant prediction, loss set to 1 with zero gradient")
        return _node(np.array(1.0), (pred,), lambda g: (np.zeros_like(pred.data),), "cc_loss")

    r = np.dot(pc, gc) / (npred * ng)

    def back(g):
        dr = gc / (npred * ng) - r * pc / (npred * npred)
        return ((-g * dr).reshape(pred.shape),)

    return _node(np.array(1.0 - r), (pred,), back, "cc_loss")


def weighted_ce_loss(logits, labels, class_weights):
    """-sum_i w[y_i] log softmax(logits_i)[y_i] / sum_i w[y_i]."""
    n, k = logits.shape
    labels = np.asarray(labels, dtype=int)
    w = np.asarray(class_weights, dtype=np.float64)
    if labels.shape != (n,):
        raise ShapeMismatch(f"{len(labels)} labels for {n} rows of logits")
    if np.any(labels < 0) or np.any(labels >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    if w.shape != (k,) or np.any(w <= 0):
        raise ConfigError(f"class weights must be positive, one per class, got {w.tolist()}")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    wy = w[labels]
    total = wy.sum()
    loss = -np.sum(wy * log_p[np.arange(n), labels]) / total

    def back(g):
        p = np.exp(log_p)
        p[np.arange(n), labels] -= 1.0
        return (g * p * (wy / total)[:, None],)

    return _node(np.array(loss), (logits,), back, "weighted_ce_loss")


# =========================================================
# 5. Finite-difference checking
# =========================================================

def gradcheck(fn, tensors, h=1e-4):
    """
    Compare analytic gradients with central finite differences.

    Parameters
    ----------
    fn : callable
        Rebuilds the graph from the current tensor data and returns a scalar Tensor.
    tensors : list of Tensor
        Leaves to check (requires_grad=True).
    h : float
        Finite-difference step.

    Returns
    -------
    float
        Largest norm-wise relative error over ``tensors``.
    """
    backward(fn())
    analytic = [t.grad.copy() for t in tensors]

    worst = 0.0
    for t, a in zip(tensors, analytic):
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn().item()
            flat[i] = orig - h
            f_minus = fn().item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * h)
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(a - numeric) / denom))
    return worst
