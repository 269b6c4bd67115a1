"""Minimal dense-tensor math with reverse-mode automatic differentiation.

Just enough machinery for the policy network: linear maps, 1D convolution,
layer normalization, softmax, masked attention building blocks, cross-entropy
and a clipped-SGD optimizer.  Arrays are numpy; float32 storage with float64
accumulation in the reductions that need it.
"""

from __future__ import annotations

import math

import numpy as np


class TensorError(ValueError):
    pass


def _as_array(x, dtype=None):
    a = np.asarray(x)
    if dtype is not None:
        a = a.astype(dtype, copy=False)
    elif a.dtype.kind != "f":
        a = a.astype(np.float32)
    return a


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense array node in a dynamically recorded computation graph.

    requires_grad on an op result means "some trainable leaf feeds it";
    backward prunes subtrees where it is False.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data)

    # ------------------------------------------------------------------ graph

    def backward(self):
        if self.data.size != 1:
            raise TensorError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo, seen = [], set()

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for p in node._parents:
                visit(p)
            topo.append(node)

        visit(self)
        for node in topo:
            if node._backward is not None:  # leaves keep accumulating across calls
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, g):
        if not self.requires_grad:
            return
        g = g.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = g.copy() if g.base is not None else g
        else:
            self.grad = self.grad + g

    # -------------------------------------------------------------- operators

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other, dtype=self.data.dtype)
        out_data = self.data + other.data

        def bwd(g):
            self._accum(_unbroadcast(g, self.data.shape))
            other._accum(_unbroadcast(g, other.data.shape))

        return Tensor(out_data, _parents=(self, other), _backward=bwd)

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other, dtype=self.data.dtype)
        out_data = self.data * other.data

        def bwd(g):
            self._accum(_unbroadcast(g * other.data, self.data.shape))
            other._accum(_unbroadcast(g * self.data, other.data.shape))

        return Tensor(out_data, _parents=(self, other), _backward=bwd)

    def __neg__(self):
        return self * (-1.0)

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other, dtype=self.data.dtype)
        return self + (-other)

    __radd__ = __add__
    __rmul__ = __mul__

    def __matmul__(self, other):
        if not isinstance(other, Tensor):
            other = Tensor(other, dtype=self.data.dtype)
        out_data = self.data @ other.data

        def bwd(g):
            a, b = self.data, other.data
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            self._accum(_unbroadcast(ga, a.shape))
            other._accum(_unbroadcast(gb, b.shape))

        return Tensor(out_data, _parents=(self, other), _backward=bwd)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.data.shape
        out_data = self.data.reshape(shape)

        def bwd(g):
            self._accum(g.reshape(src_shape))

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def transpose(self, *axes):
        inv = np.argsort(axes)
        out_data = self.data.transpose(axes)

        def bwd(g):
            self._accum(g.transpose(inv))

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
        out_data = out_data.astype(self.data.dtype)

        def bwd(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            self._accum(np.broadcast_to(gg, self.data.shape))

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def relu(self):
        mask = self.data > 0
        out_data = self.data * mask

        def bwd(g):
            self._accum(g * mask)

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def tanh(self):
        out_data = np.tanh(self.data)

        def bwd(g):
            self._accum(g * (1.0 - out_data * out_data))

        return Tensor(out_data, _parents=(self,), _backward=bwd)


def concat(tensors, axis):
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accum(g[tuple(idx)])

    return Tensor(out_data, _parents=tuple(tensors), _backward=bwd)


def stack(tensors, axis):
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else t.ndim + 1 + axis, 1)
        expanded.append(t.reshape(shape))
    return concat(expanded, axis)


def select_positions(x, positions):
    """x[:, positions, :] with gradient scatter-add (positions: int array)."""
    positions = np.asarray(positions, dtype=np.int64)
    out_data = x.data[:, positions, :]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), positions), g)
        x._accum(gx)

    return Tensor(out_data, _parents=(x,), _backward=bwd)


def embedding(table, indices):
    """Row lookup table[indices] -> (*indices.shape, d)."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.min() < 0 or indices.max() >= table.shape[0]:
        raise TensorError(
            f"embedding index out of range [0,{table.shape[0]}): "
            f"[{indices.min()},{indices.max()}]"
        )
    out_data = table.data[indices]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, indices, g)
        table._accum(gt)

    return Tensor(out_data, _parents=(table,), _backward=bwd)


def linear(x, W, b=None):
    """x:[*,in] @ W:[in,out] (+ b:[out])."""
    if x.shape[-1] != W.shape[0]:
        raise TensorError(f"linear shape mismatch: x {x.shape} vs W {W.shape}")
    out = x @ W
    if b is not None:
        out = out + b
    return out


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        x._accum(out_data * (g - dot))

    return Tensor(out_data, _parents=(x,), _backward=bwd)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then affine with gamma/beta."""
    if eps <= 0:
        raise TensorError("layer_norm eps must be > 0")
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = ((x.data - mu) * inv).astype(x.data.dtype)
    out_data = gamma.data * xhat + beta.data

    def bwd(g):
        n = x.data.shape[-1]
        gxhat = g * gamma.data
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        x._accum(inv * (gxhat - m1 - xhat * m2))
        reduce_axes = tuple(range(g.ndim - 1))
        gamma._accum((g * xhat).sum(axis=reduce_axes))
        beta._accum(g.sum(axis=reduce_axes))
        del n

    return Tensor(out_data, _parents=(x, gamma, beta), _backward=bwd)


def conv1d(x, K, b=None, padding="same"):
    """Length-preserving 1D convolution.

    x: [batch, in_ch, length], K: [out_ch, in_ch, k], b: [out_ch].
    padding="same" centers the kernel; "causal" left-pads k-1 so output
    position t depends only on inputs <= t.
    """
    if x.ndim != 3 or K.ndim != 3 or x.shape[1] != K.shape[1]:
        raise TensorError(f"conv1d shape mismatch: x {x.shape} vs K {K.shape}")
    k = K.shape[2]
    if padding == "same":
        pad_l, pad_r = (k - 1) // 2, k // 2
    elif padding == "causal":
        pad_l, pad_r = k - 1, 0
    else:
        raise TensorError(f"unknown padding mode {padding!r}")
    xpad = np.pad(x.data, ((0, 0), (0, 0), (pad_l, pad_r)))
    win = np.lib.stride_tricks.sliding_window_view(xpad, k, axis=2)  # [B,C,L,k]
    out_data = np.einsum("bclk,ock->bol", win, K.data).astype(x.data.dtype)
    if b is not None:
        out_data = out_data + b.data[None, :, None]

    def bwd(g):
        gK = np.einsum("bclk,bol->ock", win, g)
        K._accum(gK)
        gxpad = np.zeros_like(xpad)
        for t in range(k):
            gxpad[:, :, t : t + x.shape[2]] += np.einsum("bol,oc->bcl", g, K.data[:, :, t])
        gx = gxpad[:, :, pad_l : pad_l + x.shape[2]]
        x._accum(gx)
        if b is not None:
            b._accum(g.sum(axis=(0, 2)))

    parents = (x, K) if b is None else (x, K, b)
    return Tensor(out_data, _parents=parents, _backward=bwd)


def cross_entropy(logits, targets, weights=None):
    """Mean negative log-likelihood over rows; optional per-row weights.

    logits: [n, C], targets: int [n] in [0, C).  `weights` (e.g. a padding
    mask) rescales rows; the mean is taken over the total weight.
    """
    targets = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if targets.shape != (n,):
        raise TensorError(f"cross_entropy target shape {targets.shape} != ({n},)")
    if targets.min() < 0 or targets.max() >= c:
        raise TensorError(f"cross_entropy target out of range [0,{c})")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(n), targets] - lse
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,):
            raise TensorError(f"cross_entropy weight shape {w.shape} != ({n},)")
    total_w = w.sum()
    if total_w <= 0:
        raise TensorError("cross_entropy: total weight is zero")
    out_data = np.asarray(-(logp * w).sum() / total_w, dtype=logits.data.dtype)

    def bwd(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), targets] -= 1.0
        glogits = p * (w / total_w)[:, None] * float(g)
        logits._accum(glogits.astype(logits.data.dtype))

    return Tensor(out_data, _parents=(logits,), _backward=bwd)


def attention(q, k, v, mask_bias=None):
    """Scaled dot-product attention over trailing [.., n, d_k] axes.

    `mask_bias` is an additive array (0 for allowed, large negative for
    blocked) broadcastable to the score shape [.., n, n].
    """
    d_k = q.shape[-1]
    if d_k == 0:
        raise TensorError("attention: d_k must be > 0")
    scores = (q @ k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * (1.0 / math.sqrt(d_k))
    if mask_bias is not None:
        scores = scores + Tensor(np.asarray(mask_bias, dtype=scores.data.dtype))
    weights = softmax(scores, axis=-1)
    return weights @ v


def causal_mask_bias(n, dtype=np.float32, neg=-1e9):
    """Additive bias [n, n]: position i attends to j <= i."""
    bias = np.zeros((n, n), dtype=dtype)
    bias[np.triu_indices(n, k=1)] = neg
    return bias


# ------------------------------------------------------------------ optimizer


class OptimizerFault(RuntimeError):
    pass


def global_grad_norm(params):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def sgd_step(params, lr, clip_norm=None):
    """Clip by global norm, then plain SGD on `params` (trainable only).

    Tensors without requires_grad are never touched.  Returns the pre-clip
    global gradient norm.
    """
    if lr < 0:
        raise TensorError("lr must be >= 0")
    trainable = [p for p in params if p.requires_grad and p.grad is not None]
    for p in trainable:
        if not np.all(np.isfinite(p.grad)):
            raise OptimizerFault("non-finite gradient; step aborted")
    norm = global_grad_norm(trainable)
    scale = 1.0
    if clip_norm is not None and clip_norm > 0 and norm > clip_norm:
        scale = clip_norm / norm
    for p in trainable:
        p.data = p.data - (lr * scale) * p.grad
    return norm


def zero_grads(params):
    for p in params:
        p.grad = None


# ----------------------------------------------------------------- grad check


def grad_check(f, params, eps=1e-4, max_coords=64, rng=None):
    """Compare analytic gradients of scalar f() against central differences.

    Returns the max relative error over (sampled) coordinates of `params`.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = {id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in params}
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        ga = analytic[id(p)].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            denom = max(1.0, abs(num), abs(ga[i]))
            worst = max(worst, abs(num - ga[i]) / denom)
    return worst
