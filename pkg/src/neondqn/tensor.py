"""Dense tensors with reverse-mode gradients.

Only the handful of layers the Q-network needs are provided: conv2d,
batchnorm2d, linear, relu, flatten, gather and the squared TD loss.
Every op records a backward closure on its output; ``Tensor.backward``
walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    """An ndarray plus an optional gradient slot.

    ``data`` keeps whatever float dtype it was created with (float64 for
    gradient checks, float32 for training runs).
    """

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _result(data, parents, backward):
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _check_ndim(t, ndim, what):
    if t.data.ndim != ndim:
        raise ValueError(f"{what} must be {ndim}-D, got shape {t.shape}")


def conv2d(x, weight, stride=1, bias=None):
    """Valid cross-correlation of an NCHW input with an OIKK weight."""
    _check_ndim(x, 4, "conv2d input")
    _check_ndim(weight, 4, "conv2d weight")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise ValueError(f"conv2d channel mismatch: input has C={c}, weight expects I={i}")
    if h < kh or w < kw:
        raise ValueError(f"conv2d spatial extent {h}x{w} smaller than kernel {kh}x{kw}")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1

    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # im2col with rows (c, kh, kw) and columns (n, ho, wo)
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    w2 = weight.data.reshape(o, -1)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        if weight.requires_grad:
            weight._accumulate((g2 @ cols.T).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=1))
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
            dx = np.zeros((c, n, h, w), dtype=x.dtype)
            for a in range(kh):
                for b in range(kw):
                    dx[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += dcols[:, a, b]
            x._accumulate(dx.transpose(1, 0, 2, 3))

    return _result(out, parents, backward)


class RunningStats:
    """Per-channel running mean/variance carried by a batch-norm layer."""

    def __init__(self, channels, momentum=0.1, dtype=np.float64):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum


def batchnorm2d(x, gamma, beta, running, mode="train", eps=1e-5):
    """Per-channel normalisation of an NCHW tensor.

    Train mode normalises with the (biased) batch statistics and folds the
    unbiased batch variance into ``running`` with its momentum; eval mode
    uses ``running`` as is.
    """
    _check_ndim(x, 4, "batchnorm2d input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"batchnorm2d expects gamma/beta of shape ({c},), got {gamma.shape} and {beta.shape}"
        )
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    axes = (0, 2, 3)
    if mode == "train":
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = n * h * w
        unbiased = var * m / max(m - 1, 1)
        mom = running.momentum
        running.mean *= 1 - mom
        running.mean += mom * mean
        running.var *= 1 - mom
        running.var += mom * unbiased
    else:
        mean = running.mean
        var = running.var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gx = g * gamma.data[None, :, None, None]
            if mode == "train":
                mean_g = gx.mean(axis=axes, keepdims=True)
                mean_gx = (gx * xhat).mean(axis=axes, keepdims=True)
                dx = (gx - mean_g - xhat * mean_gx) * inv_std[None, :, None, None]
            else:
                dx = gx * inv_std[None, :, None, None]
            x._accumulate(dx)

    return _result(out, (x, gamma, beta), backward)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` for an N x F input and an A x F weight."""
    _check_ndim(x, 2, "linear input")
    _check_ndim(weight, 2, "linear weight")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"linear feature mismatch: input has F={x.shape[1]}, weight expects F={weight.shape[1]}"
        )
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear bias must have shape ({weight.shape[0]},), got {bias.shape}")
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad:
            x._accumulate(g @ weight.data)

    return _result(out, parents, backward)


def relu(x):
    mask = x.data > 0
    out = np.maximum(x.data, 0)

    def backward(g):
        x._accumulate(g * mask)

    return _result(out, (x,), backward)


def flatten(x):
    """Collapse every axis after the first."""
    shape = x.shape
    out = x.data.reshape(shape[0], -1)

    def backward(g):
        x._accumulate(g.reshape(shape))

    return _result(out, (x,), backward)


def gather(x, index):
    """Pick ``x[i, index[i]]`` from an N x A tensor."""
    _check_ndim(x, 2, "gather input")
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (x.shape[0],):
        raise ValueError(f"gather index must have shape ({x.shape[0]},), got {index.shape}")
    rows = np.arange(x.shape[0])
    out = x.data[rows, index]

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[rows, index] = g
        x._accumulate(dx)

    return _result(out, (x,), backward)


def tensor_sum(x):
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _result(out, (x,), backward)


def squared_td_loss(predicted_q, target_y):
    """Mean of ``(y - Q)**2`` over the minibatch; ``target_y`` never receives a gradient."""
    y = target_y.data if isinstance(target_y, Tensor) else np.asarray(target_y)
    if predicted_q.shape != y.shape:
        raise ValueError(
            f"squared_td_loss length mismatch: predicted {predicted_q.shape}, target {y.shape}"
        )
    diff = predicted_q.data - y.astype(predicted_q.dtype, copy=False)
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=predicted_q.dtype)

    def backward(g):
        predicted_q._accumulate(g * 2.0 * diff / n)

    return _result(out, (predicted_q,), backward)
