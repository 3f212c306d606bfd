"""Differentiable operator core: reverse-mode autodiff over numpy arrays.

Every op builds a graph node whose backward closure accumulates gradients
into its parents. Graph construction is skipped entirely when no input
requires gradients, so frozen-parameter forward passes carry no autodiff
overhead. Double precision is used for gradient-check builds; training may
run single precision.

An optional multiply-accumulate counter (`count_macs`) instruments the
forward cost of every op that performs inner products.
"""

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import imaging


class Tensor:
    """A numpy array with an optional same-shape gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def _acc(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        """Backpropagate from this node (defaults to seed gradient of ones)."""
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._acc(np.ones_like(self.data) if grad is None else np.asarray(grad))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)


def _as_data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _node(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# MAC instrumentation

_MAC_STACK = []


class MacCounter:
    def __init__(self):
        self.total = 0


@contextmanager
def count_macs():
    """Context manager yielding a counter of forward multiply-accumulates."""
    counter = MacCounter()
    _MAC_STACK.append(counter)
    try:
        yield counter
    finally:
        _MAC_STACK.pop()


def _add_macs(n):
    for counter in _MAC_STACK:
        counter.total += int(n)


# ---------------------------------------------------------------------------
# Primitive ops


def add(a, b):
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a._acc(g)
        if b.requires_grad:
            b._acc(g)

    return _node(a.data + b.data, (a, b), bwd)


def scale(a, c):
    c = float(c)

    def bwd(g):
        a._acc(c * g)

    return _node(a.data * c, (a,), bwd)


def relu(a):
    mask = a.data > 0

    def bwd(g):
        a._acc(g * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), bwd)


def reshape(a, shape):
    old = a.data.shape

    def bwd(g):
        a._acc(g.reshape(old))

    return _node(a.data.reshape(shape), (a,), bwd)


def _pad_hw(x, p):
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, w, b):
    """Same-size 2-D correlation with zero padding K//2, stride 1.

    x: (N, C_in, H, W), w: (C_out, C_in, K, K) with K odd, b: (C_out,).
    Gradients are defined w.r.t. all three inputs.
    """
    n, c_in, h, wid = x.shape
    c_out, c_in_w, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be odd square, got {k}x{k2}")
    if c_in_w != c_in or b.shape != (c_out,):
        raise ValueError(f"conv2d shape mismatch: x{x.shape} w{w.shape} b{b.shape}")
    p = k // 2
    xp = _pad_hw(x.data, p)
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # (N, C_in, H, W, K, K)
    out = np.einsum("nchwij,ocij->nohw", cols, w.data, optimize=True)
    out += b.data[None, :, None, None]
    _add_macs(n * c_out * c_in * k * k * h * wid)

    def bwd(g):
        if b.requires_grad:
            b._acc(g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            w._acc(np.einsum("nchwij,nohw->ocij", cols, g, optimize=True))
        if x.requires_grad:
            gp = _pad_hw(g, p)
            gcols = sliding_window_view(gp, (k, k), axis=(2, 3))
            wf = w.data[:, :, ::-1, ::-1]
            x._acc(np.einsum("nohwij,ocij->nchw", gcols, wf, optimize=True))

    return _node(out, (x, w, b), bwd)


def depthwise_conv2d(x, w):
    """Per-sample, per-channel correlation: each batch element carries its own kernels.

    x: (N, C, H, W), w: (N, C, K, K); zero padding K//2, same spatial size.
    This is the dynamic-convolution primitive: cost N*C*K^2*H*W, a factor C
    below ordinary convolution at equal width.
    """
    n, c, h, wid = x.shape
    nw, cw, k, k2 = w.shape
    if (nw, cw) != (n, c) or k != k2 or k % 2 == 0:
        raise ValueError(f"depthwise_conv2d shape mismatch: x{x.shape} w{w.shape}")
    p = k // 2
    xp = _pad_hw(x.data, p)
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))
    out = np.einsum("nchwij,ncij->nchw", cols, w.data, optimize=True)
    _add_macs(n * c * k * k * h * wid)

    def bwd(g):
        if w.requires_grad:
            w._acc(np.einsum("nchwij,nchw->ncij", cols, g, optimize=True))
        if x.requires_grad:
            gp = _pad_hw(g, p)
            gcols = sliding_window_view(gp, (k, k), axis=(2, 3))
            wf = w.data[:, :, ::-1, ::-1]
            x._acc(np.einsum("nchwij,ncij->nchw", gcols, wf, optimize=True))

    return _node(out, (x, w), bwd)


def linear(x, w, b):
    """y = x @ w.T + b for x: (N, in), w: (out, in), b: (out,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ValueError(f"linear shape mismatch: x{x.shape} w{w.shape} b{b.shape}")
    out = x.data @ w.data.T + b.data
    _add_macs(x.shape[0] * w.shape[0] * w.shape[1])

    def bwd(g):
        if b.requires_grad:
            b._acc(g.sum(axis=0))
        if w.requires_grad:
            w._acc(g.T @ x.data)
        if x.requires_grad:
            x._acc(g @ w.data)

    return _node(out, (x, w, b), bwd)


def global_avg_pool(x):
    """Spatial mean per channel, (N, C, H, W) -> (N, C)."""
    n, c, h, w = x.shape
    inv = 1.0 / (h * w)

    def bwd(g):
        x._acc(np.broadcast_to(g[:, :, None, None] * inv, x.shape))

    return _node(x.data.mean(axis=(2, 3)), (x,), bwd)


def pixel_shuffle(x, r):
    def bwd(g):
        x._acc(imaging.pixel_unshuffle(g, r))

    return _node(imaging.pixel_shuffle(x.data, r), (x,), bwd)


def pixel_unshuffle(x, r):
    def bwd(g):
        x._acc(imaging.pixel_shuffle(g, r))

    return _node(imaging.pixel_unshuffle(x.data, r), (x,), bwd)


# ---------------------------------------------------------------------------
# Losses


def l1_loss(pred, target):
    """Mean absolute difference; subgradient 0 at exact ties."""
    t = _as_data(target)
    if pred.shape != t.shape:
        raise ValueError(f"l1_loss shape mismatch: {pred.shape} vs {t.shape}")
    diff = pred.data - t
    sign = np.sign(diff)

    def bwd(g):
        pred._acc(g * sign / diff.size)

    return _node(np.mean(np.abs(diff)), (pred,), bwd)


def _log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def kl_loss(d_teacher, d_student):
    """Batch-mean KL divergence between softmax-normalized vectors.

    Per sample, p = softmax(teacher), q = softmax(student),
    loss = sum_j p_j * log(p_j / q_j). The teacher side is a constant:
    gradients flow to the student logits only.
    """
    dt = _as_data(d_teacher)
    if d_student.shape != dt.shape:
        raise ValueError(f"kl_loss shape mismatch: {dt.shape} vs {d_student.shape}")
    n = dt.shape[0]
    log_p = _log_softmax(dt)
    p = np.exp(log_p)
    log_q = _log_softmax(d_student.data)
    loss = np.sum(p * (log_p - log_q)) / n

    def bwd(g):
        q = np.exp(log_q)
        d_student._acc(g * (q - p) / n)

    return _node(np.asarray(loss), (d_student,), bwd)


def kd_l1_loss(d_teacher, d_student):
    """Mean absolute difference over the distillation vectors, teacher constant."""
    dt = _as_data(d_teacher)
    if d_student.shape != dt.shape:
        raise ValueError(f"kd_l1_loss shape mismatch: {dt.shape} vs {d_student.shape}")
    diff = d_student.data - dt
    sign = np.sign(diff)

    def bwd(g):
        d_student._acc(g * sign / diff.size)

    return _node(np.mean(np.abs(diff)), (d_student,), bwd)


def kd_l2_loss(d_teacher, d_student):
    """Mean squared difference over the distillation vectors, teacher constant."""
    dt = _as_data(d_teacher)
    if d_student.shape != dt.shape:
        raise ValueError(f"kd_l2_loss shape mismatch: {dt.shape} vs {d_student.shape}")
    diff = d_student.data - dt

    def bwd(g):
        d_student._acc(g * 2.0 * diff / diff.size)

    return _node(np.mean(diff**2), (d_student,), bwd)


# ---------------------------------------------------------------------------
# Parameters and the optimizer


class ParamSet:
    """Named, ordered collection of trainable tensors plus their Adam state."""

    def __init__(self):
        self._params = {}
        self._m = {}
        self._v = {}
        self.step_count = 0

    def add(self, name, data):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def num_values(self):
        return sum(t.data.size for t in self._params.values())

    def state_dict(self):
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state(self, state):
        """Copy arrays into matching parameters; fail naming the offending tensor."""
        for name, t in self._params.items():
            if name not in state:
                raise KeyError(f"missing parameter in state: {name!r}")
            arr = np.asarray(state[name])
            if arr.shape != t.data.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: expected {t.data.shape}, got {arr.shape}"
                )
            t.data = arr.astype(t.data.dtype, copy=True)
        extra = set(state) - set(self._params)
        if extra:
            raise KeyError(f"unexpected parameters in state: {sorted(extra)}")

    def astype(self, dtype):
        for t in self._params.values():
            t.data = t.data.astype(dtype)
        return self


def adam_step(params, grads=None, lr=1e-3, beta1=0.9, beta2=0.99, eps=1e-8):
    """One bias-corrected Adam update over every parameter in the set.

    grads defaults to each tensor's accumulated .grad. NaN gradients abort
    with the offending parameter name.
    """
    params.step_count += 1
    t = params.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad if grads is None else grads[name]
        if g is None:
            continue
        if np.isnan(g).any():
            raise FloatingPointError(f"NaN gradient for parameter {name!r}")
        if name not in params._m:
            params._m[name] = np.zeros_like(p.data)
            params._v[name] = np.zeros_like(p.data)
        m, v = params._m[name], params._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params
