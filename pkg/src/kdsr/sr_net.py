"""The degradation-guided SR network.

Built from residual blocks whose first convolution is dynamic: a small
two-layer mapping turns the per-sample degradation vector into one depthwise
kernel per channel, so restoration adapts to the estimated degradation at a
cost of roughly 1/C of an ordinary convolution. Blocks finish with an
ordinary 3x3 convolution for cross-channel mixing, and a sub-pixel
(pixel-shuffle) tail upsamples to the target scale.
"""

from dataclasses import dataclass

import numpy as np

from .diffops import (
    ParamSet,
    Tensor,
    add,
    conv2d,
    depthwise_conv2d,
    linear,
    pixel_shuffle,
    relu,
    reshape,
)
from .kd_ide import _conv_init, _linear_init


@dataclass(frozen=True)
class SRConfig:
    C: int = 16
    n_blocks: int = 4
    K: int = 3  # dynamic kernel size
    scale: int = 4

    def __post_init__(self):
        if self.K % 2 == 0:
            raise ValueError(f"dynamic kernel size must be odd, got {self.K}")
        if self.scale < 1 or self.scale & (self.scale - 1):
            raise ValueError(f"scale must be a power of 2 for the sub-pixel tail, got {self.scale}")


def _n_up_stages(scale):
    return int(np.log2(scale))


def init_params(config, rng, dtype=np.float32):
    c, k = config.C, config.K
    params = ParamSet()
    params.add("head.w", _conv_init(rng, c, 3, 3, dtype))
    params.add("head.b", np.zeros(c, dtype=dtype))
    for i in range(config.n_blocks):
        w1, b1 = _linear_init(rng, 2 * c, c, dtype)
        w2, b2 = _linear_init(rng, c * k * k, 2 * c, dtype)
        params.add(f"block{i}.phi.w1", w1)
        params.add(f"block{i}.phi.b1", b1)
        params.add(f"block{i}.phi.w2", w2)
        params.add(f"block{i}.phi.b2", b2)
        params.add(f"block{i}.conv.w", _conv_init(rng, c, c, 3, dtype))
        params.add(f"block{i}.conv.b", np.zeros(c, dtype=dtype))
    params.add("body.w", _conv_init(rng, c, c, 3, dtype))
    params.add("body.b", np.zeros(c, dtype=dtype))
    for j in range(_n_up_stages(config.scale)):
        params.add(f"up{j}.w", _conv_init(rng, 4 * c, c, 3, dtype))
        params.add(f"up{j}.b", np.zeros(4 * c, dtype=dtype))
    params.add("tail.w", _conv_init(rng, 3, c, 3, dtype))
    params.add("tail.b", np.zeros(3, dtype=dtype))
    return params


def dynamic_weights(d, phi):
    """Map a (N, C) degradation vector to per-sample depthwise kernels (N, C, 1, K, K).

    phi is the pair of linear layers (w1, b1, w2, b2) with a ReLU between;
    its output length C*K*K reshapes to one K x K kernel per channel.
    """
    w1, b1, w2, b2 = phi
    n, c = d.shape
    out = linear(relu(linear(d, w1, b1)), w2, b2)
    k2 = out.shape[1] // c
    k = int(round(np.sqrt(k2)))
    if k * k * c != out.shape[1]:
        raise ValueError(f"phi output length {out.shape[1]} is not C*K*K for C={c}")
    return reshape(out, (n, c, 1, k, k))


def idr_ddc(f_in, d, phi):
    """Degradation-conditioned depthwise dynamic convolution.

    Each batch element's feature channels are filtered by its own generated
    kernels: F_out[b, i] = F_in[b, i] (*) W_b[i], zero padding K//2.
    Gradients flow to f_in, d, and the phi parameters.
    """
    if f_in.shape[1] != d.shape[1]:
        raise ValueError(f"channel mismatch: features {f_in.shape[1]} vs d {d.shape[1]}")
    w = dynamic_weights(d, phi)
    n, c, _, k, _ = w.shape
    return depthwise_conv2d(f_in, reshape(w, (n, c, k, k)))


def _phi(params, i):
    return (
        params[f"block{i}.phi.w1"],
        params[f"block{i}.phi.b1"],
        params[f"block{i}.phi.w2"],
        params[f"block{i}.phi.b2"],
    )


def dcrb_forward(f_in, d, block_params):
    """One residual block: dynamic depthwise conv, ReLU, ordinary conv, identity skip."""
    phi, conv_w, conv_b = block_params
    y = idr_ddc(f_in, d, phi)
    y = conv2d(relu(y), conv_w, conv_b)
    return add(f_in, y)


def sr_forward(lr, d, params, config):
    """LR batch (N, 3, H, W) plus degradation vectors (N, C) -> SR batch (N, 3, sH, sW).

    Output is left unclamped so training gradients near 0/1 stay unbiased;
    clamp at inference/metric time.
    """
    if not isinstance(lr, Tensor):
        lr = Tensor(lr)
    x0 = conv2d(lr, params["head.w"], params["head.b"])
    h = x0
    for i in range(config.n_blocks):
        block = (_phi(params, i), params[f"block{i}.conv.w"], params[f"block{i}.conv.b"])
        h = dcrb_forward(h, d, block)
    h = conv2d(h, params["body.w"], params["body.b"])
    h = add(h, x0)
    for j in range(_n_up_stages(config.scale)):
        h = relu(pixel_shuffle(conv2d(h, params[f"up{j}.w"], params[f"up{j}.b"]), 2))
    return conv2d(h, params["tail.w"], params["tail.b"])
