"""Implicit degradation estimators.

Two variants share one architecture: the teacher sees the LR image
concatenated with the pixel-unshuffled HR image (51 input channels at x4),
the student sees the LR image alone (3 channels). Both emit a 4C-dim
distillation vector D' and its C-dim compression D that steers the SR
network's dynamic convolutions.
"""

import csv
from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from . import imaging
from .diffops import (
    ParamSet,
    Tensor,
    add,
    conv2d,
    global_avg_pool,
    linear,
    relu,
)

IDRPair = namedtuple("IDRPair", ["d", "d_prime"])


@dataclass(frozen=True)
class IDEConfig:
    C: int = 16
    n_blocks: int = 3
    in_channels: int = 3  # 3 for the student, 51 for the teacher
    scale: int = 4

    def __post_init__(self):
        if self.in_channels not in (3, 3 + 3 * self.scale**2):
            raise ValueError(f"in_channels must be 3 or {3 + 3 * self.scale**2}, got {self.in_channels}")
        if self.C < 4:
            raise ValueError(f"C must be >= 4, got {self.C}")


def teacher_config(student_cfg):
    return IDEConfig(
        C=student_cfg.C,
        n_blocks=student_cfg.n_blocks,
        in_channels=3 + 3 * student_cfg.scale**2,
        scale=student_cfg.scale,
    )


def _conv_init(rng, c_out, c_in, k, dtype):
    # Kaiming fan-in scaling; biases start at zero.
    std = np.sqrt(2.0 / (c_in * k * k))
    return rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(dtype)


def _linear_init(rng, n_out, n_in, dtype):
    bound = 1.0 / np.sqrt(n_in)
    w = rng.uniform(-bound, bound, size=(n_out, n_in)).astype(dtype)
    b = rng.uniform(-bound, bound, size=(n_out,)).astype(dtype)
    return w, b


def init_params(config, rng, dtype=np.float32):
    """Fresh estimator parameters: head conv, residual trunk, refine and compress linears."""
    c = config.C
    params = ParamSet()
    params.add("head.w", _conv_init(rng, c, config.in_channels, 3, dtype))
    params.add("head.b", np.zeros(c, dtype=dtype))
    for i in range(config.n_blocks):
        params.add(f"block{i}.conv1.w", _conv_init(rng, c, c, 3, dtype))
        params.add(f"block{i}.conv1.b", np.zeros(c, dtype=dtype))
        params.add(f"block{i}.conv2.w", _conv_init(rng, c, c, 3, dtype))
        params.add(f"block{i}.conv2.b", np.zeros(c, dtype=dtype))
    for name, (n_out, n_in) in {
        "fc1": (4 * c, c),
        "fc2": (4 * c, 4 * c),
        "compress": (c, 4 * c),
    }.items():
        w, b = _linear_init(rng, n_out, n_in, dtype)
        params.add(f"{name}.w", w)
        params.add(f"{name}.b", b)
    return params


def make_teacher_input(lr, hr, scale=4):
    """Stack LR channels with the pixel-unshuffled HR: (N,3,H,W)+(N,3,sH,sW) -> (N,3+3s^2,H,W)."""
    lr, hr = np.asarray(lr), np.asarray(hr)
    if hr.shape[-2:] != (lr.shape[-2] * scale, lr.shape[-1] * scale):
        raise ValueError(f"HR dims {hr.shape[-2:]} are not {scale}x the LR dims {lr.shape[-2:]}")
    return np.concatenate([lr, imaging.pixel_unshuffle(hr, scale)], axis=-3)


def ide_forward(params, config, x):
    """Run the estimator on a (N, in_channels, H, W) input.

    Returns an IDRPair of tensors: D (N, C) and D' (N, 4C).
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.shape[1] != config.in_channels:
        raise ValueError(f"expected {config.in_channels} input channels, got {x.shape[1]}")
    h = conv2d(x, params["head.w"], params["head.b"])
    for i in range(config.n_blocks):
        y = conv2d(h, params[f"block{i}.conv1.w"], params[f"block{i}.conv1.b"])
        y = conv2d(relu(y), params[f"block{i}.conv2.w"], params[f"block{i}.conv2.b"])
        h = add(h, y)
    v = global_avg_pool(h)
    u = relu(linear(v, params["fc1.w"], params["fc1.b"]))
    d_prime = linear(u, params["fc2.w"], params["fc2.b"])
    d = linear(d_prime, params["compress.w"], params["compress.b"])
    return IDRPair(d=d, d_prime=d_prime)


def init_student_from_teacher(teacher_params, student_config):
    """Student parameters copied from a trained teacher.

    Every same-shape tensor is copied verbatim; the first convolution keeps
    only the slice over the 3 LR input channels (the teacher's remaining 48
    channels see the unshuffled HR, which the student never receives).
    """
    if student_config.in_channels != 3:
        raise ValueError("student config must have 3 input channels")
    head_w = teacher_params["head.w"].data
    if head_w.shape[0] != student_config.C:
        raise ValueError(
            f"teacher width {head_w.shape[0]} does not match student C={student_config.C}"
        )
    expected = init_params(student_config, np.random.default_rng(0), dtype=head_w.dtype)
    if set(expected.names()) != set(teacher_params.names()):
        raise ValueError("teacher/student configs differ beyond the first convolution")
    student = ParamSet()
    for name, t in teacher_params.items():
        if name == "head.w":
            student.add(name, t.data[:, :3].copy())
        else:
            student.add(name, t.data.copy())
    return student


def write_idr_csv(path, records, include_dprime=False):
    """Export per-image degradation vectors for external projection tools.

    records: iterable of (image_id, degradation_sigma, d, d_prime).
    """
    records = list(records)
    if not records:
        raise ValueError("no IDR records to export")
    c = len(records[0][2])
    header = ["image_id", "degradation_sigma"] + [f"d_{i}" for i in range(c)]
    if include_dprime:
        header += [f"dprime_{i}" for i in range(4 * c)]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for image_id, sigma, d, d_prime in records:
            row = [image_id, f"{sigma:.6f}"] + [f"{v:.8e}" for v in np.asarray(d)]
            if include_dprime:
                row += [f"{v:.8e}" for v in np.asarray(d_prime)]
            w.writerow(row)
