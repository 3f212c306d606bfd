"""Blur-kernel construction, degradation sampling and LR synthesis.

The degradation pipeline is blur -> decimate -> add white Gaussian noise ->
clamp. Blur is correlation (no kernel flip) under reflection padding; the
Gaussian kernel families used here are 180-degree symmetric, so correlation
and convolution coincide, but the convention is fixed so independent
reimplementations agree. Decimation keeps every scale-th pixel starting at
index 0.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import imaging

DEFAULT_KERNEL_SIZE = 21
ISO_SIGMA_RANGE = (0.2, 4.0)
ANISO_EIGVAL_RANGE = (0.2, 4.0)
ANISO_NOISE_RANGE = (0.0, 25.0)
GAUSSIAN8_SIGMAS = tuple(np.linspace(1.80, 3.20, 8).tolist())


@dataclass(frozen=True)
class IsotropicSpec:
    sigma: float


@dataclass(frozen=True)
class AnisotropicSpec:
    lambda1: float  # covariance eigenvalues, variance units
    lambda2: float
    theta: float  # rotation angle in [0, pi)


@dataclass
class DegradationSpec:
    """Full parametrization of one degradation: blur kernel, scale, noise std (0-255 scale)."""

    kernel: np.ndarray
    scale: int = 4
    noise_sigma: float = 0.0
    provenance: dict = field(default_factory=dict)  # sampler parameters, for CSV logs


def validate_kernel(kernel, tol=1e-6):
    kernel = np.asarray(kernel)
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"kernel must be square 2-D, got {kernel.shape}")
    if kernel.shape[0] % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {kernel.shape[0]}")
    if kernel.min() < 0:
        raise ValueError("kernel has negative weights")
    if abs(kernel.sum() - 1.0) > tol:
        raise ValueError(f"kernel sums to {kernel.sum()}, expected 1")
    return kernel


def _offset_grid(size):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    return np.meshgrid(ax, ax, indexing="ij")  # dy varies along rows, dx along cols


def make_isotropic_kernel(sigma, size=DEFAULT_KERNEL_SIZE):
    """Normalized isotropic Gaussian kernel, w[i,j] ~ exp(-(di^2+dj^2)/(2 sigma^2))."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    dy, dx = _offset_grid(size)
    w = np.exp(-(dy**2 + dx**2) / (2.0 * sigma**2))
    return w / w.sum()


def make_anisotropic_kernel(spec, size=DEFAULT_KERNEL_SIZE):
    """Normalized anisotropic Gaussian kernel with covariance R(theta) diag(l1, l2) R(theta)^T.

    The covariance acts on integer offsets v = (dy, dx) from the kernel
    center; lambda1 governs the dy axis at theta = 0.
    """
    if spec.lambda1 <= 0 or spec.lambda2 <= 0:
        raise ValueError(f"eigenvalues must be positive, got {spec.lambda1}, {spec.lambda2}")
    if size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    c, s = np.cos(spec.theta), np.sin(spec.theta)
    rot = np.array([[c, -s], [s, c]])
    cov = rot @ np.diag([spec.lambda1, spec.lambda2]) @ rot.T
    prec = np.linalg.inv(cov)
    dy, dx = _offset_grid(size)
    quad = prec[0, 0] * dy**2 + (prec[0, 1] + prec[1, 0]) * dy * dx + prec[1, 1] * dx**2
    w = np.exp(-0.5 * quad)
    return w / w.sum()


def gaussian8_kernels(scale=4, size=DEFAULT_KERNEL_SIZE):
    """The 8 isotropic evaluation kernels: widths 1.80 .. 3.20, step 0.20 (x4 only)."""
    if scale != 4:
        raise ValueError(f"gaussian8 is defined for scale 4, got {scale}")
    return [make_isotropic_kernel(sig, size) for sig in GAUSSIAN8_SIGMAS]


def sample_degradation(mode, rng, scale=4, size=DEFAULT_KERNEL_SIZE):
    """Draw one training degradation.

    iso:   sigma ~ U[0.2, 4.0], no noise.
    aniso: lambda1, lambda2 ~ U(0.2, 4), theta ~ U(0, pi), noise ~ U[0, 25].
    """
    if mode == "iso":
        sigma = rng.uniform(*ISO_SIGMA_RANGE)
        kernel = make_isotropic_kernel(sigma, size)
        return DegradationSpec(
            kernel, scale, 0.0, provenance={"mode": "iso", "sigma_or_lambda1": sigma}
        )
    if mode == "aniso":
        lam1 = rng.uniform(*ANISO_EIGVAL_RANGE)
        lam2 = rng.uniform(*ANISO_EIGVAL_RANGE)
        theta = rng.uniform(0.0, np.pi)
        noise = rng.uniform(*ANISO_NOISE_RANGE)
        kernel = make_anisotropic_kernel(AnisotropicSpec(lam1, lam2, theta), size)
        return DegradationSpec(
            kernel,
            scale,
            noise,
            provenance={
                "mode": "aniso",
                "sigma_or_lambda1": lam1,
                "lambda2": lam2,
                "theta": theta,
            },
        )
    raise ValueError(f"unknown degradation mode {mode!r}")


def blur(img, kernel):
    """Per-channel correlation with reflection padding, same spatial size.

    Rank-1 kernels (every isotropic and axis-aligned Gaussian here) run as
    two 1-D passes; the result matches the full 2-D correlation to float
    precision.
    """
    img = np.asarray(img)
    # scipy's 'mirror' mode matches np.pad(mode='reflect'): edge pixel not repeated.
    u, s, vt = np.linalg.svd(kernel)
    if len(s) > 1 and s[1] < 1e-12 * s[0]:
        row = u[:, 0] * np.sqrt(s[0])
        col = vt[0] * np.sqrt(s[0])
        if row.sum() < 0:
            row, col = -row, -col
        return np.stack(
            [
                ndimage.correlate1d(
                    ndimage.correlate1d(ch, row, axis=0, mode="mirror"),
                    col,
                    axis=1,
                    mode="mirror",
                )
                for ch in img
            ]
        )
    return np.stack([ndimage.correlate(ch, kernel, mode="mirror") for ch in img])


def degrade(hr, spec, rng=None):
    """Apply the classic degradation: blur, decimate by spec.scale, add noise, clamp."""
    hr = np.asarray(hr)
    s = spec.scale
    if hr.shape[-2] % s or hr.shape[-1] % s:
        raise ValueError(f"HR dims {hr.shape[-2:]} not divisible by scale {s}")
    lr = blur(hr, spec.kernel)[:, ::s, ::s]
    if spec.noise_sigma > 0:
        if rng is None:
            raise ValueError("noise_sigma > 0 requires an rng")
        lr = lr + rng.normal(0.0, spec.noise_sigma / 255.0, size=lr.shape)
    return np.clip(lr, 0.0, 1.0)


def synth_dataset(hr_images, out_root, mode="iso", scale=4, base_seed=0, size=DEFAULT_KERNEL_SIZE):
    """Write HR/LR pairs plus a degradations.csv manifest under out_root.

    hr_images: iterable of (image_id, (3,H,W) array). Per-image seed is
    base_seed + index so synthesis is order-independent and reproducible.
    """
    hr_dir = os.path.join(out_root, "HR")
    lr_dir = os.path.join(out_root, "LR")
    os.makedirs(hr_dir, exist_ok=True)
    os.makedirs(lr_dir, exist_ok=True)
    rows = []
    for idx, (image_id, hr) in enumerate(hr_images):
        seed = base_seed + idx
        rng = np.random.default_rng(seed)
        spec = sample_degradation(mode, rng, scale=scale, size=size)
        lr = degrade(hr, spec, rng)
        imaging.write_image(os.path.join(hr_dir, f"{image_id}.png"), hr)
        imaging.write_image(os.path.join(lr_dir, f"{image_id}.png"), lr)
        p = spec.provenance
        rows.append(
            [
                image_id,
                p["mode"],
                f"{p['sigma_or_lambda1']:.8f}",
                f"{p.get('lambda2', float('nan')):.8f}",
                f"{p.get('theta', float('nan')):.8f}",
                f"{spec.noise_sigma:.8f}",
                scale,
                seed,
            ]
        )
    with open(os.path.join(out_root, "degradations.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["image_id", "mode", "sigma_or_lambda1", "lambda2", "theta", "noise_sigma", "scale", "seed"]
        )
        w.writerows(rows)
    return len(rows)
