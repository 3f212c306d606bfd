"""Image I/O, color conversion, pixel (un)shuffle and Y-channel fidelity metrics.

Images are numpy float arrays in [0, 1], channel-major: a single image is
(C, H, W); batched helpers accept any leading dimensions and act on the last
three axes.
"""

import csv
import os

import numpy as np
from PIL import Image
from scipy import ndimage

# ITU-R BT.601 full-range RGB -> studio-swing luma, the usual SR convention.
_Y_COEF = np.array([65.481, 128.553, 24.966])
_Y_OFFSET = 16.0

PSNR_CAP_DB = 100.0


def read_image(path):
    """Load an 8-bit RGB PNG as a (3, H, W) float64 array with values raw/255."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise ValueError(f"expected 8-bit RGB input, got mode {im.mode!r}: {path}")
        raw = np.asarray(im, dtype=np.uint8)
    return raw.astype(np.float64).transpose(2, 0, 1) / 255.0


def write_image(path, img):
    """Write a (3, H, W) array in [0, 1] as an 8-bit RGB PNG (round(v*255))."""
    img = np.asarray(img)
    _check_image(img)
    raw = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(raw.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def _check_image(img):
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got shape {img.shape}")
    if img.shape[1] < 1 or img.shape[2] < 1:
        raise ValueError(f"empty image: shape {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values outside [0, 1]")


def rgb_to_y(img):
    """Convert (..., 3, H, W) RGB in [0, 1] to the (..., 1, H, W) luma plane."""
    img = np.asarray(img)
    if img.shape[-3] != 3:
        raise ValueError(f"expected 3 channels, got {img.shape[-3]}")
    y = np.tensordot(_Y_COEF, img, axes=([0], [img.ndim - 3]))
    y = np.expand_dims(y, axis=-3)
    return np.clip((y + _Y_OFFSET) / 255.0, 0.0, 1.0)


def pixel_unshuffle(x, r):
    """Space-to-channel rearrangement (..., C, H*r, W*r) -> (..., C*r*r, H, W).

    Channel ordering is (c, dy, dx) lexicographic:
    out[c*r*r + dy*r + dx, y, x] = in[c, y*r + dy, x*r + dx].
    """
    x = np.asarray(x)
    *lead, c, hh, ww = x.shape
    if hh % r or ww % r:
        raise ValueError(f"spatial dims {hh}x{ww} not divisible by r={r}")
    h, w = hh // r, ww // r
    out = x.reshape(*lead, c, h, r, w, r)
    out = np.moveaxis(out, (-3, -1), (-4, -3))  # (..., c, r, r, h, w)
    return np.ascontiguousarray(out.reshape(*lead, c * r * r, h, w))


def pixel_shuffle(x, r):
    """Channel-to-space rearrangement, the exact inverse of pixel_unshuffle."""
    x = np.asarray(x)
    *lead, cr2, h, w = x.shape
    if cr2 % (r * r):
        raise ValueError(f"channels {cr2} not divisible by r^2={r * r}")
    c = cr2 // (r * r)
    out = x.reshape(*lead, c, r, r, h, w)
    out = np.moveaxis(out, (-4, -3), (-3, -1))  # (..., c, h, r, w, r)
    return np.ascontiguousarray(out.reshape(*lead, c, h * r, w * r))


def _crop_border(y, border):
    if border < 0:
        raise ValueError("border must be >= 0")
    if border == 0:
        return y
    if 2 * border >= y.shape[-2] or 2 * border >= y.shape[-1]:
        raise ValueError(f"border {border} too large for shape {y.shape}")
    return y[..., border:-border, border:-border]


def psnr_y(ref, test, border=0, cap_db=PSNR_CAP_DB):
    """Y-channel PSNR in dB between two RGB images, `border` pixels shaved per side.

    Returns `cap_db` when the cropped luma planes are exactly equal.
    """
    ref, test = np.asarray(ref), np.asarray(test)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {test.shape}")
    a = _crop_border(rgb_to_y(ref), border)
    b = _crop_border(rgb_to_y(test), border)
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return cap_db
    return 10.0 * np.log10(1.0 / mse)


def _gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma**2))
    return g / g.sum()


def ssim_y(ref, test, border=0, win_size=11, sigma=1.5):
    """Mean local SSIM on the Y channel with a Gaussian window, data range [0, 1]."""
    ref, test = np.asarray(ref), np.asarray(test)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {test.shape}")
    a = _crop_border(rgb_to_y(ref), border)[0]
    b = _crop_border(rgb_to_y(test), border)[0]
    if a.shape[0] < win_size or a.shape[1] < win_size:
        raise ValueError(f"cropped plane {a.shape} smaller than {win_size}x{win_size} window")
    win = _gaussian_window(win_size, sigma)
    c1, c2 = 0.01**2, 0.03**2

    def filt(x):
        m = win_size // 2
        return ndimage.correlate(x, win, mode="constant")[m:-m, m:-m]

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def read_image_dir(path, crop_multiple=None):
    """Load every PNG in a directory as sorted (image_id, array) pairs.

    crop_multiple, when given, trims each image so both spatial dims are
    divisible by it (top-left anchored), the usual SR evaluation protocol.
    """
    names = sorted(n for n in os.listdir(path) if n.lower().endswith(".png"))
    if not names:
        raise FileNotFoundError(f"no PNG images in {path}")
    out = []
    for name in names:
        img = read_image(os.path.join(path, name))
        if crop_multiple:
            m = crop_multiple
            h = img.shape[1] - img.shape[1] % m
            w = img.shape[2] - img.shape[2] % m
            img = img[:, :h, :w]
        out.append((os.path.splitext(name)[0], img))
    return out


def write_metric_report(path, rows):
    """Write per-image metrics as CSV rows of (image_id, psnr_db, ssim)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image_id", "psnr_db", "ssim"])
        for image_id, psnr, ssim in rows:
            w.writerow([image_id, f"{psnr:.6f}", f"{ssim:.6f}"])
