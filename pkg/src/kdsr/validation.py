"""Input validation helpers for the estimator API."""

import numpy as np


def check_image_batch(X, name="X", multiple_of=None):
    """Coerce X to a list of (3, H, W) float64 arrays with values in [0, 1].

    Accepts a single image, a (N, 3, H, W) array, or a sequence of images
    (sizes may differ). multiple_of, when given, requires spatial dims
    divisible by it.
    """
    if isinstance(X, (list, tuple)):
        images = [np.asarray(x, dtype=np.float64) for x in X]
    else:
        arr = np.asarray(X)
        if arr.ndim == 3:
            images = [arr.astype(np.float64)]
        elif arr.ndim == 4:
            images = [a.astype(np.float64) for a in arr]
        else:
            raise ValueError(f"{name} must be (3,H,W), (N,3,H,W) or a sequence of images")
    if not images:
        raise ValueError(f"{name} is empty")
    for i, img in enumerate(images):
        if img.ndim != 3 or img.shape[0] != 3:
            raise ValueError(f"{name}[{i}] has shape {img.shape}, expected (3, H, W)")
        if not np.isfinite(img).all():
            raise ValueError(f"{name}[{i}] contains non-finite values")
        if img.min() < 0.0 or img.max() > 1.0:
            raise ValueError(f"{name}[{i}] has values outside [0, 1]")
        if multiple_of and (img.shape[1] % multiple_of or img.shape[2] % multiple_of):
            raise ValueError(
                f"{name}[{i}] dims {img.shape[1:]} not divisible by {multiple_of}"
            )
    return images


def as_batch(images):
    """Stack equally-sized images into one (N, C, H, W) array."""
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise ValueError(f"images must share one shape for batching, got {sorted(shapes)}")
    return np.stack(images)
