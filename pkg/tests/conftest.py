import numpy as np
import pytest


def textured_image(rng, h=64, w=64):
    """Structured random image: gradients, sinusoids and blocks, well inside [0, 1].

    Blur width is visually identifiable on these, unlike on white noise, so
    degradation estimation has signal at toy scale.
    """
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    img = np.zeros((3, h, w))
    for c in range(3):
        fy, fx = rng.uniform(2, 9, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img[c] = 0.25 * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        img[c] += rng.uniform(0.1, 0.5) * yy + rng.uniform(0.1, 0.5) * xx
    for _ in range(4):
        y0, x0 = rng.integers(0, h - 8), rng.integers(0, w - 8)
        hh, wwd = rng.integers(4, h // 2), rng.integers(4, w // 2)
        img[:, y0 : y0 + hh, x0 : x0 + wwd] += rng.uniform(-0.2, 0.2, size=(3, 1, 1))
    img += 0.05 * rng.standard_normal((3, h, w))
    lo, hi = img.min(), img.max()
    return 0.05 + 0.9 * (img - lo) / (hi - lo)


def family_image(rng, h=64, w=64):
    """One texture family: fixed frequency content, random phases and block
    positions. Cross-image content variation is low, so degradation remains
    the dominant factor of variation; training-backed acceptance runs use
    these to keep degradation-representation learning within toy budgets.
    """
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    img = np.zeros((3, h, w))
    for c, (fy, fx, amp) in enumerate([(5, 3, 0.22), (2, 7, 0.18), (6, 6, 0.20)]):
        p1, p2 = rng.uniform(0, 2 * np.pi, 2)
        img[c] = amp * np.sin(2 * np.pi * (fy * yy + fx * xx) + p1)
        img[c] += 0.12 * np.sin(2 * np.pi * (fx * yy - fy * xx) + p2)
    for _ in range(5):
        y0, x0 = rng.integers(0, h - 10), rng.integers(0, w - 10)
        img[:, y0 : y0 + 8, x0 : x0 + 8] += 0.15
    img += 0.5
    lo, hi = img.min(), img.max()
    return 0.05 + 0.9 * (img - lo) / (hi - lo)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def hr_images(rng):
    return [textured_image(rng) for _ in range(8)]
