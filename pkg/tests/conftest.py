import numpy as np
import pytest
from scipy import ndimage

from fkb import camera


def make_smooth_image(size: int, seed: int) -> np.ndarray:
    """Band-limited uint8 test image (low-frequency sinusoid mixture)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.full((size, size), 0.5)
    for _ in range(4):
        fx, fy = rng.uniform(1, 5, 2)
        phase = rng.uniform(0, 2 * np.pi)
        img += rng.uniform(0.05, 0.12) * np.sin(
            2 * np.pi * (fx * xx + fy * yy) + phase)
    img = np.clip(img, 0, 1)
    return np.floor(img * 255 + 0.5).astype(np.uint8)


def make_blocky_image(size: int, seed: int, n_blocks: int = 12) -> np.ndarray:
    """Textured uint8 image with axis-aligned rectangles (corner-rich)."""
    rng = np.random.default_rng(seed)
    img = np.zeros((size, size))
    max_block = max(6, size // 6)
    for _ in range(n_blocks):
        x, y = rng.integers(3, size - max_block - 3, 2)
        w, h = rng.integers(max_block // 2, max_block + 1, 2)
        img[y:y + h, x:x + w] = rng.uniform(0.3, 1.0)
    img = ndimage.gaussian_filter(img, 1.0)
    return np.floor(np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)


def random_quartic_model(rng: np.random.Generator, width: int = 256,
                         height: int = 256) -> camera.FisheyeModel:
    """Random monotone 4th-order model covering the whole image."""
    while True:
        a1 = rng.uniform(0.8, 1.5) * np.hypot(width, height) / np.pi
        higher = rng.uniform(-0.05, 0.05, 3) * a1
        coeffs = [a1, *higher]
        try:
            model = camera.make_model(coeffs, width, height)
        except ValueError:
            continue
        # every pixel must be unprojectable
        if model.r_max >= np.hypot(width, height) / 2 + 1:
            return model


@pytest.fixture
def square_image():
    """32x32 black image with a centered 16x16 white square."""
    img = np.zeros((32, 32), np.uint8)
    img[8:24, 8:24] = 255
    return img
