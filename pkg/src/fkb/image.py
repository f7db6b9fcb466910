"""Grayscale image I/O and elementary processing.

Images are plain numpy arrays: uint8 in [0, 255] or float32/float64 in
[0, 1]. PGM (P5) is read and written natively; PNG goes through Pillow with
color inputs collapsed to luma.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import EmptyDataset, FormatError, IoError, RangeError

IMAGE_EXTENSIONS = (".pgm", ".png")


def to_float(img: np.ndarray) -> np.ndarray:
    """Normalize to float64 in [0, 1]."""
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


def to_u8(img: np.ndarray) -> np.ndarray:
    """Quantize a [0, 1] float image to uint8 with round-half-up."""
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _luma(rgb: np.ndarray) -> np.ndarray:
    weights = np.array([0.299, 0.587, 0.114])
    return np.rint(rgb[..., :3].astype(np.float64) @ weights).astype(np.uint8)


def load(path) -> np.ndarray:
    """Load a grayscale uint8 image from PGM (P5) or PNG."""
    path = Path(path)
    if not path.exists():
        raise IoError(f"no such file: {path}")
    if path.suffix.lower() == ".pgm":
        return _load_pgm(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except UnidentifiedImageError as exc:
        raise FormatError(f"cannot decode {path}: {exc}") from exc
    if arr.ndim == 2:
        if arr.dtype != np.uint8:
            arr = to_u8(to_float(arr) / max(1.0, float(arr.max())))
        return arr.copy()
    if arr.ndim == 3:
        return _luma(arr)
    raise FormatError(f"unsupported image layout {arr.shape} in {path}")


def save(img: np.ndarray, path) -> None:
    """Save a grayscale image; format chosen by extension (.pgm or .png)."""
    path = Path(path)
    img = to_u8(img)
    try:
        if path.suffix.lower() == ".pgm":
            _save_pgm(img, path)
        else:
            Image.fromarray(img, mode="L").save(path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _load_pgm(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    # header: P5, whitespace/comment separated width, height, maxval
    header = re.match(
        rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+"
        rb"(?:#[^\n]*\n\s*)*(\d+)\s", blob)
    if header is None:
        raise FormatError(f"{path} is not a binary PGM (P5)")
    width, height, maxval = (int(g) for g in header.groups())
    if maxval > 255:
        raise FormatError(f"16-bit PGM not supported: {path}")
    payload = blob[header.end():]
    if len(payload) < width * height:
        raise FormatError(f"truncated PGM payload in {path}")
    data = np.frombuffer(payload, np.uint8, width * height)
    return data.reshape(height, width).copy()


def _save_pgm(img: np.ndarray, path: Path) -> None:
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def resize_bilinear(img: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize with the align-corners convention.

    Source coordinate of destination index i is i * (src_len - 1) /
    (dst_len - 1); a single-row/column destination samples position 0.
    """
    if width < 1 or height < 1:
        raise RangeError("target dimensions must be >= 1")
    src = np.asarray(img)
    sh, sw = src.shape
    if (sw, sh) == (width, height):
        return src.copy()
    u = (np.arange(width) * (sw - 1) / (width - 1)) if width > 1 else np.zeros(1)
    v = (np.arange(height) * (sh - 1) / (height - 1)) if height > 1 else np.zeros(1)
    uu, vv = np.meshgrid(u, v)
    srcf = to_float(src) if src.dtype == np.uint8 else src.astype(np.float64)
    u0 = np.floor(uu).astype(int)
    v0 = np.floor(vv).astype(int)
    u1 = np.minimum(u0 + 1, sw - 1)
    v1 = np.minimum(v0 + 1, sh - 1)
    fu = uu - u0
    fv = vv - v0
    top = srcf[v0, u0] * (1 - fu) + srcf[v0, u1] * fu
    bot = srcf[v1, u0] * (1 - fu) + srcf[v1, u1] * fu
    out = top * (1 - fv) + bot * fv
    if src.dtype == np.uint8:
        return to_u8(out)
    return out.astype(src.dtype)


def gamma_correct(img: np.ndarray, gamma: float) -> np.ndarray:
    """Power-law intensity transform in normalized [0, 1] space."""
    if gamma <= 0:
        raise RangeError(f"gamma must be positive, got {gamma}")
    src = np.asarray(img)
    out = to_float(src) ** gamma
    if src.dtype == np.uint8:
        return to_u8(out)
    return out.astype(src.dtype)


def ingest_sequence(directory, stride: int = 1, limit: int = 0):
    """List image files sorted lexicographically, strided, then truncated.

    limit = 0 means no truncation.
    """
    if stride < 1:
        raise RangeError("stride must be >= 1")
    root = Path(directory)
    if not root.is_dir():
        raise IoError(f"not a directory: {directory}")
    names = sorted(
        p for p in root.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )
    if not names:
        raise EmptyDataset(f"no images found in {directory}")
    picked = names[::stride]
    if limit > 0:
        picked = picked[:limit]
    return picked
