"""Classical keypoint detection, description and matching.

Harris and Shi-Tomasi responses come from the Sobel structure tensor with a
Gaussian window; FAST runs the 16-pixel segment test. NMS keeps strict local
maxima inside a square window and truncates to the k best. The descriptor is
a 256-bit intensity-comparison code over a smoothed 31x31 patch, matched by
plain nearest neighbour (Hamming for binary, L2 for float).
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import CountMismatch, DtypeMismatch, FormatError

DESC_MAGIC = b"FDSC"
DESC_VERSION = 1

_POPCOUNT = np.unpackbits(np.arange(256, dtype=np.uint8)[:, None], axis=1).sum(1)


@dataclass
class KeypointSet:
    """Detected points with scores; order is meaningful (best first)."""

    xy: np.ndarray  # (n, 2) float64, (x, y)
    scores: np.ndarray  # (n,) float64

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.xy) != len(self.scores):
            raise ValueError("xy and scores length mismatch")

    def __len__(self) -> int:
        return len(self.xy)

    @classmethod
    def empty(cls) -> "KeypointSet":
        return cls(np.zeros((0, 2)), np.zeros(0))

    def take(self, idx) -> "KeypointSet":
        return KeypointSet(self.xy[idx], self.scores[idx])

    def save_csv(self, path) -> None:
        lines = ["x,y,score"]
        for (x, y), s in zip(self.xy, self.scores):
            lines.append(f"{float(x)!r},{float(y)!r},{float(s)!r}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load_csv(cls, path) -> "KeypointSet":
        text = Path(path).read_text(encoding="utf-8").strip().splitlines()
        if not text or text[0].strip() != "x,y,score":
            raise FormatError(f"bad keypoint CSV header in {path}")
        rows = []
        for line in text[1:]:
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise FormatError(f"bad keypoint CSV row: {line!r}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise FormatError(f"non-numeric keypoint row: {line!r}") from exc
        if not rows:
            return cls.empty()
        arr = np.asarray(rows)
        return cls(arr[:, :2], arr[:, 2])


@dataclass
class DescriptorSet:
    """Descriptor rows aligned 1:1 with a KeypointSet.

    dtype "binary": data is (n, dim/8) packed uint8, distance is Hamming.
    dtype "float": data is (n, dim) float32, rows L2-normalized, distance L2.
    """

    dtype: str
    dim: int
    data: np.ndarray

    def __post_init__(self):
        if self.dtype not in ("binary", "float"):
            raise ValueError(f"unknown descriptor dtype {self.dtype!r}")
        self.data = np.asarray(self.data)
        if self.dtype == "binary":
            if self.dim % 8 != 0:
                raise ValueError("binary descriptor bits must be a multiple of 8")
            self.data = self.data.astype(np.uint8).reshape(-1, self.dim // 8)
        else:
            self.data = self.data.astype(np.float32).reshape(-1, self.dim)

    def __len__(self) -> int:
        return len(self.data)

    def save(self, path) -> None:
        code = 0 if self.dtype == "binary" else 1
        header = DESC_MAGIC + struct.pack(
            "<HBII", DESC_VERSION, code, len(self.data), self.dim
        )
        Path(path).write_bytes(header + self.data.tobytes())

    @classmethod
    def load(cls, path) -> "DescriptorSet":
        blob = Path(path).read_bytes()
        if blob[:4] != DESC_MAGIC:
            raise FormatError(f"bad descriptor magic in {path}")
        version, code, count, dim = struct.unpack_from("<HBII", blob, 4)
        if version != DESC_VERSION:
            raise FormatError(f"unsupported descriptor version {version}")
        off = 4 + 11
        if code == 0:
            row_bytes = dim // 8
            data = np.frombuffer(blob, np.uint8, count * row_bytes, off)
            return cls("binary", dim, data.reshape(count, row_bytes).copy())
        if code == 1:
            data = np.frombuffer(blob, "<f4", count * dim, off)
            data = data.reshape(count, dim).copy()
            norms = np.linalg.norm(data, axis=1)
            if np.any(np.abs(norms[norms > 0] - 1.0) > 1e-6):
                warnings.warn("float descriptor rows not L2-normalized; "
                              "normalizing on load")
                data = data / np.where(norms > 0, norms, 1.0)[:, None]
            return cls("float", dim, data)
        raise FormatError(f"unknown descriptor dtype code {code}")


@dataclass
class MatchSet:
    """Nearest-neighbour correspondences, optionally with geometric scoring."""

    idx_a: np.ndarray
    idx_b: np.ndarray
    desc_distance: np.ndarray
    residuals: np.ndarray | None = None  # px, filled by matching_correctness
    inliers: np.ndarray | None = None  # bool, residual < epsilon

    def __post_init__(self):
        self.idx_a = np.asarray(self.idx_a, dtype=np.int64).reshape(-1)
        self.idx_b = np.asarray(self.idx_b, dtype=np.int64).reshape(-1)
        self.desc_distance = np.asarray(self.desc_distance,
                                        dtype=np.float64).reshape(-1)

    def __len__(self) -> int:
        return len(self.idx_a)


def _structure_tensor(img: np.ndarray, sigma: float):
    img = np.asarray(img, dtype=np.float64)
    ix = ndimage.sobel(img, axis=1, mode="nearest")
    iy = ndimage.sobel(img, axis=0, mode="nearest")
    ixx = ndimage.gaussian_filter(ix * ix, sigma, mode="nearest")
    iyy = ndimage.gaussian_filter(iy * iy, sigma, mode="nearest")
    ixy = ndimage.gaussian_filter(ix * iy, sigma, mode="nearest")
    return ixx, iyy, ixy


def detect_harris(img: np.ndarray, k_harris: float = 0.04,
                  sigma: float = 1.0) -> np.ndarray:
    """Harris corner response det(M) - k * trace(M)^2."""
    ixx, iyy, ixy = _structure_tensor(img, sigma)
    det = ixx * iyy - ixy * ixy
    trace = ixx + iyy
    return det - k_harris * trace * trace


def detect_shi(img: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Shi-Tomasi response: smaller structure-tensor eigenvalue."""
    ixx, iyy, ixy = _structure_tensor(img, sigma)
    half_trace = 0.5 * (ixx + iyy)
    # lambda_min = trace/2 - sqrt((trace/2)^2 - det)
    gap = np.sqrt(np.maximum(
        (0.5 * (ixx - iyy)) ** 2 + ixy * ixy, 0.0))
    return half_trace - gap


# 16-pixel Bresenham circle of radius 3, clockwise from 12 o'clock: (dy, dx)
_FAST_CIRCLE = np.array([
    (-3, 0), (-3, 1), (-2, 2), (-1, 3), (0, 3), (1, 3), (2, 2), (3, 1),
    (3, 0), (3, -1), (2, -2), (1, -3), (0, -3), (-1, -3), (-2, -2), (-3, -1),
])


def _fast_scores(img: np.ndarray, arc: int) -> np.ndarray:
    """Per-pixel FAST score: the largest threshold at which the segment
    test still fires (0 where never a corner). 3-px border excluded."""
    img = np.asarray(img, dtype=np.int32)
    h, w = img.shape
    if h < 7 or w < 7:
        return np.zeros((h, w))
    center = img[3:h - 3, 3:w - 3]
    diffs = np.empty((16,) + center.shape, dtype=np.int32)
    for i, (dy, dx) in enumerate(_FAST_CIRCLE):
        diffs[i] = img[3 + dy:h - 3 + dy, 3 + dx:w - 3 + dx] - center
    # min over every circular window of length `arc`, via doubling the ring
    ring = np.concatenate([diffs, diffs[:arc - 1]], axis=0)
    windows = np.stack([ring[i:i + 16] for i in range(arc)], axis=0)
    bright = windows.min(axis=0).max(axis=0)  # max over start positions
    dark = (-windows).min(axis=0).max(axis=0)
    score = np.maximum(bright, dark) - 1  # corner iff diff strictly beyond t
    score = np.maximum(score, 0)
    out = np.zeros((h, w))
    out[3:h - 3, 3:w - 3] = score
    return out


def detect_fast(img: np.ndarray, threshold: int = 20, arc: int = 9) -> KeypointSet:
    """FAST segment test: >= arc contiguous circle pixels all brighter than
    center + threshold or all darker than center - threshold."""
    if not (1 <= threshold <= 254):
        raise ValueError(f"threshold must be in [1, 254], got {threshold}")
    if not (1 <= arc <= 16):
        raise ValueError(f"arc must be in [1, 16], got {arc}")
    scores = _fast_scores(img, arc)
    ys, xs = np.nonzero(scores >= threshold)
    if len(xs) == 0:
        return KeypointSet.empty()
    return KeypointSet(np.column_stack([xs, ys]).astype(float),
                       scores[ys, xs])


def fast_response_map(img: np.ndarray, threshold: int = 20,
                      arc: int = 9) -> np.ndarray:
    """FAST scores as a dense response map (0 where not a corner)."""
    scores = _fast_scores(img, arc)
    scores[scores < threshold] = 0.0
    return scores


def nms_map(response: np.ndarray, nms_size: int,
            threshold: float = 1e-8) -> KeypointSet:
    """Strict-local-maximum NMS on a dense response map.

    A pixel survives iff it beats every other pixel in its
    (2*nms_size+1)^2 window; ties go to the lower (row, col).
    """
    resp = np.asarray(response, dtype=np.float64)
    h, w = resp.shape
    size = 2 * nms_size + 1
    above = resp > threshold
    if nms_size == 0:
        ys, xs = np.nonzero(above)
        return KeypointSet(np.column_stack([xs, ys]).astype(float),
                           resp[ys, xs])
    local_max = resp >= ndimage.maximum_filter(resp, size=size, mode="constant",
                                               cval=-np.inf)
    ys, xs = np.nonzero(above & local_max)
    keep_ys, keep_xs = [], []
    for y, x in zip(ys, xs):
        y0, y1 = max(0, y - nms_size), min(h, y + nms_size + 1)
        x0, x1 = max(0, x - nms_size), min(w, x + nms_size + 1)
        window = resp[y0:y1, x0:x1]
        v = resp[y, x]
        if np.any(window > v):
            continue
        ty, tx = np.nonzero(window == v)
        first = min(zip(ty + y0, tx + x0))
        if first == (y, x):
            keep_ys.append(y)
            keep_xs.append(x)
    if not keep_ys:
        return KeypointSet.empty()
    xs = np.asarray(keep_xs, dtype=float)
    ys = np.asarray(keep_ys, dtype=float)
    return KeypointSet(np.column_stack([xs, ys]), resp[keep_ys, keep_xs])


def nms_points(kps: KeypointSet, nms_size: int) -> KeypointSet:
    """Greedy NMS on a sparse point list (Chebyshev radius nms_size)."""
    if len(kps) == 0:
        return kps
    order = np.lexsort((kps.xy[:, 0], kps.xy[:, 1], -kps.scores))
    kept = []
    for i in order:
        x, y = kps.xy[i]
        ok = True
        for j in kept:
            if (abs(kps.xy[j][0] - x) <= nms_size
                    and abs(kps.xy[j][1] - y) <= nms_size):
                ok = False
                break
        if ok:
            kept.append(i)
    return kps.take(np.asarray(kept, dtype=int))


def topk(kps: KeypointSet, k: int) -> KeypointSet:
    """Sort by descending score (ties to lower row, then column), keep k."""
    order = np.lexsort((kps.xy[:, 0], kps.xy[:, 1], -kps.scores))
    return kps.take(order[:k])


def nms_topk(detections, nms_size: int, k: int,
             threshold: float = 1e-8) -> KeypointSet:
    """NMS then top-k on either a dense response map or a KeypointSet."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if nms_size < 0:
        raise ValueError("nms_size must be >= 0")
    if isinstance(detections, np.ndarray):
        survivors = nms_map(detections, nms_size, threshold)
    else:
        survivors = nms_points(detections, nms_size)
    return topk(survivors, k)


BRIEF_PATCH = 31
BRIEF_BITS = 256
BRIEF_BORDER = 17


def brief_pattern(pattern_seed: int = 0) -> np.ndarray:
    """(256, 4) integer offsets (x1, y1, x2, y2), Gaussian sigma = 31/5."""
    from .warp import draw_rng

    rng = draw_rng(pattern_seed, 0)
    half = BRIEF_PATCH // 2
    pts = rng.normal(0.0, BRIEF_PATCH / 5.0, size=(BRIEF_BITS, 4))
    return np.clip(np.rint(pts), -half, half).astype(int)


def describe_brief(img: np.ndarray, kps: KeypointSet,
                   pattern_seed: int = 0):
    """256-bit comparison descriptor on a box-smoothed 31x31 patch.

    Keypoints closer than 17 px to any border are dropped; returns the kept
    KeypointSet and the aligned binary DescriptorSet.
    """
    from .image import to_float

    smooth = ndimage.uniform_filter(to_float(img), size=5, mode="nearest")
    h, w = smooth.shape
    xs = np.rint(kps.xy[:, 0]).astype(int)
    ys = np.rint(kps.xy[:, 1]).astype(int)
    inside = ((xs >= BRIEF_BORDER) & (xs < w - BRIEF_BORDER)
              & (ys >= BRIEF_BORDER) & (ys < h - BRIEF_BORDER))
    kept = kps.take(np.nonzero(inside)[0])
    xs, ys = xs[inside], ys[inside]
    pattern = brief_pattern(pattern_seed)
    if len(kept) == 0:
        return kept, DescriptorSet("binary", BRIEF_BITS,
                                   np.zeros((0, BRIEF_BITS // 8), np.uint8))
    a = smooth[ys[:, None] + pattern[None, :, 1], xs[:, None] + pattern[None, :, 0]]
    b = smooth[ys[:, None] + pattern[None, :, 3], xs[:, None] + pattern[None, :, 2]]
    bits = (a < b).astype(np.uint8)
    packed = np.packbits(bits, axis=1)
    return kept, DescriptorSet("binary", BRIEF_BITS, packed)


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances between packed uint8 descriptor rows."""
    xor = np.bitwise_xor(a[:, None, :], b[None, :, :])
    return _POPCOUNT[xor].sum(axis=-1)


def match_nn(desc_a: DescriptorSet, desc_b: DescriptorSet) -> MatchSet:
    """Plain nearest-neighbour matching; no ratio test, no cross-check.

    Ties go to the lowest target index.
    """
    if desc_a.dtype != desc_b.dtype or desc_a.dim != desc_b.dim:
        raise DtypeMismatch(
            f"{desc_a.dtype}/{desc_a.dim} vs {desc_b.dtype}/{desc_b.dim}"
        )
    if len(desc_a) == 0 or len(desc_b) == 0:
        return MatchSet(np.zeros(0), np.zeros(0), np.zeros(0))
    if desc_a.dtype == "binary":
        dist = hamming_matrix(desc_a.data, desc_b.data).astype(np.float64)
    else:
        a = desc_a.data.astype(np.float64)
        b = desc_b.data.astype(np.float64)
        sq = (a * a).sum(1)[:, None] - 2.0 * a @ b.T + (b * b).sum(1)[None, :]
        dist = np.sqrt(np.maximum(sq, 0.0))
    idx_b = dist.argmin(axis=1)
    idx_a = np.arange(len(desc_a))
    return MatchSet(idx_a, idx_b, dist[idx_a, idx_b])


DETECTOR_NAMES = ("harris", "shi", "fast")


def detector_response(img: np.ndarray, algo: str, **params) -> np.ndarray:
    """Dense response map for a named detector."""
    from .image import to_float, to_u8

    if algo == "harris":
        return detect_harris(to_float(img), **params)
    if algo == "shi":
        return detect_shi(to_float(img), **params)
    if algo == "fast":
        return fast_response_map(to_u8(img), **params)
    raise ValueError(f"unknown detector {algo!r}")


def detect_keypoints(img: np.ndarray, algo: str, nms_size: int, k: int,
                     **params) -> KeypointSet:
    """Detect, suppress non-maxima and keep the k strongest points."""
    return nms_topk(detector_response(img, algo, **params), nms_size, k)


def load_external(kp_path, desc_path):
    """Load an externally computed (KeypointSet, DescriptorSet) pair."""
    kps = KeypointSet.load_csv(kp_path)
    desc = DescriptorSet.load(desc_path)
    if len(kps) != len(desc):
        raise CountMismatch(
            f"{len(kps)} keypoints vs {len(desc)} descriptor rows"
        )
    return kps, desc
