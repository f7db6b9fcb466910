"""Keypoint superset generation by aggregating detections over random warps.

Each of n_warps precomputed warps is applied to the image; the base detector
runs on the warped view and its detections are mapped back into the original
frame with the exact inverse point map. Votes accumulate per pixel and are
normalized by how many warps actually covered that pixel, so periphery
regions cropped by aggressive warps are not penalized. The superset is the
set of vote peaks whose normalized support clears a majority-style threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import features, image, warp
from .camera import FisheyeModel
from .errors import DimensionMismatch, EmptyLutSet
from .features import KeypointSet


@dataclass
class AdaptationConfig:
    n_warps: int = 100
    include_identity: bool = True
    accumulation: str = "point-vote"  # or "heatmap"
    vote_radius: int = 1
    superset_threshold: float = 0.5
    nms_size: int = 4
    k: int = 300
    base_algo: str = "harris"
    detector_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_warps < 1:
            raise ValueError("n_warps must be >= 1")
        if self.vote_radius < 0:
            raise ValueError("vote_radius must be >= 0")
        if self.accumulation not in ("point-vote", "heatmap"):
            raise ValueError(f"unknown accumulation {self.accumulation!r}")


@dataclass
class AccumulatorMap:
    """Per-pixel vote mass plus how many warps covered each pixel."""

    votes: np.ndarray  # (h, w) float32
    coverage: np.ndarray  # (h, w) uint16

    @property
    def normalized(self) -> np.ndarray:
        cov = np.maximum(self.coverage.astype(np.float64), 1.0)
        return self.votes.astype(np.float64) / cov


def _splat(votes: np.ndarray, pts: np.ndarray, weights=None) -> None:
    """Bilinear vote deposition at sub-pixel locations."""
    h, w = votes.shape
    if len(pts) == 0:
        return
    if weights is None:
        weights = np.ones(len(pts))
    x, y = pts[:, 0], pts[:, 1]
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    fx, fy = x - x0, y - y0
    for dx, dy, wt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (1, 0, fx * (1 - fy)),
        (0, 1, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xi = x0 + dx
        yi = y0 + dy
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & (wt > 0)
        np.add.at(votes, (yi[ok], xi[ok]), (weights * wt)[ok])


def _eroded(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return mask
    from scipy import ndimage

    structure = np.ones((2 * radius + 1, 2 * radius + 1), bool)
    return ndimage.binary_erosion(mask, structure=structure, border_value=1)


# detections this close to the valid/invalid boundary are discarded: the
# black fill outside the warp domain creates spurious gradient corners there
_BOUNDARY_GUARD = 3


def adapt_image(img: np.ndarray, model: FisheyeModel, luts,
                cfg: AdaptationConfig):
    """Accumulate base-detector responses over warps of one image.

    luts is a list of (forward, inverse) WarpField pairs; the first
    cfg.n_warps entries are used. Returns (AccumulatorMap, superset).
    """
    if not luts and not cfg.include_identity:
        raise EmptyLutSet("no warp fields and identity pass disabled")
    if img.shape != (model.height, model.width):
        raise DimensionMismatch(
            f"image {img.shape} vs model ({model.height}, {model.width})"
        )
    if luts and len(luts) < cfg.n_warps:
        raise EmptyLutSet(
            f"LUT set has {len(luts)} pairs but n_warps = {cfg.n_warps}"
        )
    h, w = img.shape
    votes = np.zeros((h, w), dtype=np.float64)
    coverage = np.zeros((h, w), dtype=np.uint32)

    passes = []
    if cfg.include_identity:
        passes.append(None)
    passes.extend(luts[: cfg.n_warps] if luts else [])

    for pair in passes:
        if pair is None:
            warped = img
            fwd = inv = None
        else:
            fwd, inv = pair
            if fwd.model_hash != model.digest():
                raise DimensionMismatch("warp field was baked for another model")
            warped = warp.apply_warp(img, fwd)
        if cfg.accumulation == "heatmap":
            resp = features.detector_response(warped, cfg.base_algo,
                                              **cfg.detector_params)
            if pair is None:
                votes += np.maximum(resp, 0.0)
                coverage += 1
            else:
                back = warp.apply_warp(resp.astype(np.float64), inv)
                votes += np.maximum(back, 0.0) * inv.valid
                coverage += inv.valid
            continue
        dets = features.detect_keypoints(warped, cfg.base_algo, cfg.nms_size,
                                         cfg.k, **cfg.detector_params)
        if pair is None:
            _splat(votes, dets.xy)
            coverage += 1
            continue
        guard = _eroded(fwd.valid, _BOUNDARY_GUARD)
        xi = np.clip(np.rint(dets.xy[:, 0]).astype(int), 0, w - 1)
        yi = np.clip(np.rint(dets.xy[:, 1]).astype(int), 0, h - 1)
        keep = guard[yi, xi]
        pts = dets.xy[keep]
        if len(pts):
            back, ok = warp.unwarp_point_masked(model, fwd.transform, pts)
            inb = ok & (back[:, 0] >= 0) & (back[:, 0] <= w - 1) \
                & (back[:, 1] >= 0) & (back[:, 1] <= h - 1)
            _splat(votes, back[inb])
        coverage += inv.valid

    acc = AccumulatorMap(votes=votes.astype(np.float32),
                         coverage=np.minimum(coverage, 65535).astype(np.uint16))
    superset = extract_superset(acc, cfg)
    return acc, superset


def extract_superset(acc: AccumulatorMap, cfg: AdaptationConfig) -> KeypointSet:
    """Peaks of the vote map whose normalized support clears the threshold.

    Vote mass belonging to one physical point scatters over neighbouring
    pixels (sub-pixel jitter across warps), so each local peak gathers the
    mass inside its vote_radius window before thresholding; the reported
    location is the vote-weighted centroid of that window.
    """
    if cfg.accumulation == "heatmap":
        return features.nms_topk(acc.normalized, cfg.nms_size, cfg.k,
                                 threshold=cfg.superset_threshold)
    votes = acc.votes.astype(np.float64)
    h, w = votes.shape
    peaks = features.nms_map(votes, max(1, cfg.vote_radius), threshold=1e-9)
    if len(peaks) == 0:
        return KeypointSet.empty()
    r = cfg.vote_radius
    cov = np.maximum(acc.coverage.astype(np.float64), 1.0)
    xs, ys, scores = [], [], []
    for (px, py) in peaks.xy:
        xi, yi = int(px), int(py)
        y0, y1 = max(0, yi - r), min(h, yi + r + 1)
        x0, x1 = max(0, xi - r), min(w, xi + r + 1)
        window = votes[y0:y1, x0:x1]
        mass = window.sum()
        score = mass / cov[yi, xi]
        if score < cfg.superset_threshold:
            continue
        gy, gx = np.mgrid[y0:y1, x0:x1]
        xs.append(float((gx * window).sum() / mass))
        ys.append(float((gy * window).sum() / mass))
        scores.append(float(score))
    if not xs:
        return KeypointSet.empty()
    kps = KeypointSet(np.column_stack([xs, ys]), np.asarray(scores))
    return features.nms_topk(kps, cfg.nms_size, cfg.k)


def export_labels(superset: KeypointSet, path) -> None:
    """Write a superset as a keypoint CSV label file."""
    superset.save_csv(path)


def adapt_corpus(image_paths, model: FisheyeModel, luts,
                 cfg: AdaptationConfig, out_dir, seed=None):
    """Run adaptation over a corpus; one label CSV per image plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = []
    for path in image_paths:
        img = image.load(path)
        if img.shape != (model.height, model.width):
            img = image.resize_bilinear(img, model.width, model.height)
        _, superset = adapt_image(img, model, luts, cfg)
        label_name = Path(path).stem + "_labels.csv"
        export_labels(superset, out / label_name)
        labels.append({"image": str(path), "labels": label_name,
                       "n_points": len(superset)})
    manifest = {
        "seed": seed,
        "n_warps": cfg.n_warps,
        "include_identity": cfg.include_identity,
        "accumulation": cfg.accumulation,
        "vote_radius": cfg.vote_radius,
        "superset_threshold": cfg.superset_threshold,
        "nms_size": cfg.nms_size,
        "k": cfg.k,
        "detector": cfg.base_algo,
        "detector_params": cfg.detector_params,
        "images": labels,
    }
    (out / "adapt_manifest.json").write_text(
        json.dumps(manifest, indent=2), encoding="utf-8")
    return manifest
