"""Benchmark harness: repeatability, matching correctness, homography
correctness and RMSE over synthesized illumination / viewpoint test pairs.

Ground truth for a pair is either a fisheye warp (exact point maps through
the unit sphere) or a plane homography. Detections outside the overlap masks
are filtered before any metric. Repeatability is the symmetric count of
detections that reoccur within epsilon px after mapping; matching
correctness is the inlier ratio of plain nearest-neighbour matches under the
strict d < epsilon rule; homography correctness thresholds the mean 4-corner
transfer error at epsilon (inclusive).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import features, image, warp
from .camera import FisheyeModel
from .errors import (
    DegenerateConfiguration,
    DegeneratePoint,
    EmptyDataset,
    EmptyInput,
    InsufficientMatches,
)
from .features import DescriptorSet, KeypointSet, MatchSet
from .warp import WarpField, draw_rng


@dataclass
class EvalConfig:
    epsilon: float = 3.0
    k: int = 300
    nms_size: int = 4
    resize_to: tuple | None = None  # (width, height) applied on ingest

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class GroundTruthMap:
    """Pair geometry: a fisheye warp-field pair or a plane homography."""

    kind: str  # "fisheye-warp" | "homography" | "identity"
    model: FisheyeModel | None = None
    forward: WarpField | None = None
    inverse: WarpField | None = None
    homography: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "homography":
            H = np.asarray(self.homography, dtype=float).reshape(3, 3)
            if abs(np.linalg.det(H)) <= 1e-12:
                raise ValueError("homography must be invertible")
            self.homography = H / H[2, 2]
        elif self.kind == "fisheye-warp":
            if self.model is None or self.forward is None or self.inverse is None:
                raise ValueError("fisheye-warp ground truth needs model + fields")
        elif self.kind != "identity":
            raise ValueError(f"unknown ground truth kind {self.kind!r}")

    @classmethod
    def identity(cls) -> "GroundTruthMap":
        return cls(kind="identity")


def map_points(kps: KeypointSet, gt: GroundTruthMap,
               direction: str = "forward") -> KeypointSet:
    """Transport keypoints through the ground-truth geometry.

    direction "forward" maps image-A coordinates into image B; "inverse"
    maps B back into A. Scores are preserved.
    """
    if direction not in ("forward", "inverse"):
        raise ValueError(f"unknown direction {direction!r}")
    if len(kps) == 0 or gt.kind == "identity":
        return KeypointSet(kps.xy.copy(), kps.scores.copy())
    if gt.kind == "homography":
        H = gt.homography if direction == "forward" else np.linalg.inv(gt.homography)
        ones = np.ones((len(kps), 1))
        proj = np.hstack([kps.xy, ones]) @ H.T
        wcoord = proj[:, 2]
        if np.any(np.abs(wcoord) < 1e-12):
            raise DegeneratePoint("homography sent a point to infinity")
        return KeypointSet(proj[:, :2] / wcoord[:, None], kps.scores.copy())
    transform = gt.forward.transform
    if direction == "forward":
        mapped, ok = warp.warp_point_masked(gt.model, transform, kps.xy)
    else:
        mapped, ok = warp.unwarp_point_masked(gt.model, transform, kps.xy)
    mapped = np.where(ok[:, None], mapped, np.nan)
    return KeypointSet(mapped, kps.scores.copy())


def filter_by_mask(kps: KeypointSet, mask: np.ndarray) -> KeypointSet:
    """Keep keypoints whose rounded position lies in the true mask region."""
    if len(kps) == 0:
        return kps
    h, w = mask.shape
    xi = np.rint(kps.xy[:, 0]).astype(int)
    yi = np.rint(kps.xy[:, 1]).astype(int)
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    keep = inside.copy()
    keep[inside] = mask[yi[inside], xi[inside]]
    return kps.take(np.nonzero(keep)[0])


def _count_covered(src: KeypointSet, gt: GroundTruthMap, direction: str,
                   targets: KeypointSet, epsilon: float) -> int:
    """How many mapped src points have a target neighbour within epsilon."""
    if len(src) == 0 or len(targets) == 0:
        return 0
    mapped = map_points(src, gt, direction).xy
    diff = mapped[:, None, :] - targets.xy[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    dist = np.where(np.isnan(dist), np.inf, dist)
    return int(np.count_nonzero(dist.min(axis=1) <= epsilon))


def repeatability(kps_a: KeypointSet, kps_b: KeypointSet, gt: GroundTruthMap,
                  epsilon: float = 3.0, symmetric: bool = True) -> float:
    """Fraction of detections that reoccur within epsilon after mapping.

    Symmetric form: (correct_A + correct_B) / (|A| + |B|). Returns NaN when
    both sets are empty (excluded from aggregates by the caller).
    """
    if len(kps_a) == 0 and len(kps_b) == 0:
        return math.nan
    correct_a = _count_covered(kps_a, gt, "forward", kps_b, epsilon)
    if not symmetric:
        return correct_a / len(kps_a) if len(kps_a) else math.nan
    correct_b = _count_covered(kps_b, gt, "inverse", kps_a, epsilon)
    return (correct_a + correct_b) / (len(kps_a) + len(kps_b))


def matching_correctness(matches: MatchSet, kps_a: KeypointSet,
                         kps_b: KeypointSet, gt: GroundTruthMap,
                         epsilon: float = 3.0):
    """Inlier ratio |G| / |M| under the strict residual < epsilon rule.

    Returns (m_c, residuals); m_c is NaN when there are no matches.
    Residuals are the Euclidean distances between each match's mapped
    source point and its target point, and annotate the MatchSet in place.
    """
    if len(matches) == 0:
        matches.residuals = np.zeros(0)
        matches.inliers = np.zeros(0, dtype=bool)
        return math.nan, np.zeros(0)
    src = kps_a.take(matches.idx_a)
    dst = kps_b.take(matches.idx_b)
    mapped = map_points(src, gt, "forward").xy
    residuals = np.sqrt(((mapped - dst.xy) ** 2).sum(-1))
    residuals = np.where(np.isnan(residuals), np.inf, residuals)
    inliers = residuals < epsilon
    matches.residuals = residuals
    matches.inliers = inliers
    return float(inliers.sum() / len(matches)), residuals


def rmse(residuals) -> float:
    """Root-mean-square of pooled residual distances."""
    arr = np.asarray(residuals, dtype=float).ravel()
    if arr.size == 0:
        raise EmptyInput("rmse needs at least one residual")
    return float(np.sqrt(np.mean(arr**2)))


def _dlt(pts_a: np.ndarray, pts_b: np.ndarray) -> np.ndarray:
    """Normalized direct linear transform; needs >= 4 correspondences."""

    def normalize(pts):
        mean = pts.mean(axis=0)
        scale = np.sqrt(2.0) / max(np.mean(np.linalg.norm(pts - mean, axis=1)),
                                   1e-12)
        T = np.array([[scale, 0, -scale * mean[0]],
                      [0, scale, -scale * mean[1]],
                      [0, 0, 1.0]])
        return (np.hstack([pts, np.ones((len(pts), 1))]) @ T.T)[:, :2], T

    na, Ta = normalize(pts_a)
    nb, Tb = normalize(pts_b)
    rows = []
    for (x, y), (u, v) in zip(na, nb):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    A = np.asarray(rows)
    _, s, vt = np.linalg.svd(A)
    if s[-2] < 1e-10:
        raise DegenerateConfiguration("DLT system is rank deficient")
    H = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Tb) @ H @ Ta
    if abs(H[2, 2]) < 1e-12:
        raise DegenerateConfiguration("degenerate homography (h33 ~ 0)")
    return H / H[2, 2]


def _transfer_error(H: np.ndarray, pts_a: np.ndarray,
                    pts_b: np.ndarray) -> np.ndarray:
    proj = np.hstack([pts_a, np.ones((len(pts_a), 1))]) @ H.T
    wcoord = proj[:, 2]
    bad = np.abs(wcoord) < 1e-12
    wcoord = np.where(bad, 1.0, wcoord)
    err = np.linalg.norm(proj[:, :2] / wcoord[:, None] - pts_b, axis=1)
    return np.where(bad, np.inf, err)


def estimate_homography(matches: MatchSet, kps_a: KeypointSet,
                        kps_b: KeypointSet, threshold: float = 3.0,
                        iterations: int = 2000, seed: int = 0) -> np.ndarray:
    """RANSAC around a 4-point DLT, with a final refit on the consensus set."""
    if len(matches) < 4:
        raise InsufficientMatches(f"{len(matches)} matches < 4")
    pts_a = kps_a.xy[matches.idx_a]
    pts_b = kps_b.xy[matches.idx_b]
    rng = draw_rng(seed, 0)
    n = len(matches)
    best_inliers = None
    best_count = 0
    for _ in range(iterations):
        sample = rng.choice(n, size=4, replace=False)
        sa, sb = pts_a[sample], pts_b[sample]
        # reject near-collinear minimal sets
        if _min_triangle_area(sa) < 1e-6 or _min_triangle_area(sb) < 1e-6:
            continue
        try:
            H = _dlt(sa, sb)
        except DegenerateConfiguration:
            continue
        inliers = _transfer_error(H, pts_a, pts_b) < threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
    if best_inliers is None or best_count < 4:
        raise DegenerateConfiguration("no non-degenerate RANSAC sample found")
    return _dlt(pts_a[best_inliers], pts_b[best_inliers])


def _min_triangle_area(pts: np.ndarray) -> float:
    area = np.inf
    for i in range(4):
        tri = np.delete(pts, i, axis=0)
        u, v = tri[1] - tri[0], tri[2] - tri[0]
        a = abs(u[0] * v[1] - u[1] * v[0]) / 2.0
        area = min(area, a)
    return area


def corner_error(H_est: np.ndarray, H_gt: np.ndarray, width: int,
                 height: int) -> float:
    """Mean transfer distance of the 4 image corners under both homographies."""
    corners = np.array([
        [0.0, 0.0], [width - 1.0, 0.0], [0.0, height - 1.0],
        [width - 1.0, height - 1.0],
    ])
    est = map_points(KeypointSet(corners, np.zeros(4)),
                     GroundTruthMap(kind="homography", homography=H_est)).xy
    gt = map_points(KeypointSet(corners, np.zeros(4)),
                    GroundTruthMap(kind="homography", homography=H_gt)).xy
    return float(np.mean(np.linalg.norm(est - gt, axis=1)))


def homography_correctness(H_est: np.ndarray, H_gt: np.ndarray, width: int,
                           height: int, epsilon: float = 3.0) -> bool:
    """Correct iff the mean 4-corner error is <= epsilon (inclusive)."""
    return corner_error(H_est, H_gt, width, height) <= epsilon


@dataclass
class TestPair:
    pair_id: int
    img_a: np.ndarray
    img_b: np.ndarray
    gt: GroundTruthMap
    mask_a: np.ndarray
    mask_b: np.ndarray
    condition: str  # "illumination" | "viewpoint"
    params: dict = field(default_factory=dict)


def make_testset(base_images, seed: int, mode: str, luts=None,
                 model: FisheyeModel | None = None):
    """Synthesize illumination or viewpoint test pairs from base images.

    Illumination: gamma-correct with gamma ~ U[0.1, 2]; ground truth is the
    identity and masks are all-true. Viewpoint: warp through LUT pair i mod
    len(luts); masks come from warped all-ones matrices.
    """
    imgs = list(base_images)
    if not imgs:
        raise EmptyDataset("no base images")
    if mode not in ("illumination", "viewpoint"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "viewpoint" and (not luts or model is None):
        raise EmptyDataset("viewpoint mode needs a LUT set and a model")
    pairs = []
    for i, img in enumerate(imgs):
        if mode == "illumination":
            gamma = float(draw_rng(seed, i).uniform(0.1, 2.0))
            img_b = image.gamma_correct(img, gamma)
            h, w = img.shape
            pairs.append(TestPair(
                pair_id=i, img_a=img, img_b=img_b,
                gt=GroundTruthMap.identity(),
                mask_a=np.ones((h, w), bool), mask_b=np.ones((h, w), bool),
                condition="illumination", params={"gamma": gamma},
            ))
        else:
            fwd, inv = luts[i % len(luts)]
            img_b = warp.apply_warp(img, fwd)
            mask_b = warp.valid_mask(fwd)  # region of B visible in A
            mask_a = warp.valid_mask(inv)  # region of A visible in B
            gt = GroundTruthMap(kind="fisheye-warp", model=model,
                                forward=fwd, inverse=inv)
            pairs.append(TestPair(
                pair_id=i, img_a=img, img_b=img_b, gt=gt,
                mask_a=mask_a, mask_b=mask_b, condition="viewpoint",
                params={"lut_index": i % len(luts)},
            ))
    return pairs


@dataclass
class PairResult:
    pair_id: int
    condition: str
    algorithm: str
    repeatability: float
    n_matches: int
    n_inliers: int
    m_c: float
    h_correct: bool | None
    rmse_pair: float
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class EvalReport:
    pairs: list
    aggregates: dict
    config: dict

    def to_csv(self, path, cfg: EvalConfig) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([
                "pair_id", "condition", "algorithm", "nms", "k", "epsilon",
                "repeatability", "n_matches", "n_inliers", "m_c",
                "h_correct", "rmse_pair",
            ])
            for r in self.pairs:
                writer.writerow([
                    r.pair_id, r.condition, r.algorithm, cfg.nms_size, cfg.k,
                    cfg.epsilon, _fmt(r.repeatability), r.n_matches,
                    r.n_inliers, _fmt(r.m_c),
                    "" if r.h_correct is None else int(r.h_correct),
                    _fmt(r.rmse_pair),
                ])

    def to_json(self, path) -> None:
        Path(path).write_text(
            json.dumps({"config": self.config, "aggregates": self.aggregates},
                       indent=2),
            encoding="utf-8",
        )


def _fmt(x: float) -> str:
    return "nan" if (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def _nanmean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def evaluate_pair(pair: TestPair, kps_a: KeypointSet, kps_b: KeypointSet,
                  desc_a: DescriptorSet | None, desc_b: DescriptorSet | None,
                  cfg: EvalConfig, algorithm: str = "",
                  estimate_h: bool = False, seed: int = 0) -> PairResult:
    """All per-pair metrics for already-detected keypoints.

    Keypoints are mask-filtered here; descriptors, when given, must be
    aligned with the unfiltered keypoint sets and are re-aligned after
    filtering.
    """
    keep_a = _mask_keep(kps_a, pair.mask_a)
    keep_b = _mask_keep(kps_b, pair.mask_b)
    fa = kps_a.take(np.nonzero(keep_a)[0])
    fb = kps_b.take(np.nonzero(keep_b)[0])
    rep = repeatability(fa, fb, pair.gt, cfg.epsilon)

    n_matches = n_inliers = 0
    m_c = math.nan
    residuals = np.zeros(0)
    rmse_pair = math.nan
    h_correct = None
    if desc_a is not None and desc_b is not None:
        da = DescriptorSet(desc_a.dtype, desc_a.dim, desc_a.data[keep_a])
        db = DescriptorSet(desc_b.dtype, desc_b.dim, desc_b.data[keep_b])
        matches = features.match_nn(da, db)
        n_matches = len(matches)
        if n_matches:
            m_c, residuals = matching_correctness(matches, fa, fb, pair.gt,
                                                  cfg.epsilon)
            n_inliers = int(matches.inliers.sum())
            finite = residuals[np.isfinite(residuals)]
            rmse_pair = rmse(finite) if finite.size else math.nan
        if estimate_h and pair.gt.kind in ("homography", "identity"):
            H_gt = (pair.gt.homography if pair.gt.kind == "homography"
                    else np.eye(3))
            h, w = pair.img_a.shape
            try:
                H_est = estimate_homography(matches, fa, fb, seed=seed)
                h_correct = homography_correctness(H_est, H_gt, w, h,
                                                   cfg.epsilon)
            except (InsufficientMatches, DegenerateConfiguration):
                h_correct = False
    return PairResult(
        pair_id=pair.pair_id, condition=pair.condition, algorithm=algorithm,
        repeatability=rep, n_matches=n_matches, n_inliers=n_inliers,
        m_c=m_c, h_correct=h_correct, rmse_pair=rmse_pair,
        residuals=residuals,
    )


def _mask_keep(kps: KeypointSet, mask: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    xi = np.rint(kps.xy[:, 0]).astype(int)
    yi = np.rint(kps.xy[:, 1]).astype(int)
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    keep = inside.copy()
    keep[inside] = mask[yi[inside], xi[inside]]
    return keep


def run_benchmark(testset, cfg: EvalConfig, algorithm: str = "harris",
                  detector_params: dict | None = None,
                  describe: bool = True, estimate_h: bool = False,
                  external: dict | None = None, seed: int = 0) -> EvalReport:
    """Detect (or ingest), describe, match and score every pair.

    external, when given, maps pair_id to ((kps_a, desc_a), (kps_b, desc_b))
    loaded from files; otherwise the named built-in detector plus the binary
    patch descriptor run on both images.
    """
    detector_params = detector_params or {}
    results = []
    pooled = []
    for pair in testset:
        if external is not None:
            (kps_a, desc_a), (kps_b, desc_b) = external[pair.pair_id]
        else:
            kps_a = features.detect_keypoints(pair.img_a, algorithm,
                                              cfg.nms_size, cfg.k,
                                              **detector_params)
            kps_b = features.detect_keypoints(pair.img_b, algorithm,
                                              cfg.nms_size, cfg.k,
                                              **detector_params)
            desc_a = desc_b = None
            if describe:
                kps_a, desc_a = features.describe_brief(pair.img_a, kps_a)
                kps_b, desc_b = features.describe_brief(pair.img_b, kps_b)
        result = evaluate_pair(pair, kps_a, kps_b, desc_a, desc_b, cfg,
                               algorithm=algorithm, estimate_h=estimate_h,
                               seed=seed)
        results.append(result)
        pooled.extend(result.residuals[np.isfinite(result.residuals)])
    h_vals = [r.h_correct for r in results if r.h_correct is not None]
    aggregates = {
        "n_pairs": len(results),
        "repeatability": _nanmean([r.repeatability for r in results]),
        "m_c": _nanmean([r.m_c for r in results]),
        "h_c": float(np.mean(h_vals)) if h_vals else math.nan,
        "rmse": rmse(pooled) if pooled else math.nan,
        "n_skipped_repeatability": sum(
            1 for r in results if math.isnan(r.repeatability)),
        "n_skipped_matching": sum(1 for r in results if math.isnan(r.m_c)),
    }
    config = {
        "algorithm": algorithm, "epsilon": cfg.epsilon, "k": cfg.k,
        "nms_size": cfg.nms_size,
    }
    return EvalReport(pairs=results, aggregates=aggregates, config=config)


def save_testset(pairs, out_dir, model: FisheyeModel | None = None) -> dict:
    """Persist a test set: images as PNG, masks as PGM, geometry per kind."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if model is not None:
        model.save(out / "model.json")
    entries = []
    for pair in pairs:
        stem = f"pair_{pair.pair_id:05d}"
        image.save(pair.img_a, out / f"{stem}_a.png")
        image.save(pair.img_b, out / f"{stem}_b.png")
        image.save(pair.mask_a.astype(np.uint8) * 255, out / f"{stem}_mask_a.pgm")
        image.save(pair.mask_b.astype(np.uint8) * 255, out / f"{stem}_mask_b.pgm")
        entry = {
            "pair_id": pair.pair_id,
            "condition": pair.condition,
            "kind": pair.gt.kind,
            "params": pair.params,
        }
        if pair.gt.kind == "homography":
            hpath = f"{stem}_h.txt"
            (out / hpath).write_text(
                " ".join(repr(v) for v in pair.gt.homography.ravel()),
                encoding="utf-8")
            entry["homography"] = hpath
        elif pair.gt.kind == "fisheye-warp":
            pair.gt.forward.save(out / f"{stem}_fwd.fwrp")
            pair.gt.inverse.save(out / f"{stem}_inv.fwrp")
            entry["forward"] = f"{stem}_fwd.fwrp"
            entry["inverse"] = f"{stem}_inv.fwrp"
        entries.append(entry)
    manifest = {"pairs": entries, "has_model": model is not None}
    (out / "testset_manifest.json").write_text(json.dumps(manifest, indent=2),
                                               encoding="utf-8")
    return manifest


def load_testset(dir_path):
    """Load a test set written by save_testset."""
    root = Path(dir_path)
    manifest = json.loads((root / "testset_manifest.json").read_text(
        encoding="utf-8"))
    model = None
    if manifest.get("has_model"):
        model = FisheyeModel.load(root / "model.json")
    pairs = []
    for entry in manifest["pairs"]:
        stem = f"pair_{entry['pair_id']:05d}"
        img_a = image.load(root / f"{stem}_a.png")
        img_b = image.load(root / f"{stem}_b.png")
        mask_a = image.load(root / f"{stem}_mask_a.pgm") > 127
        mask_b = image.load(root / f"{stem}_mask_b.pgm") > 127
        kind = entry["kind"]
        if kind == "homography":
            gt = GroundTruthMap(
                kind="homography",
                homography=load_hpatches_homography(root / entry["homography"]),
            )
        elif kind == "fisheye-warp":
            gt = GroundTruthMap(
                kind="fisheye-warp", model=model,
                forward=WarpField.load(root / entry["forward"]),
                inverse=WarpField.load(root / entry["inverse"]),
            )
        else:
            gt = GroundTruthMap.identity()
        pairs.append(TestPair(
            pair_id=entry["pair_id"], img_a=img_a, img_b=img_b, gt=gt,
            mask_a=mask_a, mask_b=mask_b, condition=entry["condition"],
            params=entry.get("params", {}),
        ))
    return pairs, model


def load_hpatches_homography(path) -> np.ndarray:
    """Read a 9-number whitespace-separated homography text file."""
    values = Path(path).read_text(encoding="utf-8").split()
    if len(values) != 9:
        raise EmptyInput(f"expected 9 homography entries in {path}")
    H = np.asarray([float(v) for v in values]).reshape(3, 3)
    return H / H[2, 2]
