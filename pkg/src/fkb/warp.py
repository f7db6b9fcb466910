"""Fisheye warping through the unit sphere.

A warp moves a virtual camera by a 6-DOF rigid transform (R, t): each pixel
is unprojected to the unit sphere, moved by X -> R X + t, and reprojected.
The warp is applied to images by baking, for every destination pixel, the
sub-pixel source coordinate under the inverse point map into a look-up table
(WarpField), then resampling with bilinear interpolation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import camera
from .camera import FisheyeModel
from .errors import DimensionMismatch, FormatError, OutOfDomain, RangeError

FIELD_MAGIC = b"FWRP"
FIELD_VERSION = 1


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=float)


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=float)


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=float)


def rotation_from_euler_deg(rx: float, ry: float, rz: float) -> np.ndarray:
    """Extrinsic X-then-Y-then-Z rotation: R = Rz(rz) @ Ry(ry) @ Rx(rx)."""
    return _rot_z(np.deg2rad(rz)) @ _rot_y(np.deg2rad(ry)) @ _rot_x(np.deg2rad(rx))


@dataclass(frozen=True)
class RigidTransform:
    """Virtual camera move: rotation plus a translation inside the unit sphere."""

    rotation: np.ndarray
    translation: np.ndarray
    euler_deg: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-9 or np.linalg.det(rot) < 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        if np.linalg.norm(trans) >= 1.0:
            raise RangeError("|t| must be < 1 for the inverse map to exist")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_euler_deg(cls, rx, ry, rz, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rotation_from_euler_deg(rx, ry, rz), np.asarray(t, float),
                   euler_deg=(float(rx), float(ry), float(rz)))

    def inverse_params(self):
        """(R, t) such that the inverse point map uses R^-1 (x - t)."""
        return self.rotation.T, self.translation


def draw_rng(seed: int, draw_index: int) -> np.random.Generator:
    """Counter-based generator; stream i is Philox keyed by (seed, i)."""
    key = np.array([seed, draw_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_transform(rng_seed: int, rot_range_deg: float = 30.0,
                     trans_range: float = 0.3, draw_index: int = 0) -> RigidTransform:
    """Draw rx, ry, rz ~ U[-rot, rot] deg and tx, ty, tz ~ U[-trans, trans].

    Deterministic for a fixed (seed, draw_index) pair.
    """
    if rot_range_deg < 0 or trans_range < 0:
        raise RangeError("sampling ranges must be non-negative")
    if trans_range * np.sqrt(3.0) >= 1.0:
        raise RangeError(
            f"trans_range {trans_range} allows |t| >= 1 (worst case "
            f"{trans_range * np.sqrt(3.0):.4f})"
        )
    rng = draw_rng(rng_seed, draw_index)
    rx, ry, rz = rng.uniform(-rot_range_deg, rot_range_deg, 3)
    t = rng.uniform(-trans_range, trans_range, 3)
    return RigidTransform.from_euler_deg(rx, ry, rz, t)


def warp_point(model: FisheyeModel, transform: RigidTransform, points) -> np.ndarray:
    """Forward point map: project(R * unproject(p) + t)."""
    uv, valid = warp_point_masked(model, transform, points)
    if not np.all(valid):
        raise OutOfDomain("point left the modeled field of view")
    return uv if np.asarray(points).ndim > 1 else uv[0]


def warp_point_masked(model: FisheyeModel, transform: RigidTransform, points):
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    dirs, v1 = camera.unproject_masked(model, pts)
    moved = np.where(v1[..., None], dirs, [0.0, 0.0, 1.0]) @ transform.rotation.T
    moved = moved + transform.translation
    uv, v2 = camera.project_masked(model, moved)
    return uv, v1 & v2


def unwarp_point(model: FisheyeModel, transform: RigidTransform, points) -> np.ndarray:
    """Exact inverse of warp_point.

    Unprojection of a warped pixel gives a unit direction Yv; the pre-image
    on the sphere is mu*Yv - t with mu the positive root of
    mu^2 - 2 mu (Yv . t) + (|t|^2 - 1) = 0, then rotate back and project.
    """
    uv, valid = unwarp_point_masked(model, transform, points)
    if not np.all(valid):
        raise OutOfDomain("point left the modeled field of view")
    return uv if np.asarray(points).ndim > 1 else uv[0]


def unwarp_point_masked(model: FisheyeModel, transform: RigidTransform, points):
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    dirs, v1 = camera.unproject_masked(model, pts)
    dirs = np.where(v1[..., None], dirs, [0.0, 0.0, 1.0])
    t = transform.translation
    b = dirs @ t
    # discriminant b^2 - (|t|^2 - 1) is positive whenever |t| < 1
    mu = b + np.sqrt(b * b - (t @ t - 1.0))
    pre = mu[..., None] * dirs - t
    pre = pre @ transform.rotation  # right-multiply by R equals R^T @ x
    uv, v2 = camera.project_masked(model, pre)
    return uv, v1 & v2


@dataclass(frozen=True)
class WarpField:
    """Per-destination-pixel source coordinates with a validity mask."""

    src: np.ndarray  # (h, w, 2) float32, (u, v) source coordinates
    valid: np.ndarray  # (h, w) bool
    transform: RigidTransform
    model_hash: bytes

    @property
    def width(self) -> int:
        return self.src.shape[1]

    @property
    def height(self) -> int:
        return self.src.shape[0]

    def __post_init__(self):
        if self.src.ndim != 3 or self.src.shape[2] != 2:
            raise ValueError("src must be (h, w, 2)")
        if self.valid.shape != self.src.shape[:2]:
            raise ValueError("valid mask shape mismatch")
        if len(self.model_hash) != 32:
            raise ValueError("model hash must be 32 bytes")

    def to_bytes(self) -> bytes:
        header = FIELD_MAGIC + struct.pack(
            "<HII", FIELD_VERSION, self.width, self.height
        )
        header += self.transform.rotation.astype("<f8").tobytes()
        header += self.transform.translation.astype("<f8").tobytes()
        header += self.model_hash
        payload = self.src.astype("<f4").tobytes()
        bitmap = np.packbits(self.valid.ravel().astype(np.uint8)).tobytes()
        return header + payload + bitmap

    @classmethod
    def from_bytes(cls, blob: bytes) -> "WarpField":
        if blob[:4] != FIELD_MAGIC:
            raise FormatError("bad warp field magic")
        version, width, height = struct.unpack_from("<HII", blob, 4)
        if version != FIELD_VERSION:
            raise FormatError(f"unsupported warp field version {version}")
        off = 14
        rot = np.frombuffer(blob, "<f8", 9, off).reshape(3, 3).copy()
        off += 72
        trans = np.frombuffer(blob, "<f8", 3, off).copy()
        off += 24
        model_hash = blob[off:off + 32]
        off += 32
        n = width * height
        src = np.frombuffer(blob, "<f4", n * 2, off).reshape(height, width, 2).copy()
        off += n * 8
        nbytes = (n + 7) // 8
        bits = np.frombuffer(blob, np.uint8, nbytes, off)
        valid = np.unpackbits(bits)[:n].reshape(height, width).astype(bool)
        return cls(src=src, valid=valid,
                   transform=RigidTransform(rot, trans), model_hash=model_hash)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "WarpField":
        return cls.from_bytes(Path(path).read_bytes())


def bake_warp_field(model: FisheyeModel, transform: RigidTransform,
                    direction: str = "forward") -> WarpField:
    """Bake per-destination source coordinates for one warp direction.

    direction="forward" renders the warped image: each warped pixel samples
    the original at unwarp_point. direction="inverse" renders the unwarped
    image: each pixel samples the warped image at warp_point. Pixels whose
    source leaves the projection domain or the image bounds are invalid.
    """
    if direction not in ("forward", "inverse"):
        raise ValueError(f"unknown direction {direction!r}")
    h, w = model.height, model.width
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    dest = np.stack([uu.ravel(), vv.ravel()], axis=-1)
    if direction == "forward":
        src, valid = unwarp_point_masked(model, transform, dest)
    else:
        src, valid = warp_point_masked(model, transform, dest)
    src = src.reshape(h, w, 2)
    valid = valid.reshape(h, w)
    # snap near-integer coordinates so identity fields resample bit-exactly
    snapped = np.rint(src)
    src = np.where(np.abs(src - snapped) < 1e-5, snapped, src)
    tol = 1e-3  # keep border pixels whose source is in-bounds up to float fuzz
    inside = (
        (src[..., 0] >= -tol) & (src[..., 0] <= w - 1 + tol)
        & (src[..., 1] >= -tol) & (src[..., 1] <= h - 1 + tol)
    )
    valid = valid & np.where(np.isfinite(src).all(axis=-1), inside, False)
    src = np.where(valid[..., None],
                   np.clip(src, 0.0, [w - 1.0, h - 1.0]), 0.0).astype(np.float32)
    return WarpField(src=src, valid=valid, transform=transform,
                     model_hash=model.digest())


def bake_field_pair(model: FisheyeModel, transform: RigidTransform):
    """(forward, inverse) WarpField pair for one transform."""
    return (
        bake_warp_field(model, transform, "forward"),
        bake_warp_field(model, transform, "inverse"),
    )


def bake_lut_set(model: FisheyeModel, count: int, seed: int,
                 rot_range_deg: float = 30.0, trans_range: float = 0.3):
    """Bake `count` deterministic (forward, inverse) field pairs."""
    if count < 1:
        raise RangeError("count must be >= 1")
    pairs = []
    for i in range(count):
        transform = sample_transform(seed, rot_range_deg, trans_range, draw_index=i)
        pairs.append(bake_field_pair(model, transform))
    return pairs


def bilinear_sample(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear lookup at sub-pixel (u, v); coordinates must be in bounds."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    u0 = np.clip(np.floor(u).astype(int), 0, w - 1)
    v0 = np.clip(np.floor(v).astype(int), 0, h - 1)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = u - u0
    fv = v - v0
    top = img[v0, u0] * (1 - fu) + img[v0, u1] * fu
    bot = img[v1, u0] * (1 - fu) + img[v1, u1] * fu
    return top * (1 - fv) + bot * fv


def apply_warp(img: np.ndarray, field: WarpField) -> np.ndarray:
    """Resample img through the field; invalid destination pixels become 0."""
    img = np.asarray(img)
    if img.shape != (field.height, field.width):
        raise DimensionMismatch(
            f"image {img.shape} does not match field "
            f"({field.height}, {field.width})"
        )
    out = bilinear_sample(img, field.src[..., 0].astype(np.float64),
                          field.src[..., 1].astype(np.float64))
    out[~field.valid] = 0.0
    if img.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out.astype(img.dtype)


def valid_mask(field: WarpField) -> np.ndarray:
    """Overlap mask: warp an all-ones image and threshold at 0.999.

    Matches the field's validity bitmap up to a 1-px erosion where bilinear
    sampling straddles the boundary.
    """
    ones = np.ones((field.height, field.width), dtype=np.float64)
    return apply_warp(ones, field) > 0.999


def warp_mask(mask: np.ndarray, field: WarpField) -> np.ndarray:
    """Transport a boolean mask through the field (conservative threshold)."""
    warped = apply_warp(mask.astype(np.float64), field)
    return warped > 0.999


@dataclass
class LutSetManifest:
    seed: int
    count: int
    rot_range_deg: float
    trans_range: float
    files: list

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "count": self.count,
                "rot_range_deg": self.rot_range_deg,
                "trans_range": self.trans_range,
                "files": self.files,
            },
            indent=2,
        )


def save_lut_set(pairs, out_dir, seed: int, rot_range_deg: float,
                 trans_range: float) -> LutSetManifest:
    """Write field pairs as fwd/inv binary files plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, (fwd, inv) in enumerate(pairs):
        fwd_name = f"lut_{i:05d}_fwd.fwrp"
        inv_name = f"lut_{i:05d}_inv.fwrp"
        fwd.save(out / fwd_name)
        inv.save(out / inv_name)
        files.append({"index": i, "forward": fwd_name, "inverse": inv_name})
    manifest = LutSetManifest(seed=seed, count=len(pairs),
                              rot_range_deg=rot_range_deg,
                              trans_range=trans_range, files=files)
    (out / "lut_manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return manifest


def load_lut_set(dir_path):
    """Load (forward, inverse) pairs listed in a LUT-set manifest."""
    root = Path(dir_path)
    manifest_path = root / "lut_manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"no lut_manifest.json in {dir_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    pairs = []
    for entry in manifest["files"]:
        fwd = WarpField.load(root / entry["forward"])
        inv = WarpField.load(root / entry["inverse"])
        pairs.append((fwd, inv))
    return pairs, manifest
