"""Radial polynomial fisheye camera model.

The model maps a 3-D ray to an image point through the incidence angle
theta = arccos(Z / |X|): the image radius is p(theta) = a1*theta + a2*theta^2
+ ... + an*theta^n (no constant term, so the optical axis projects exactly to
the principal point). Unprojection inverts p with a monotone root solve and
returns a direction on the unit sphere; depth is unrecoverable.
"""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateInput,
    DomainError,
    FormatError,
    MonotonicityWarning,
    SingularFit,
)

_MONOTONE_SAMPLES = 1024


def _poly_eval(coeffs: np.ndarray, theta):
    """Evaluate p(theta) = sum_i a_i * theta^i (i starting at 1)."""
    full = np.concatenate(([0.0], coeffs))  # prepend the missing constant term
    return np.polynomial.polynomial.polyval(theta, full)


def _poly_deriv_eval(coeffs: np.ndarray, theta):
    deriv = coeffs * np.arange(1, len(coeffs) + 1)  # p'(t) = sum i*a_i t^(i-1)
    return np.polynomial.polynomial.polyval(theta, deriv)


@dataclass(frozen=True)
class FisheyeModel:
    """Immutable radial polynomial fisheye camera.

    coeffs are a1..an in px/rad^i, principal point (cx, cy) in px with the
    origin at the top-left pixel center, and theta_max the largest incidence
    angle (rad) the model is valid for.
    """

    coeffs: tuple
    cx: float
    cy: float
    width: int
    height: int
    theta_max: float

    def __post_init__(self):
        coeffs = tuple(float(a) for a in self.coeffs)
        object.__setattr__(self, "coeffs", coeffs)
        if len(coeffs) < 1:
            raise ValueError("need at least one polynomial coefficient")
        if coeffs[0] <= 0:
            raise ValueError(f"a1 must be positive, got {coeffs[0]}")
        if not (0.0 < self.theta_max <= np.pi):
            raise ValueError(f"theta_max must be in (0, pi], got {self.theta_max}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        thetas = np.linspace(0.0, self.theta_max, _MONOTONE_SAMPLES)
        if np.any(_poly_deriv_eval(np.asarray(coeffs), thetas) <= 0):
            raise ValueError("p(theta) must be strictly increasing on [0, theta_max]")

    @property
    def order(self) -> int:
        return len(self.coeffs)

    @property
    def r_max(self) -> float:
        """Largest representable image radius, p(theta_max)."""
        return float(_poly_eval(np.asarray(self.coeffs), self.theta_max))

    @property
    def principal_point(self) -> np.ndarray:
        return np.array([self.cx, self.cy])

    def poly(self, theta):
        return _poly_eval(np.asarray(self.coeffs), theta)

    def poly_deriv(self, theta):
        return _poly_deriv_eval(np.asarray(self.coeffs), theta)

    def digest(self) -> bytes:
        """32-byte content hash used to bind warp fields to a model."""
        payload = json.dumps(
            {
                "coeffs": list(self.coeffs),
                "cx": self.cx,
                "cy": self.cy,
                "width": self.width,
                "height": self.height,
                "theta_max": self.theta_max,
            },
            sort_keys=True,
        ).encode()
        return hashlib.sha256(payload).digest()

    def to_json(self) -> str:
        return json.dumps(
            {
                "order": self.order,
                "coeffs": list(self.coeffs),
                "cx": self.cx,
                "cy": self.cy,
                "width": self.width,
                "height": self.height,
                "theta_max": self.theta_max,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "FisheyeModel":
        try:
            obj = json.loads(text)
            coeffs = obj["coeffs"]
            if int(obj.get("order", len(coeffs))) != len(coeffs):
                raise FormatError("order field disagrees with coefficient count")
            return cls(
                coeffs=tuple(coeffs),
                cx=float(obj["cx"]),
                cy=float(obj["cy"]),
                width=int(obj["width"]),
                height=int(obj["height"]),
                theta_max=float(obj["theta_max"]),
            )
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"bad model JSON: {exc}") from exc

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "FisheyeModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def default_theta_max(coeffs, width: int, height: int) -> float:
    """Largest theta with p'(theta) > 0 and p(theta) within the image diagonal."""
    coeffs = np.asarray(coeffs, dtype=float)
    diag = float(np.hypot(width, height))
    thetas = np.linspace(1e-6, np.pi, 4096)
    ok = (_poly_deriv_eval(coeffs, thetas) > 0) & (_poly_eval(coeffs, thetas) <= diag)
    if not ok[0]:
        raise ValueError("polynomial is not increasing near theta = 0")
    bad = np.flatnonzero(~ok)
    return float(thetas[-1] if bad.size == 0 else thetas[bad[0] - 1])


def make_model(coeffs, width: int, height: int, cx=None, cy=None,
               theta_max=None) -> FisheyeModel:
    """Build a model with the centered principal point and auto theta_max."""
    if cx is None:
        cx = (width - 1) / 2.0
    if cy is None:
        cy = (height - 1) / 2.0
    if theta_max is None:
        theta_max = default_theta_max(coeffs, width, height)
    return FisheyeModel(tuple(coeffs), float(cx), float(cy), int(width),
                        int(height), float(theta_max))


def equidistant_model(width: int, height: int, fov_deg: float = 180.0) -> FisheyeModel:
    """Equidistant (r = a1*theta) model whose image circle spans the diagonal."""
    theta_max = np.deg2rad(fov_deg) / 2.0
    a1 = np.hypot(width, height) / 2.0 / theta_max
    return make_model([a1], width, height, theta_max=theta_max)


def project(model: FisheyeModel, points) -> np.ndarray:
    """Project rays (..., 3) to pixel coordinates (..., 2).

    Magnitude invariant: project(lam * X) == project(X) for lam > 0.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    norm = np.linalg.norm(pts, axis=-1)
    if np.any(norm == 0):
        raise DegenerateInput("cannot project the zero vector")
    z = np.clip(pts[..., 2] / norm, -1.0, 1.0)
    theta = np.arccos(z)
    if np.any(theta > model.theta_max + 1e-12):
        raise DomainError(
            f"incidence angle {theta.max():.6f} exceeds theta_max {model.theta_max:.6f}"
        )
    d = np.hypot(pts[..., 0], pts[..., 1])
    radius = model.poly(theta)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(d > 0, radius / np.where(d > 0, d, 1.0), 0.0)
    uv = np.stack(
        [model.cx + scale * pts[..., 0], model.cy + scale * pts[..., 1]], axis=-1
    )
    return uv[0] if single else uv


def solve_theta(model: FisheyeModel, radius) -> np.ndarray:
    """Invert p(theta) = r on [0, theta_max] for each radius.

    Newton seeded at r / a1 with a bisection fallback; p is strictly
    increasing on the interval so the root is unique.
    """
    r = np.atleast_1d(np.asarray(radius, dtype=float))
    if np.any(r < 0):
        raise DomainError("radius must be non-negative")
    if np.any(r > model.r_max + 1e-9):
        raise DomainError(
            f"radius {r.max():.4f} exceeds p(theta_max) = {model.r_max:.4f}"
        )
    theta = np.clip(r / model.coeffs[0], 0.0, model.theta_max)
    lo = np.zeros_like(r)
    hi = np.full_like(r, model.theta_max)
    for _ in range(100):
        f = model.poly(theta) - r
        # shrink the bracket with the current sign
        lo = np.where(f < 0, theta, lo)
        hi = np.where(f > 0, theta, hi)
        df = model.poly_deriv(theta)
        step = f / df
        nxt = theta - step
        # fall back to bisection when Newton leaves the bracket
        outside = (nxt <= lo) | (nxt >= hi)
        nxt = np.where(outside, 0.5 * (lo + hi), nxt)
        done = np.abs(nxt - theta) < 1e-12
        theta = nxt
        if np.all(done):
            break
    return np.clip(theta, 0.0, model.theta_max)


def unproject(model: FisheyeModel, pixels) -> np.ndarray:
    """Map pixels (..., 2) back to unit directions (..., 3) on the sphere."""
    px = np.asarray(pixels, dtype=float)
    single = px.ndim == 1
    px = np.atleast_2d(px)
    dx = px[..., 0] - model.cx
    dy = px[..., 1] - model.cy
    r = np.hypot(dx, dy)
    theta = solve_theta(model, r.ravel()).reshape(r.shape)
    with np.errstate(invalid="ignore", divide="ignore"):
        inv_r = np.where(r > 0, 1.0 / np.where(r > 0, r, 1.0), 0.0)
    s = np.sin(theta) * inv_r
    out = np.stack([s * dx, s * dy, np.cos(theta)], axis=-1)
    return out[0] if single else out


def project_masked(model: FisheyeModel, points):
    """Vectorized project that flags out-of-domain rays instead of raising.

    Returns (uv, valid); uv rows are NaN where invalid.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    norm = np.linalg.norm(pts, axis=-1)
    valid = norm > 0
    safe_norm = np.where(valid, norm, 1.0)
    z = np.clip(pts[..., 2] / safe_norm, -1.0, 1.0)
    theta = np.arccos(z)
    valid &= theta <= model.theta_max + 1e-12
    d = np.hypot(pts[..., 0], pts[..., 1])
    radius = model.poly(np.where(valid, theta, 0.0))
    scale = np.where(d > 0, radius / np.where(d > 0, d, 1.0), 0.0)
    uv = np.stack(
        [model.cx + scale * pts[..., 0], model.cy + scale * pts[..., 1]], axis=-1
    )
    uv = np.where(valid[..., None], uv, np.nan)
    return uv, valid


def unproject_masked(model: FisheyeModel, pixels):
    """Vectorized unproject that flags radii beyond p(theta_max).

    Returns (dirs, valid); dirs rows are NaN where invalid.
    """
    px = np.atleast_2d(np.asarray(pixels, dtype=float))
    dx = px[..., 0] - model.cx
    dy = px[..., 1] - model.cy
    r = np.hypot(dx, dy)
    valid = r <= model.r_max + 1e-9
    theta = solve_theta(model, np.where(valid, r, 0.0).ravel()).reshape(r.shape)
    inv_r = np.where(r > 0, 1.0 / np.where(r > 0, r, 1.0), 0.0)
    s = np.sin(theta) * inv_r
    dirs = np.stack([s * dx, s * dy, np.cos(theta)], axis=-1)
    dirs = np.where(valid[..., None], dirs, np.nan)
    return dirs, valid


@dataclass
class FitResult:
    coeffs: np.ndarray
    rms_residual: float


def fit_polynomial(samples, order: int) -> FitResult:
    """Least-squares fit of a1..a_order to (theta, radius) samples.

    Solves over the monomial basis theta, theta^2, ..., theta^order with
    per-column scaling; the basis has no constant term so p(0) = 0 is exact.
    """
    arr = np.asarray(samples, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("samples must be an (n, 2) array of (theta, radius)")
    theta, radius = arr[:, 0], arr[:, 1]
    distinct = np.unique(theta[theta > 0])
    if distinct.size < order:
        raise SingularFit(
            f"{distinct.size} distinct positive-theta samples < order {order}"
        )
    basis = theta[:, None] ** np.arange(1, order + 1)[None, :]
    col_scale = np.linalg.norm(basis, axis=0)
    if np.any(col_scale == 0):
        raise SingularFit("zero column in the monomial basis")
    scaled = basis / col_scale
    coeffs, _, rank, _ = np.linalg.lstsq(scaled, radius, rcond=None)
    if rank < order:
        raise SingularFit(f"normal system rank {rank} < order {order}")
    coeffs = coeffs / col_scale
    residual = basis @ coeffs - radius
    rms = float(np.sqrt(np.mean(residual**2)))
    probe = np.linspace(1e-9, theta.max(), _MONOTONE_SAMPLES)
    if np.any(_poly_deriv_eval(coeffs, probe) <= 0):
        warnings.warn(
            "fitted polynomial is not increasing on the sample range",
            MonotonicityWarning,
            stacklevel=2,
        )
    return FitResult(coeffs=coeffs, rms_residual=rms)


def read_remap_table(path):
    """Read a vendor distorted->undistorted remap table CSV."""
    rows = []
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != [
                "u_dist", "v_dist", "u_undist", "v_undist",
            ]:
                raise FormatError(f"bad remap table header in {path}: {header}")
            for line in reader:
                if not line:
                    continue
                if len(line) != 4:
                    raise FormatError(f"bad remap table row: {line}")
                rows.append([float(x) for x in line])
    except ValueError as exc:
        raise FormatError(f"non-numeric remap table entry: {exc}") from exc
    if not rows:
        raise FormatError(f"remap table {path} has no data rows")
    return np.asarray(rows, dtype=float)


def fit_from_remap_table(table, pp, pinhole_f: float, order: int = 4,
                         width=None, height=None) -> tuple:
    """Fit a FisheyeModel from a distorted->undistorted lookup table.

    Each row (u_dist, v_dist, u_undist, v_undist) yields one (theta, r)
    sample: theta from the pinhole ray arctangent at focal length pinhole_f,
    r from the distorted pixel's distance to the principal point. Returns
    (model, fit_result).
    """
    table = np.asarray(table, dtype=float)
    if table.ndim != 2 or table.shape[1] != 4:
        raise FormatError("remap table must have four columns")
    if table.shape[0] == 0:
        raise FormatError("remap table is empty")
    if pinhole_f <= 0:
        raise ValueError("pinhole focal length must be positive")
    cx, cy = float(pp[0]), float(pp[1])
    r_dist = np.hypot(table[:, 0] - cx, table[:, 1] - cy)
    r_undist = np.hypot(table[:, 2] - cx, table[:, 3] - cy)
    theta = np.arctan2(r_undist, pinhole_f)
    fit = fit_polynomial(np.column_stack([theta, r_dist]), order)
    if width is None:
        width = int(np.ceil(table[:, 0].max())) + 1
    if height is None:
        height = int(np.ceil(table[:, 1].max())) + 1
    theta_max = default_theta_max(fit.coeffs, width, height)
    theta_max = min(theta_max, float(theta.max()))
    model = FisheyeModel(tuple(fit.coeffs), cx, cy, width, height, theta_max)
    return model, fit
