"""Parametric heart phantoms, contour rasterisation and a pseudo-ultrasound renderer.

The phantom is built in a body frame whose +x axis runs from the LV apex
towards the base.  The LV is the half ellipsoid ``x <= 0``; the LA is an
ellipsoid sitting on the base plane (``x > 0``); the myocardium is the set of
voxels within ``myo_thickness`` of the LV that are neither LV nor LA.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .postproc import ConeSpec, cone_geometry, make_cone_mask
from .volume import BACKGROUND, LA, LV, MYO, NUM_CLASSES, LabelVolume, Volume, spacing_for

STRUCTURE_PRIORITY = (MYO, LA, LV)  # painted in this order, later wins


@dataclass
class HeartPhantomParams:
    lv_semi_axes: tuple = (30.0, 18.0, 14.0)
    myo_thickness: float = 8.0
    la_semi_axes: tuple = (15.0, 14.0, 12.0)
    la_offset: tuple = (0.0, 0.0, 0.0)
    rotation: tuple = (0.0, 0.0, 0.0)
    translation: tuple = (6.0, 0.0, 0.0)
    seed: int = 0

    def validate(self, spacing) -> None:
        for name in ("lv_semi_axes", "la_semi_axes"):
            if min(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.myo_thickness < max(spacing):
            raise ValueError(f"myo_thickness {self.myo_thickness} mm is thinner than one voxel "
                             f"(max spacing {max(spacing)} mm)")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "HeartPhantomParams":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def sample_phantom_params(seed: int) -> HeartPhantomParams:
    """Draw a plausible anatomy/pose around the defaults, deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    base = HeartPhantomParams()
    jitter = lambda v, rel: tuple(float(x * (1 + rng.uniform(-rel, rel))) for x in v)  # noqa: E731
    return HeartPhantomParams(
        lv_semi_axes=jitter(base.lv_semi_axes, 0.12),
        myo_thickness=float(base.myo_thickness * (1 + rng.uniform(-0.1, 0.1))),
        la_semi_axes=jitter(base.la_semi_axes, 0.12),
        la_offset=(0.0, float(rng.uniform(-3, 3)), float(rng.uniform(-2, 2))),
        rotation=tuple(float(v) for v in rng.uniform(-0.15, 0.15, 3)),
        translation=(base.translation[0] + float(rng.uniform(-3, 3)), float(rng.uniform(-4, 4)),
                     float(rng.uniform(-3, 3))),
        seed=int(seed),
    )


def rotation_matrix(angles) -> np.ndarray:
    """R = Rz @ Ry @ Rx for angles (rx, ry, rz) in radians."""
    rx, ry, rz = angles
    cx, sx, cy, sy, cz, sz = np.cos(rx), np.sin(rx), np.cos(ry), np.sin(ry), np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def _body_coords(dims, spacing, params: HeartPhantomParams):
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    w = [(g - (n - 1) / 2.0) * s - t for g, n, s, t in zip(grids, dims, spacing, params.translation)]
    R = rotation_matrix(params.rotation)
    # body = R^T w, written out so that mirrored inputs give exactly mirrored outputs
    return [R[0, i] * w[0] + R[1, i] * w[1] + R[2, i] * w[2] for i in range(3)]


def _ball_footprint(radius_mm: float, spacing) -> np.ndarray:
    half = [int(np.floor(radius_mm / s)) for s in spacing]
    g = np.meshgrid(*[np.arange(-h, h + 1) * s for h, s in zip(half, spacing)], indexing="ij")
    return (g[0] ** 2 + g[1] ** 2 + g[2] ** 2) <= radius_mm ** 2 + 1e-9


def generate_phantom_labels(params: HeartPhantomParams, dims=(64, 64, 16), spacing=None) -> LabelVolume:
    dims = tuple(int(n) for n in dims)
    spacing = tuple(spacing) if spacing is not None else spacing_for(dims)
    params.validate(spacing)
    bx, by, bz = _body_coords(dims, spacing, params)
    a, b, c = params.lv_semi_axes
    lv = (bx <= 0) & ((bx / a) ** 2 + (by / b) ** 2 + (bz / c) ** 2 <= 1.0)
    la_a, la_b, la_c = params.la_semi_axes
    ox, oy, oz = params.la_offset
    la = (bx > 0) & (((bx - la_a - ox) / la_a) ** 2 + ((by - oy) / la_b) ** 2 + ((bz - oz) / la_c) ** 2 <= 1.0)
    la &= ~lv
    shell = ndimage.binary_dilation(lv, structure=_ball_footprint(params.myo_thickness, spacing))
    myo = shell & ~lv & ~la

    classes = np.zeros(dims, dtype=np.uint8)
    for cid, mask in ((MYO, myo), (LA, la), (LV, lv)):
        classes[mask] = cid
    for cid, name in ((LV, "LV"), (LA, "LA"), (MYO, "MYO")):
        m = classes == cid
        if not m.any():
            raise ValueError(f"{name} is empty at this resolution")
        faces = (m[0].any() or m[-1].any() or m[:, 0].any() or m[:, -1].any()
                 or m[:, :, 0].any() or m[:, :, -1].any())
        if faces:
            raise ValueError(f"phantom exceeds the volume bounds: {name} is clipped")
    return LabelVolume(classes, spacing)


# ---------------------------------------------------------------------------
# contours
# ---------------------------------------------------------------------------


@dataclass
class Contour:
    slice: int
    class_id: int
    points: np.ndarray  # (M, 2) in-plane voxel coordinates (x, y)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(pts) > 1 and np.allclose(pts[0], pts[-1]):
            pts = pts[:-1]
        if len(pts) < 3:
            raise ValueError("a contour needs at least 3 distinct points")
        if self.class_id not in (LV, LA, MYO):
            raise ValueError(f"contour class must be LV, LA or MYO, got {self.class_id}")
        self.points = pts


@dataclass
class ContourSet:
    contours: list = field(default_factory=list)

    def to_json(self) -> str:
        recs = [{"slice": int(c.slice), "class": int(c.class_id), "points": c.points.tolist()}
                for c in self.contours]
        return json.dumps({"contours": recs})

    @classmethod
    def from_json(cls, text: str) -> "ContourSet":
        doc = json.loads(text)
        recs = doc["contours"] if isinstance(doc, dict) else doc
        return cls([Contour(int(r["slice"]), int(r["class"]), np.asarray(r["points"])) for r in recs])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ContourSet":
        return cls.from_json(Path(path).read_text())


def catmull_rom_closed(points: np.ndarray, per_segment: int = 16) -> np.ndarray:
    """Dense samples of the closed uniform Catmull-Rom spline through ``points``."""
    p = np.asarray(points, dtype=np.float64)
    n = len(p)
    t = np.arange(per_segment) / per_segment
    t2, t3 = t * t, t * t * t
    # Hermite form with tangents (p[i+1] - p[i-1]) / 2
    h00, h10, h01, h11 = 2 * t3 - 3 * t2 + 1, t3 - 2 * t2 + t, -2 * t3 + 3 * t2, t3 - t2
    out = []
    for i in range(n):
        p0, p1, p2, p3 = p[i - 1], p[i], p[(i + 1) % n], p[(i + 2) % n]
        m1, m2 = (p2 - p0) / 2, (p3 - p1) / 2
        out.append(h00[:, None] * p1 + h10[:, None] * m1 + h01[:, None] * p2 + h11[:, None] * m2)
    return np.concatenate(out)


def resample_closed(curve: np.ndarray, n: int) -> np.ndarray:
    """``n`` points uniformly spaced in arc length along a closed polyline."""
    closed = np.vstack([curve, curve[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.arange(n) * s[-1] / n
    return np.column_stack([np.interp(targets, s, closed[:, k]) for k in range(2)])


def _segments_intersect(poly: np.ndarray) -> bool:
    a, b = poly, np.roll(poly, -1, axis=0)
    n = len(poly)

    def orient(p, q, r):
        return np.sign((q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1])
                       - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0]))

    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))  # neighbours across the seam share a vertex
    i, j = i[keep], j[keep]
    o1 = orient(a[i], b[i], a[j])
    o2 = orient(a[i], b[i], b[j])
    o3 = orient(a[j], b[j], a[i])
    o4 = orient(a[j], b[j], b[i])
    return bool(np.any((o1 * o2 < 0) & (o3 * o4 < 0)))


def even_odd_fill(polys, shape2d) -> np.ndarray:
    """Crossing-number fill of voxel centres; overlapping polygons cancel (even-odd)."""
    xs, ys = np.meshgrid(np.arange(shape2d[0], dtype=np.float64),
                         np.arange(shape2d[1], dtype=np.float64), indexing="ij")
    inside = np.zeros(shape2d, dtype=bool)
    for poly in polys:
        x0, y0 = poly[:, 0], poly[:, 1]
        x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
        for k in range(len(poly)):
            # half-open rule on y makes vertices on the scanline count once
            crosses = (y0[k] > ys) != (y1[k] > ys)
            if not crosses.any():
                continue
            x_at = x0[k] + (ys - y0[k]) * (x1[k] - x0[k]) / np.where(y1[k] == y0[k], 1.0, y1[k] - y0[k])
            inside ^= crosses & (xs < x_at)
    return inside


def contours_to_label_volume(contours: ContourSet, dims, spacing=None, samples_per_contour: int = 64) -> LabelVolume:
    """Spline each contour, resample uniformly, even-odd fill per slice; LV > LA > MYO on overlap."""
    dims = tuple(int(n) for n in dims)
    spacing = tuple(spacing) if spacing is not None else spacing_for(dims)
    grouped: dict = {}
    for c in contours.contours:
        if samples_per_contour < len(c.points):
            raise ValueError(f"samples_per_contour={samples_per_contour} is below the contour's "
                             f"{len(c.points)} points")
        if not 0 <= c.slice < dims[2]:
            raise ValueError(f"contour slice {c.slice} outside 0..{dims[2] - 1}")
        curve = resample_closed(catmull_rom_closed(c.points), samples_per_contour)
        if _segments_intersect(curve):
            warnings.warn(f"resampled contour on slice {c.slice} (class {c.class_id}) self-intersects; "
                          "filling with the even-odd rule anyway", RuntimeWarning, stacklevel=2)
        grouped.setdefault((c.slice, c.class_id), []).append(curve)
    classes = np.zeros(dims, dtype=np.uint8)
    for cid in STRUCTURE_PRIORITY:
        for (z, k), polys in sorted(grouped.items()):
            if k == cid:
                classes[:, :, z][even_odd_fill(polys, dims[:2])] = cid
    return LabelVolume(classes, spacing)


def label_volume_to_contours(labels: LabelVolume) -> ContourSet:
    """Trace iso-0.5 boundaries of every class on every slice (outer rings and holes)."""
    from skimage.measure import find_contours

    out = []
    arr = labels.classes
    for z in range(arr.shape[2]):
        for cid in (LV, LA, MYO):
            mask = np.pad((arr[:, :, z] == cid).astype(np.float64), 1)
            if not mask.any():
                continue
            for ring in find_contours(mask, 0.5):
                ring = ring - 1.0
                if len(ring) > 1 and np.allclose(ring[0], ring[-1]):
                    ring = ring[:-1]
                if len(ring) >= 3:
                    out.append(Contour(z, cid, ring))
    return ContourSet(out)


# ---------------------------------------------------------------------------
# oracle renderer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RenderParams:
    """Defaults are artifact choices, not measured tissue properties."""

    background_mean: float = 0.3
    blood_mean: float = 0.15
    myo_mean: float = 0.7
    speckle_sigma: float = 0.4
    correlation_length: float = 2.0  # voxels
    attenuation: float = 0.004  # per mm

    def class_means(self) -> np.ndarray:
        m = np.zeros(NUM_CLASSES, dtype=np.float64)
        m[BACKGROUND], m[LV], m[LA], m[MYO] = self.background_mean, self.blood_mean, self.blood_mean, self.myo_mean
        return m


def speckle_field(dims, sigma: float, correlation_length: float, seed: int) -> np.ndarray:
    """Unit-mean log-normal field: exp(sigma*g - sigma^2/2), g a smoothed unit-variance Gaussian."""
    rng = np.random.default_rng(seed)
    g = rng.standard_normal(dims)
    if correlation_length > 0:
        g = ndimage.gaussian_filter(g, correlation_length, mode="wrap")
        g /= g.std()
    return np.exp(sigma * g - 0.5 * sigma ** 2)


def render_pseudo_ultrasound(labels: LabelVolume, cone: ConeSpec | None = None,
                             render: RenderParams = RenderParams(), seed: int = 0) -> Volume:
    """Class means x speckle x depth attenuation inside the cone; zero outside; clamped to [0, 1]."""
    dims, spacing = labels.dims, labels.spacing
    cone = cone if cone is not None else ConeSpec.default(dims, spacing)
    mask = make_cone_mask(dims, spacing, cone).data.astype(np.float64)
    depth, _, _ = cone_geometry(dims, spacing, cone)
    img = render.class_means()[labels.classes]
    img = img * speckle_field(dims, render.speckle_sigma, render.correlation_length, seed)
    img = img * np.exp(-render.attenuation * depth) * mask
    return Volume(np.clip(img, 0.0, 1.0).astype(np.float32), spacing)
