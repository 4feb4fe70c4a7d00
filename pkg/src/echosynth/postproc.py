"""Post-processing of synthesized volumes: wavelet denoising and cone masking.

The wavelet transform is separable, orthonormal and periodic.  Coefficients are
computed in float64 and results cast back to float32.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .volume import Volume, as_volume_array

_S = 1.0 / np.sqrt(2.0)

# reconstruction low-pass filters (orthonormal: sum = sqrt(2), unit norm, even shifts orthogonal)
_LOWPASS = {
    "haar": np.array([_S, _S]),
    "sym4": np.array([
        0.0322231006040427, -0.012603967262037833, -0.09921954357684722, 0.29785779560527736,
        0.8037387518059161, 0.49761866763201545, -0.02963552764599851, -0.07576571478927333,
    ]),
}

THRESHOLD_RULES = ("soft", "hard", "none")
THRESHOLD_SOURCES = ("band", "finest")
DETAIL_BANDS = tuple("".join(b) for b in itertools.product("ad", repeat=3) if "d" in b)


def wavelet_filters(family: str) -> tuple[np.ndarray, np.ndarray]:
    """Return (lowpass, highpass); highpass is the quadrature mirror of lowpass."""
    try:
        lo = _LOWPASS[family]
    except KeyError:
        raise ValueError(f"unknown wavelet family {family!r}; expected one of {sorted(_LOWPASS)}") from None
    n = len(lo)
    hi = np.array([(-1) ** k * lo[n - 1 - k] for k in range(n)])
    return lo, hi


@dataclass(frozen=True)
class WaveletSpec:
    """Transform and thresholding settings.

    The defaults (one level, hard rule, per-band universal threshold) target
    Nyquist-rate artifacts: they remove a checkerboard pattern completely
    while leaving class-mean intensities of the underlying image almost
    untouched.  ``threshold_source="finest"`` estimates a single noise level
    from the finest diagonal band and applies it to every band instead.
    """

    family: str = "sym4"
    levels: int = 1
    threshold_rule: str = "hard"
    # None selects the universal threshold sigma * sqrt(2 ln N)
    threshold: float | None = None
    periodic: bool = True
    threshold_source: str = "band"

    def __post_init__(self):
        wavelet_filters(self.family)
        if self.levels < 1:
            raise ValueError(f"wavelet levels must be >= 1, got {self.levels}")
        if self.threshold_rule not in THRESHOLD_RULES:
            raise ValueError(f"threshold_rule must be one of {THRESHOLD_RULES}")
        if self.threshold is not None and self.threshold < 0:
            raise ValueError("threshold must be non-negative")
        if self.threshold_source not in THRESHOLD_SOURCES:
            raise ValueError(f"threshold_source must be one of {THRESHOLD_SOURCES}")

    @classmethod
    def parse(cls, text: str) -> "WaveletSpec":
        """Parse ``family:levels[:rule[:t]]``, e.g. ``sym4:2`` or ``haar:1:hard:0.05``."""
        parts = text.split(":")
        kwargs = {"family": parts[0]}
        if len(parts) > 1:
            kwargs["levels"] = int(parts[1])
        if len(parts) > 2:
            kwargs["threshold_rule"] = parts[2]
        if len(parts) > 3:
            kwargs["threshold"] = float(parts[3])
        return cls(**kwargs)


@dataclass
class WaveletPyramid:
    spec: WaveletSpec
    approx: np.ndarray
    # details[0] is the finest level; each maps a band key like "dad" to its coefficients
    details: list = field(default_factory=list)
    # extent of the signal entering each level, before any periodic extension
    shapes: list = field(default_factory=list)

    def coefficients(self):
        yield self.approx
        for level in self.details:
            yield from level.values()


def _analysis(x: np.ndarray, axis: int, lo, hi):
    n = x.shape[axis]
    half = np.arange(n // 2) * 2
    a = sum(c * np.take(x, (half + j) % n, axis=axis) for j, c in enumerate(lo))
    d = sum(c * np.take(x, (half + j) % n, axis=axis) for j, c in enumerate(hi))
    return a, d


def _synthesis(a: np.ndarray, d: np.ndarray, axis: int, lo, hi):
    n = 2 * a.shape[axis]
    shape = list(a.shape)
    shape[axis] = n
    out = np.zeros(shape)
    moved = np.moveaxis(out, axis, 0)
    am, dm = np.moveaxis(a, axis, 0), np.moveaxis(d, axis, 0)
    half = np.arange(n // 2) * 2
    for j in range(len(lo)):
        # for fixed j the target positions are distinct, so fancy-index += is safe
        moved[(half + j) % n] += lo[j] * am + hi[j] * dm
    return out


def _extend_even(x: np.ndarray, periodic: bool) -> np.ndarray:
    for ax in range(3):
        if x.shape[ax] % 2:
            if not periodic:
                raise ValueError(f"extent {x.shape[ax]} on axis {ax} is odd and periodic extension is disabled")
            x = np.concatenate([x, np.take(x, [0], axis=ax)], axis=ax)
    return x


def dwt3d(vol, spec: WaveletSpec) -> WaveletPyramid:
    """Multi-level separable 3D analysis: one approximation plus 7 detail bands per level."""
    x = np.asarray(as_volume_array(vol), dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"dwt3d expects a 3-D volume, got {x.shape}")
    lo, hi = wavelet_filters(spec.family)
    details, shapes = [], []
    for _ in range(spec.levels):
        shapes.append(x.shape)
        x = _extend_even(x, spec.periodic)
        bands = {"": x}
        for ax in range(3):
            nxt = {}
            for key, arr in bands.items():
                a, d = _analysis(arr, ax, lo, hi)
                nxt[key + "a"], nxt[key + "d"] = a, d
            bands = nxt
        x = bands.pop("aaa")
        details.append({k: bands[k] for k in DETAIL_BANDS})
    return WaveletPyramid(spec=spec, approx=x, details=details, shapes=shapes)


def idwt3d(pyramid: WaveletPyramid, spec: WaveletSpec | None = None) -> Volume:
    """Inverse of :func:`dwt3d`; perfect reconstruction when coefficients are untouched."""
    if spec is not None and (spec.family != pyramid.spec.family or spec.levels != pyramid.spec.levels):
        raise ValueError(f"pyramid was built with {pyramid.spec.family}/{pyramid.spec.levels} levels, "
                         f"not {spec.family}/{spec.levels}")
    lo, hi = wavelet_filters(pyramid.spec.family)
    x = pyramid.approx
    for level in range(len(pyramid.details) - 1, -1, -1):
        bands = dict(pyramid.details[level])
        bands["aaa"] = x
        for ax in (2, 1, 0):
            merged = {}
            for key in sorted({k[:ax] for k in bands}):
                merged[key] = _synthesis(bands[key + "a"], bands[key + "d"], ax, lo, hi)
            bands = merged
        x = bands[""]
        shape = pyramid.shapes[level]
        x = x[: shape[0], : shape[1], : shape[2]]
    return Volume(x.astype(np.float32))


def universal_threshold(band: np.ndarray, n: int) -> float:
    """sigma * sqrt(2 ln n) with sigma from the median absolute coefficient."""
    sigma = np.median(np.abs(band)) / 0.6745
    return float(sigma * np.sqrt(2.0 * np.log(max(n, 2))))


def _shrink(c: np.ndarray, t: float, rule: str) -> np.ndarray:
    if rule == "soft":
        return np.sign(c) * np.maximum(np.abs(c) - t, 0.0)
    if rule == "hard":
        return np.where(np.abs(c) > t, c, 0.0)
    return c


def wavelet_denoise(vol, spec: WaveletSpec = WaveletSpec(), clamp: bool = True) -> Volume:
    """Threshold detail bands (approximation untouched) and reconstruct.

    With ``clamp`` the result is clipped to the input's intensity range.  The
    clip can move voxels, so repeated hard thresholding is only idempotent
    when the clip does not bind.
    """
    spacing = vol.spacing if isinstance(vol, Volume) else (1.0, 1.0, 1.0)
    x = as_volume_array(vol)
    pyr = dwt3d(x, spec)
    if spec.threshold_rule != "none":
        finest = universal_threshold(pyr.details[0]["ddd"], x.size)
        for level in pyr.details:
            for key, band in level.items():
                if spec.threshold is not None:
                    t = spec.threshold
                elif spec.threshold_source == "finest":
                    t = finest
                else:
                    t = universal_threshold(band, x.size)
                level[key] = _shrink(band, t, spec.threshold_rule)
    out = idwt3d(pyr).data
    if clamp:
        out = np.clip(out, x.min(), x.max())
    return Volume(out, spacing)


# ---------------------------------------------------------------------------
# ultrasound cone
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConeSpec:
    """Pyramidal ultrasound sector.

    ``apex`` is in voxel coordinates, ``axis`` a direction in physical space,
    depths in mm and ``edge_softness`` in voxels.
    """

    apex: tuple
    axis: tuple = (1.0, 0.0, 0.0)
    half_angle_lateral: float = 0.75
    half_angle_elevation: float = 0.75
    depth_min: float = 0.0
    depth_max: float = 100.0
    edge_softness: float = 0.0

    def __post_init__(self):
        a = np.asarray(self.axis, dtype=np.float64)
        norm = np.linalg.norm(a)
        if a.shape != (3,) or norm == 0 or not np.isfinite(norm):
            raise ValueError(f"cone axis must be a non-zero 3-vector, got {self.axis!r}")
        object.__setattr__(self, "axis", tuple(float(v) for v in a / norm))
        object.__setattr__(self, "apex", tuple(float(v) for v in self.apex))
        for name in ("half_angle_lateral", "half_angle_elevation"):
            v = getattr(self, name)
            if not 0.0 < v < np.pi / 2:
                raise ValueError(f"{name} must lie in (0, pi/2), got {v}")
        if not self.depth_min < self.depth_max:
            raise ValueError("depth_min must be smaller than depth_max")
        if self.edge_softness < 0:
            raise ValueError("edge_softness must be >= 0")

    @classmethod
    def default(cls, dims, spacing) -> "ConeSpec":
        """Sector from the centre of the x=0 face, pointing along +x."""
        nx, ny, nz = dims
        return cls(apex=(0.0, (ny - 1) / 2.0, (nz - 1) / 2.0), axis=(1.0, 0.0, 0.0),
                   half_angle_lateral=0.75, half_angle_elevation=0.75,
                   depth_min=0.0, depth_max=0.97 * (nx - 1) * spacing[0], edge_softness=0.0)


def _cone_frame(axis):
    a = np.asarray(axis)
    ref = np.array([0.0, 0.0, 1.0])
    if abs(a @ ref) > 0.99:
        ref = np.array([0.0, 1.0, 0.0])
    e = ref - (ref @ a) * a
    e /= np.linalg.norm(e)
    u = np.cross(e, a)
    return a, u, e


def cone_geometry(dims, spacing, spec: ConeSpec):
    """Per-voxel (radial depth mm, lateral angle, elevation angle) relative to the apex."""
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    d = [(g - c) * s for g, c, s in zip(grids, spec.apex, spacing)]
    a, u, e = _cone_frame(spec.axis)
    along = a[0] * d[0] + a[1] * d[1] + a[2] * d[2]
    lat = u[0] * d[0] + u[1] * d[1] + u[2] * d[2]
    elev = e[0] * d[0] + e[1] * d[1] + e[2] * d[2]
    r = np.sqrt(d[0] ** 2 + d[1] ** 2 + d[2] ** 2)
    return r, np.arctan2(lat, along), np.arctan2(elev, along)


def make_cone_mask(dims, spacing, spec: ConeSpec) -> Volume:
    """Mask in [0,1]: 1 inside the sector, 0 outside, linear ramp of ``edge_softness`` voxels inside the edge."""
    dims = tuple(int(n) for n in dims)
    for i, (c, n) in enumerate(zip(spec.apex, dims)):
        if not 0.0 <= c <= n - 1:
            raise ValueError(f"cone apex coordinate {c} on axis {i} lies outside the volume")
    r, th_l, th_e = cone_geometry(dims, spacing, spec)
    vox = float(np.mean(spacing))
    margin = np.minimum.reduce([
        (spec.half_angle_lateral - np.abs(th_l)) * r / vox,
        (spec.half_angle_elevation - np.abs(th_e)) * r / vox,
        (r - spec.depth_min) / vox,
        (spec.depth_max - r) / vox,
    ])
    # angular margin vanishes at the apex itself; decide it from the angles there
    inside_angles = (np.abs(th_l) <= spec.half_angle_lateral) & (np.abs(th_e) <= spec.half_angle_elevation)
    inside = inside_angles & (r >= spec.depth_min) & (r <= spec.depth_max)
    if spec.edge_softness > 0:
        mask = np.where(inside, np.clip(margin / spec.edge_softness, 0.0, 1.0), 0.0)
    else:
        mask = inside.astype(np.float64)
    return Volume(mask.astype(np.float32), spacing)


def apply_cone(vol, mask, fill: float = 0.0) -> Volume:
    """Blend ``vol`` with a constant outside the cone: ``mask*vol + (1-mask)*fill``."""
    x = as_volume_array(vol)
    m = as_volume_array(mask)
    if x.shape != m.shape:
        raise ValueError(f"volume shape {x.shape} does not match mask shape {m.shape}")
    if not 0.0 <= fill <= 1.0:
        raise ValueError(f"fill must lie in [0, 1], got {fill}")
    out = m * x + (np.float32(1.0) - m) * np.float32(fill)
    spacing = vol.spacing if isinstance(vol, Volume) else (1.0, 1.0, 1.0)
    return Volume(out, spacing)
