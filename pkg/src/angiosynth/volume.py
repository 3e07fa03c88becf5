"""Volumes, the VVOL container format, slicing, and the synthetic vessel phantom."""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

MAGIC = b"VVOL0001"
_HEADER = struct.Struct("<8s3I3d")
AXES = {"z": 0, "y": 1, "x": 2}


class VolumeFormatError(ValueError):
    """Base class for VVOL decoding failures."""


class BadMagicError(VolumeFormatError):
    pass


class TruncatedVolumeError(VolumeFormatError):
    pass


class NonFiniteVolumeError(VolumeFormatError):
    pass


@dataclass
class Volume3D:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise ValueError(f"voxels must be a non-empty 3D array, got shape {vox.shape}")
        if not np.all(np.isfinite(vox)):
            raise ValueError("volume intensities must be finite")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        self.voxels = vox
        self.spacing = spacing

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.voxels.shape)

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (self.spacing == other.spacing
                and self.voxels.shape == other.voxels.shape
                and self.voxels.tobytes() == other.voxels.tobytes())


def to_bytes(v: Volume3D) -> bytes:
    d, h, w = v.dims
    header = _HEADER.pack(MAGIC, d, h, w, *v.spacing)
    return header + v.voxels.astype("<f4", copy=False).tobytes(order="C")


def from_bytes(buf: bytes) -> Volume3D:
    if len(buf) < len(MAGIC) or buf[:len(MAGIC)] != MAGIC:
        raise BadMagicError("not a VVOL file (bad magic)")
    if len(buf) < _HEADER.size:
        raise TruncatedVolumeError("VVOL header truncated")
    _, d, h, w, sz, sy, sx = _HEADER.unpack_from(buf)
    if min(d, h, w) < 1:
        raise VolumeFormatError(f"invalid dims {(d, h, w)}")
    expected = d * h * w * 4
    payload = buf[_HEADER.size:]
    if len(payload) < expected:
        raise TruncatedVolumeError(
            f"header claims {d}x{h}x{w} voxels ({expected} bytes), found {len(payload)} bytes")
    if len(payload) > expected:
        raise VolumeFormatError(f"{len(payload) - expected} trailing bytes after payload")
    vox = np.frombuffer(payload, dtype="<f4").reshape(d, h, w).astype(np.float32)
    if not np.all(np.isfinite(vox)):
        raise NonFiniteVolumeError("VVOL payload contains non-finite values")
    if min(sz, sy, sx) <= 0 or not np.all(np.isfinite([sz, sy, sx])):
        raise VolumeFormatError(f"invalid spacing {(sz, sy, sx)}")
    return Volume3D(vox, (sz, sy, sx))


def save_volume(v: Volume3D, path) -> None:
    Path(path).write_bytes(to_bytes(v))


def load_volume(path) -> Volume3D:
    return from_bytes(Path(path).read_bytes())


def extract_slices(v: Volume3D, axis: str = "z") -> list[np.ndarray]:
    """Split a volume into 2D grids along ``axis`` in index order."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {sorted(AXES)}, got {axis!r}")
    moved = np.moveaxis(v.voxels, AXES[axis], 0)
    return [np.array(s) for s in moved]


def stack_slices(slices, axis: str = "z", spacing=(1.0, 1.0, 1.0)) -> Volume3D:
    """Inverse of :func:`extract_slices`."""
    arr = np.moveaxis(np.stack([np.asarray(s, dtype=np.float32) for s in slices]), 0, AXES[axis])
    return Volume3D(np.ascontiguousarray(arr), spacing)


# ---------------------------------------------------------------- phantom


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 32, 32)
    branch_count: int = 7
    radius_range: tuple[float, float] = (1.2, 2.5)
    tortuosity: float = 0.3
    vessel_contrast_angio: float = 0.7
    vessel_contrast_nonangio: float = 0.15
    noise_sigma: float = 0.02
    seed: int = 0
    background: float = 0.2
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def validate(self):
        d, h, w = self.dims
        rmin, rmax = self.radius_range
        if min(d, h, w) < 1:
            raise ValueError(f"dims must be positive, got {self.dims}")
        if self.branch_count < 1:
            raise ValueError("branch_count must be >= 1")
        if not 0 < rmin <= rmax:
            raise ValueError(f"radius_range must satisfy 0 < min <= max, got {self.radius_range}")
        if 2 * rmax + 1 > min(d, h, w):
            raise ValueError(f"dims {self.dims} too small for root radius {rmax}")
        if not rmax < min(h, w) / 4:
            raise ValueError(f"radius max {rmax} must be < min(H, W)/4 = {min(h, w) / 4}")
        if self.tortuosity < 0 or self.noise_sigma < 0:
            raise ValueError("tortuosity and noise_sigma must be >= 0")
        for name in ("vessel_contrast_angio", "vessel_contrast_nonangio"):
            c = getattr(self, name)
            if not 0 < c <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {c}")
        if not self.vessel_contrast_angio > self.vessel_contrast_nonangio:
            raise ValueError("angio contrast must exceed non-angio contrast")
        if not 0 <= self.background < 1:
            raise ValueError("background must lie in [0, 1)")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")


@dataclass
class VolumePair:
    non_angio: Volume3D
    angio: Volume3D
    vessel_mask: Volume3D
    centerlines: list = field(default_factory=list, repr=False, compare=False)


def _random_perpendicular(rng, v):
    a = rng.normal(size=3)
    a -= a.dot(v) * v
    n = np.linalg.norm(a)
    if n < 1e-9:
        a = np.array([1.0, 0, 0]) if abs(v[0]) < 0.9 else np.array([0, 1.0, 0])
        a -= a.dot(v) * v
        n = np.linalg.norm(a)
    return a / n


def _rotate(v, axis, angle):
    # Rodrigues rotation
    return (v * np.cos(angle) + np.cross(axis, v) * np.sin(angle)
            + axis * axis.dot(v) * (1 - np.cos(angle)))


def _grow_tree(spec: PhantomSpec, rng):
    """Recursive bifurcating centerlines; returns [(points, radius), ...]."""
    dims = np.asarray(spec.dims, dtype=float)
    rmin, rmax = spec.radius_range
    lo_clip = np.minimum(rmax, (dims - 1) / 2)
    hi_clip = dims - 1 - lo_clip

    start = np.array([lo_clip[0],
                      (dims[1] - 1) / 2 + rng.uniform(-0.1, 0.1) * dims[1],
                      (dims[2] - 1) / 2 + rng.uniform(-0.1, 0.1) * dims[2]])
    direction = np.array([1.0, rng.normal(0, 0.15), rng.normal(0, 0.15)])
    direction /= np.linalg.norm(direction)
    root_len = 0.45 * dims[0]

    segments = []
    queue = deque([(start, direction, rmax, root_len)])
    while queue and len(segments) < spec.branch_count:
        p, d, r, length = queue.popleft()
        pts = [p.copy()]
        n_steps = max(2, int(np.ceil(length)))
        for _ in range(n_steps):
            if spec.tortuosity > 0:
                d = d + 0.15 * spec.tortuosity * rng.normal(size=3)
                d /= np.linalg.norm(d)
            p = np.clip(p + d, lo_clip, hi_clip)
            pts.append(p.copy())
        segments.append((np.array(pts), r))
        for sign in (1.0, -1.0):
            axis = _random_perpendicular(rng, d)
            angle = sign * rng.uniform(np.deg2rad(25), np.deg2rad(55))
            child_d = _rotate(d, axis, angle)
            child_d /= np.linalg.norm(child_d)
            child_r = max(rmin, r * rng.uniform(0.7, 0.9))
            queue.append((p.copy(), child_d, child_r, length * rng.uniform(0.7, 0.9)))
    return segments


def _rasterize_capsules(dims, segments):
    mask = np.zeros(dims, dtype=bool)
    dims_arr = np.asarray(dims)
    for pts, r in segments:
        for a, b in zip(pts[:-1], pts[1:]):
            lo = np.maximum(np.floor(np.minimum(a, b) - r), 0).astype(int)
            hi = np.minimum(np.ceil(np.maximum(a, b) + r), dims_arr - 1).astype(int)
            zz, yy, xx = np.meshgrid(*(np.arange(l, h + 1) for l, h in zip(lo, hi)), indexing="ij")
            q = np.stack([zz, yy, xx], axis=-1).astype(float)
            ab = b - a
            denom = ab.dot(ab)
            s = np.zeros(q.shape[:-1]) if denom == 0 else np.clip((q - a) @ ab / denom, 0, 1)
            dist = np.linalg.norm(q - (a + s[..., None] * ab), axis=-1)
            mask[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] |= dist <= r
    return mask


def _largest_component(mask):
    labels, n = ndimage.label(mask, structure=np.ones((3, 3, 3)))
    if n <= 1:
        return mask
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (np.argmax(sizes) + 1)


def generate_phantom(spec: PhantomSpec) -> VolumePair:
    """Paired angio / non-angio volumes over one branching vessel tree.

    Both volumes share geometry; they differ in vessel contrast and in their
    independent noise draws.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    segments = _grow_tree(spec, rng)
    mask = _largest_component(_rasterize_capsules(tuple(spec.dims), segments))
    m = mask.astype(np.float64)

    def render(contrast):
        img = spec.background + contrast * m
        if spec.noise_sigma > 0:
            img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
        return Volume3D(np.clip(img, 0.0, 1.0).astype(np.float32), spec.spacing)

    angio = render(spec.vessel_contrast_angio)
    non_angio = render(spec.vessel_contrast_nonangio)
    return VolumePair(non_angio, angio, Volume3D(m.astype(np.float32), spec.spacing), segments)
