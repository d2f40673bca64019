"""Synthetic 4D ground truth: a textured ellipsoid with an embedded sphere, moved by
a known smooth displacement.

Frames are synthesized by pull-back, ``f_t(s) = f_1(s + u(s, t))``, so the
analytic field has the same target-to-reference direction as a learned one.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from priorwarp.diffeo import DeformationField, VectorFieldGrid, save_field
from priorwarp.volume import (
    ImageSequence,
    LandmarkSet,
    Mask,
    Volume,
    grid_points,
    save_landmarks,
    save_mask,
    save_sequence_manifest,
    save_volume,
    trilinear_sample,
)

BACKGROUND, BODY, TUMOR = 0, 1, 2


class PhantomSpecError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    body_center: tuple[float, float, float] = (0.5, 0.5, 0.5)  # normalized
    body_radii: tuple[float, float, float] = (0.42, 0.40, 0.38)  # normalized
    body_level: float = 0.45
    texture_amplitude: float = 0.25
    texture_cutoff: float = 3.0  # cycles per unit of normalized length
    edge_voxels: float = 1.2  # soft-edge width of body and tumor intensity
    tumor_center: tuple[float, float, float] = (0.56, 0.5, 0.48)  # normalized
    tumor_radius_mm: float = 6.0
    tumor_offset: float = 0.25
    amplitude: tuple[float, float, float] = (0.0, 0.0, 0.0)  # normalized units
    period: float = 8.0  # frames
    frames: int = 2
    support_margin: float = 1.0  # bump support radius, relative to the body radii
    landmarks: int = 50

    def validate(self) -> None:
        if len(self.dims) != 3 or any(int(d) < 8 for d in self.dims):
            raise PhantomSpecError(f"phantom dims must be >= 8 per axis, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise PhantomSpecError("spacing must be positive")
        if self.frames < 2:
            raise PhantomSpecError("a phantom sequence needs at least two frames")
        if self.period <= 0:
            raise PhantomSpecError("motion period must be positive")
        if np.linalg.norm(self.amplitude) >= 0.1:
            raise PhantomSpecError("motion amplitude must stay below 10% of the domain extent")
        c = np.asarray(self.body_center)
        R = np.asarray(self.body_radii)
        if np.any(c - R < 0) or np.any(c + R > 1):
            raise PhantomSpecError("body ellipsoid leaves the domain")
        tc = np.asarray(self.tumor_center)
        r_norm = self.tumor_radius_mm / (np.asarray(self.spacing) * (np.asarray(self.dims) - 1))
        # the tumor's extreme points along each axis must lie inside the body
        for axis in range(3):
            for sgn in (-1, 1):
                q = tc.copy()
                q[axis] += sgn * r_norm[axis]
                if np.sum(((q - c) / R) ** 2) > 1:
                    raise PhantomSpecError("tumor sphere is not inside the body")

    def to_manifest(self, seed: int) -> str:
        lines = [f"seed={seed}"]
        for key, val in asdict(self).items():
            if isinstance(val, (tuple, list)):
                val = " ".join(repr(float(x)) if isinstance(x, float) else str(x) for x in val)
            lines.append(f"{key}={val}")
        return "\n".join(lines) + "\n"


def bump_weight(spec: PhantomSpec, p) -> np.ndarray:
    """Smooth compactly supported weight: 1 at the body center, 0 beyond the margin."""
    p = np.asarray(p, dtype=np.float64)
    R = np.asarray(spec.body_radii) * spec.support_margin
    r2 = np.sum(((p - np.asarray(spec.body_center)) / R) ** 2, axis=-1)
    return np.where(r2 < 1.0, (1.0 - np.minimum(r2, 1.0)) ** 3, 0.0)


def motion_profile(spec: PhantomSpec, t) -> float:
    return math.sin(2.0 * math.pi * (float(t) - 1.0) / spec.period)


def analytic_displacement(spec: PhantomSpec, p, t) -> np.ndarray:
    """Ground-truth displacement (normalized units) at normalized points (..., 3)."""
    w = bump_weight(spec, p)
    return motion_profile(spec, t) * w[..., None] * np.asarray(spec.amplitude, dtype=np.float64)


def _band_limited_texture(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    dims = tuple(int(d) for d in spec.dims)
    noise = rng.standard_normal(dims)
    spectrum = np.fft.fftn(noise)
    freqs = [np.fft.fftfreq(n, d=1.0 / (n - 1)) for n in dims]
    k2 = sum(np.meshgrid(*[f ** 2 for f in freqs], indexing="ij"))
    spectrum[k2 > spec.texture_cutoff ** 2] = 0.0
    field = np.real(np.fft.ifftn(spectrum))
    field -= field.mean()
    peak = np.max(np.abs(field))
    return field / peak if peak > 0 else field


def _soft_inside(signed_distance_vox: np.ndarray, width: float) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(signed_distance_vox / width))


def _body_distance_vox(spec: PhantomSpec, p) -> np.ndarray:
    # approximate signed distance to the ellipsoid surface, positive inside
    R = np.asarray(spec.body_radii)
    r = np.sqrt(np.sum(((p - np.asarray(spec.body_center)) / R) ** 2, axis=-1))
    r_vox = np.min(R * (np.asarray(spec.dims) - 1))
    return (1.0 - r) * r_vox


def _tumor_distance_mm(spec: PhantomSpec, p) -> np.ndarray:
    extent = np.asarray(spec.spacing) * (np.asarray(spec.dims) - 1)
    d = np.sqrt(np.sum(((p - np.asarray(spec.tumor_center)) * extent) ** 2, axis=-1))
    return d


def _labels_at(spec: PhantomSpec, p) -> np.ndarray:
    R = np.asarray(spec.body_radii)
    inside_body = np.sum(((p - np.asarray(spec.body_center)) / R) ** 2, axis=-1) <= 1.0
    labels = np.where(inside_body, BODY, BACKGROUND)
    labels = np.where(_tumor_distance_mm(spec, p) <= spec.tumor_radius_mm, TUMOR, labels)
    return labels.astype(np.int64)


@dataclass
class GroundTruth:
    spec: PhantomSpec
    seed: int
    masks: dict[int, Mask]
    landmarks: dict[int, LandmarkSet]

    def displacement(self, p, t) -> np.ndarray:
        return analytic_displacement(self.spec, p, t)

    def field(self, t) -> DeformationField:
        u = analytic_displacement(self.spec, grid_points(self.spec.dims), t)
        return DeformationField(VectorFieldGrid(u), {"source": "analytic", "t": t})

    def support(self) -> np.ndarray:
        """Voxels inside the body at the reference frame."""
        return self.masks[1].labels > 0


def reference_texture(spec: PhantomSpec, seed: int) -> Volume:
    spec.validate()
    rng = np.random.default_rng(seed)
    P = grid_points(spec.dims)
    texture = _band_limited_texture(spec, rng)
    edge_tumor = spec.edge_voxels * float(np.min(spec.spacing))
    body = _soft_inside(_body_distance_vox(spec, P), spec.edge_voxels)
    tumor = _soft_inside(spec.tumor_radius_mm - _tumor_distance_mm(spec, P), edge_tumor)
    img = body * (spec.body_level + spec.texture_amplitude * texture) + spec.tumor_offset * tumor
    return Volume(np.clip(img, 0.0, 1.0), spec.spacing)


def transport_landmarks(spec: PhantomSpec, ref_points: np.ndarray, t, tol: float = 1e-14,
                        max_iter: int = 500) -> np.ndarray:
    """Points q with ``q + u(q, t) = ref_points`` (voxel units), by fixed-point iteration."""
    scale = np.asarray(spec.dims, dtype=np.float64) - 1
    q = np.array(ref_points, dtype=np.float64)
    for _ in range(max_iter):
        nxt = ref_points - analytic_displacement(spec, q / scale, t) * scale
        delta = np.max(np.abs(nxt - q), initial=0.0)
        q = nxt
        if delta <= tol:
            break
    return q


def generate_phantom(spec: PhantomSpec, seed: int = 0) -> tuple[ImageSequence, GroundTruth]:
    spec.validate()
    ref = reference_texture(spec, seed)
    P = grid_points(spec.dims)
    rng = np.random.default_rng([seed, 1])
    scale = np.asarray(spec.dims, dtype=np.float64) - 1
    # frame-1 landmarks drawn inside the inner part of the body
    pts = []
    while len(pts) < spec.landmarks:
        cand = rng.uniform(0, 1, size=3)
        if np.sum(((cand - np.asarray(spec.body_center)) / np.asarray(spec.body_radii)) ** 2) < 0.64:
            pts.append(cand * scale)
    ref_landmarks = np.array(pts, dtype=np.float64).reshape(-1, 3)

    volumes, masks, landmarks = [], {}, {}
    times = list(range(1, spec.frames + 1))
    for t in times:
        u = analytic_displacement(spec, P, t)
        if not np.any(u):
            volumes.append(ref)
        else:
            volumes.append(Volume(trilinear_sample(ref, P + u), spec.spacing))
        masks[t] = Mask(_labels_at(spec, P + u), spec.spacing)
        landmarks[t] = LandmarkSet(transport_landmarks(spec, ref_landmarks, t))
    seq = ImageSequence(volumes, times, reference_index=1)
    return seq, GroundTruth(spec, seed, masks, landmarks)


def write_phantom(outdir, seq: ImageSequence, gt: GroundTruth, extra: dict | None = None) -> Path:
    """Write frames, masks, landmarks, analytic fields and manifests; returns the sequence manifest."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for t, vol in zip(seq.times, seq.volumes):
        name = f"frame_{t:02d}.hdr"
        save_volume(outdir / name, vol, extra=extra)
        entries.append((t, name))
        save_mask(outdir / f"mask_{t:02d}.hdr", gt.masks[t], extra=extra)
        save_landmarks(outdir / f"landmarks_{t:02d}.txt", gt.landmarks[t])
        save_field(outdir / f"truth_disp_{t:02d}.hdr", gt.field(t), extra)
    manifest = outdir / "sequence.txt"
    save_sequence_manifest(manifest, entries, seq.reference_index, seq.time_span)
    (outdir / "phantom.manifest").write_text(gt.spec.to_manifest(gt.seed))
    return manifest
