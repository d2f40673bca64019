"""Image-similarity, overlap and landmark metrics, and ROI propagation."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from priorwarp.diffeo import DeformationField, GridMismatchError, jacobian_analysis, sample_displacement
from priorwarp.volume import LandmarkSet, Mask, Volume, VolumeFormatError

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _data(v):
    return v.data if isinstance(v, Volume) else np.asarray(v, dtype=np.float64)


def _labels(m):
    return m.labels if isinstance(m, Mask) else np.asarray(m)


def _same_grid(a, b):
    if np.shape(a) != np.shape(b):
        raise GridMismatchError(f"grid mismatch: {np.shape(a)} vs {np.shape(b)}")


def psnr(a, b) -> float:
    """PSNR in dB with peak 1; ``math.inf`` when the volumes are identical."""
    x, y = _data(a), _data(b)
    _same_grid(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def ssim3d(a, b, window: int = SSIM_WINDOW, data_range: float = 1.0) -> float:
    """Mean local SSIM over all fully-contained cubic windows.

    Uniform window with sample (n - 1) covariance normalization, the same
    convention as scikit-image's ``structural_similarity``.
    """
    x, y = _data(a), _data(b)
    _same_grid(x, y)
    if any(d < window for d in x.shape):
        raise ValueError(f"SSIM needs every dimension >= {window}, got {x.shape}")
    if np.array_equal(x, y):
        return 1.0
    npts = window ** x.ndim
    cov_norm = npts / (npts - 1)
    ux = uniform_filter(x, size=window)
    uy = uniform_filter(y, size=window)
    uxx = uniform_filter(x * x, size=window)
    uyy = uniform_filter(y * y, size=window)
    uxy = uniform_filter(x * y, size=window)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    pad = (window - 1) // 2
    inner = s[tuple(slice(pad, d - pad) for d in s.shape)]
    return float(np.mean(inner))


def dice(a, b, label: int = 1) -> float:
    la, lb = _labels(a), _labels(b)
    _same_grid(la, lb)
    A = la == label
    B = lb == label
    total = int(A.sum()) + int(B.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(A, B).sum()) / total


def tre(landmarks_target: LandmarkSet, landmarks_ref: LandmarkSet, u, spacing) -> tuple[float, float]:
    """Mean and population std (mm) of ``|phi(target landmark) - reference landmark|``."""
    if landmarks_target.count != landmarks_ref.count:
        raise ValueError(f"landmark count mismatch: {landmarks_target.count} vs {landmarks_ref.count}")
    disp = u.data if isinstance(u, DeformationField) else np.asarray(getattr(u, "data", u))
    dims = disp.shape[:3]
    landmarks_target.check_within(dims)
    pts = landmarks_target.points
    moved = pts + sample_displacement(disp, pts) * (np.asarray(dims, dtype=np.float64) - 1)
    resid_mm = (moved - landmarks_ref.points) * np.asarray(spacing, dtype=np.float64)
    err = np.linalg.norm(resid_mm, axis=1)
    if err.size == 0:
        return 0.0, 0.0
    return float(np.mean(err)), float(np.std(err))


# corner offsets in lexicographic order; argmin picks the first on ties
_CORNERS = np.array([(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)], dtype=np.intp)


def nearest_corner(points_vox: np.ndarray, dims) -> np.ndarray:
    """Index of the nearest of the 8 surrounding lattice corners, shape (n, 3)."""
    dims = np.asarray(dims)
    x = np.clip(points_vox, 0, dims - 1)
    base = np.clip(np.floor(x), 0, dims - 2).astype(np.intp)
    corners = base[:, None, :] + _CORNERS[None, :, :]
    dist = np.sum((x[:, None, :] - corners) ** 2, axis=2)
    choice = np.argmin(dist, axis=1)
    return corners[np.arange(len(x)), choice]


def propagate_roi(mask_ref: Mask, u) -> Mask:
    """Carry reference labels to the target grid by nearest-corner lookup at ``s + u(s)``."""
    labels = _labels(mask_ref)
    disp = u.data if isinstance(u, DeformationField) else np.asarray(getattr(u, "data", u))
    _same_grid(labels, disp[..., 0])
    dims = labels.shape
    idx = np.indices(dims, dtype=np.float64).reshape(3, -1).T
    target = idx + disp.reshape(-1, 3) * (np.asarray(dims, dtype=np.float64) - 1)
    c = nearest_corner(target, dims)
    out = labels[c[:, 0], c[:, 1], c[:, 2]].reshape(dims)
    return Mask(out, getattr(mask_ref, "spacing", (1.0, 1.0, 1.0)))


@dataclass
class MetricsReport:
    psnr_db: float | None = None
    ssim: float | None = None
    dice: dict[int, float] = field(default_factory=dict)
    folding_count: int | None = None
    tre_mean_mm: float | None = None
    tre_std_mm: float | None = None
    inputs: dict[str, str] = field(default_factory=dict)
    config_digest: str | None = None
    ssim_settings: dict = field(default_factory=lambda: {
        "window": SSIM_WINDOW, "k1": SSIM_K1, "k2": SSIM_K2, "data_range": 1.0})

    def __post_init__(self):
        if self.ssim is not None and not -1.0 <= self.ssim <= 1.0:
            raise ValueError(f"ssim out of range: {self.ssim}")
        for label, d in self.dice.items():
            if not 0.0 <= d <= 1.0:
                raise ValueError(f"dice for label {label} out of range: {d}")
        if self.folding_count is not None and self.folding_count < 0:
            raise ValueError("negative folding count")

    def to_dict(self) -> dict:
        psnr_out = self.psnr_db
        if psnr_out is not None and math.isinf(psnr_out):
            psnr_out = "inf"
        return {
            "psnr_db": psnr_out,
            "ssim": self.ssim,
            "dice": {str(k): v for k, v in sorted(self.dice.items())},
            "folding_count": self.folding_count,
            "tre_mean_mm": self.tre_mean_mm,
            "tre_std_mm": self.tre_std_mm,
            "inputs": dict(sorted(self.inputs.items())),
            "config_digest": self.config_digest,
            "ssim_settings": self.ssim_settings,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        p = d.get("psnr_db")
        return cls(
            psnr_db=math.inf if p == "inf" else p,
            ssim=d.get("ssim"),
            dice={int(k): v for k, v in (d.get("dice") or {}).items()},
            folding_count=d.get("folding_count"),
            tre_mean_mm=d.get("tre_mean_mm"),
            tre_std_mm=d.get("tre_std_mm"),
            inputs=d.get("inputs") or {},
            config_digest=d.get("config_digest"),
        )


def evaluate(a: Volume | None = None, b: Volume | None = None, *, mask_a: Mask | None = None,
             mask_b: Mask | None = None, labels=None, u=None, landmarks_target=None,
             landmarks_ref=None, spacing=None, inputs=None, config_digest=None) -> MetricsReport:
    """Collect whichever metrics the supplied inputs allow."""
    report = MetricsReport(inputs=dict(inputs or {}), config_digest=config_digest)
    if a is not None and b is not None:
        report.psnr_db = psnr(a, b)
        report.ssim = ssim3d(a, b)
    if mask_a is not None and mask_b is not None:
        if labels is None:
            labels = sorted((set(np.unique(mask_a.labels)) | set(np.unique(mask_b.labels))) - {0})
        report.dice = {int(l): dice(mask_a, mask_b, int(l)) for l in labels}
    if u is not None:
        _, report.folding_count = jacobian_analysis(u)
        if landmarks_target is not None and landmarks_ref is not None:
            if spacing is None:
                raise VolumeFormatError("TRE needs voxel spacing")
            report.tre_mean_mm, report.tre_std_mm = tre(landmarks_target, landmarks_ref, u, spacing)
    if report.ssim is not None:
        report.ssim = float(min(1.0, max(-1.0, report.ssim)))
    return report


def config_digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]
