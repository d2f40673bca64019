"""Stationary-velocity integration, field composition, warping and folding analysis.

Vector fields are arrays of shape (nx, ny, nz, 3) in normalized-coordinate
units.  A displacement ``u`` defines ``phi(p) = p + u(p)``, taking target-grid
coordinates to reference coordinates.  The array-level functions accept tape
`Var`s so the whole chain stays differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from priorwarp.diffengine import NonFiniteError, Var, add, scale, trilinear_grid_sample, value
from priorwarp.volume import Volume, grid_points, normalized_to_voxel, read_header, trilinear_sample, write_header

VELOCITY = "velocity"
DISPLACEMENT = "displacement"


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class VectorFieldGrid:
    data: np.ndarray  # (nx, ny, nz, 3)
    kind: str = DISPLACEMENT

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4 or data.shape[-1] != 3:
            raise ValueError(f"vector field must have shape (nx, ny, nz, 3), got {data.shape}")
        if self.kind not in (VELOCITY, DISPLACEMENT):
            raise ValueError(f"unknown field kind {self.kind!r}")
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("vector field has non-finite components")
        object.__setattr__(self, "data", data)

    @property
    def dims(self):
        return self.data.shape[:3]

    def magnitude_voxels(self) -> np.ndarray:
        """Per-voxel displacement length in voxel units."""
        scale_ = np.asarray(self.dims, dtype=np.float64) - 1
        return np.linalg.norm(self.data * scale_, axis=-1)


@dataclass(frozen=True)
class DeformationField:
    displacement: VectorFieldGrid
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.displacement.kind != DISPLACEMENT:
            raise ValueError("deformation field must hold a displacement")

    @property
    def dims(self):
        return self.displacement.dims

    @property
    def data(self):
        return self.displacement.data


# -- array-level, differentiable ------------------------------------------------


def compose_fields(outer, inner):
    """``inner(p) + outer(p + inner(p))`` with edge-clamped sampling of ``outer``."""
    vi = value(inner)
    if value(outer).shape != vi.shape:
        raise GridMismatchError(f"cannot compose fields on grids {value(outer).shape} and {vi.shape}")
    P = grid_points(vi.shape[:3])
    return add(inner, trilinear_grid_sample(outer, add(P, inner)))


def integrate_velocity(v, steps: int = 7):
    """Scaling and squaring: halve ``steps`` times, then self-compose ``steps`` times."""
    if steps < 1:
        raise ValueError("scaling and squaring needs at least one step")
    u = scale(v, 1.0 / 2 ** steps)
    for _ in range(steps):
        u = compose_fields(u, u)
        if not isinstance(u, Var) and not np.all(np.isfinite(u)):
            raise NonFiniteError("non-finite displacement during scaling and squaring")
    return u


# -- typed operations -----------------------------------------------------------


def integrate_scaling_squaring(v: VectorFieldGrid, steps: int = 7) -> VectorFieldGrid:
    if v.kind != VELOCITY:
        raise ValueError("integrate_scaling_squaring expects a velocity field")
    return VectorFieldGrid(integrate_velocity(v.data, steps), DISPLACEMENT)


def compose(outer: VectorFieldGrid, inner: VectorFieldGrid) -> VectorFieldGrid:
    return VectorFieldGrid(compose_fields(outer.data, inner.data), DISPLACEMENT)


def _as_disp(u) -> np.ndarray:
    if isinstance(u, DeformationField):
        return u.data
    if isinstance(u, VectorFieldGrid):
        return u.data
    return np.asarray(u, dtype=np.float64)


def warp_volume(ref, u, backend: str = "refnet", spacing=None) -> Volume:
    """Resample the reference at ``p + u(p)`` for every target grid point.

    ``ref`` is a RefNet (backend ``refnet``) or a Volume (backend ``trilinear``).
    Intensities are left unclamped.
    """
    from priorwarp.inr import RefNet, evaluate_chunked, refnet_eval

    disp = _as_disp(u)
    dims = disp.shape[:3]
    q = grid_points(dims) + disp
    if backend == "refnet":
        if not isinstance(ref, RefNet):
            raise ValueError("refnet backend requires a trained RefNet")
        out = evaluate_chunked(lambda pts: refnet_eval(ref, pts), q.reshape(-1, 3)).reshape(dims)
        return Volume(out, spacing or (1.0, 1.0, 1.0))
    if backend == "trilinear":
        if not isinstance(ref, Volume):
            raise ValueError("trilinear backend requires a reference Volume")
        if ref.dims != tuple(dims):
            raise GridMismatchError(f"reference grid {ref.dims} vs field grid {tuple(dims)}")
        return Volume(trilinear_sample(ref, q), spacing or ref.spacing)
    raise ValueError(f"unknown warp backend {backend!r}")


def jacobian_analysis(u, spacing=(1.0, 1.0, 1.0)) -> tuple[np.ndarray, int]:
    """Determinant of ``I + grad u`` per voxel and the count of voxels with det <= 0.

    Derivatives are taken in normalized units (central differences, one-sided
    at the borders).  The determinant is invariant to the per-axis physical
    scaling, so ``spacing`` does not change the result.
    """
    disp = _as_disp(u)
    dims = disp.shape[:3]
    if any(d < 3 for d in dims):
        raise ValueError(f"jacobian analysis needs at least 3 voxels per axis, got {dims}")
    steps = [1.0 / (d - 1) for d in dims]
    J = np.empty(dims + (3, 3))
    for c in range(3):
        grads = np.gradient(disp[..., c], *steps, edge_order=1)
        for a in range(3):
            J[..., c, a] = grads[a]
    J[..., 0, 0] += 1.0
    J[..., 1, 1] += 1.0
    J[..., 2, 2] += 1.0
    det = np.linalg.det(J)
    return det, int(np.count_nonzero(det <= 0))


def inverse_consistency(v: np.ndarray, steps: int = 7) -> float:
    """Mean residual of ``u(-v) o u(v)`` relative to the mean of ``|u(v)|``."""
    u = integrate_velocity(np.asarray(v), steps)
    u_neg = integrate_velocity(-np.asarray(v), steps)
    resid = compose_fields(u_neg, u)
    mean_u = np.mean(np.linalg.norm(u, axis=-1))
    if mean_u == 0:
        return 0.0
    return float(np.mean(np.linalg.norm(resid, axis=-1)) / mean_u)


def sample_displacement(u, points_vox: np.ndarray) -> np.ndarray:
    """Trilinear displacement (normalized units) at voxel-unit points (n, 3)."""
    disp = _as_disp(u)
    dims = disp.shape[:3]
    p = np.asarray(points_vox, dtype=np.float64) / (np.asarray(dims, dtype=np.float64) - 1)
    return np.stack([trilinear_sample(disp[..., c], p) for c in range(3)], axis=-1)


# -- serialization --------------------------------------------------------------


def save_field(header_path, f: VectorFieldGrid | DeformationField, provenance: dict | None = None) -> Path:
    header_path = Path(header_path)
    grid = f.displacement if isinstance(f, DeformationField) else f
    prov = dict(f.provenance) if isinstance(f, DeformationField) else {}
    prov.update(provenance or {})
    stem = header_path.with_suffix("")
    names = []
    for c, axis in enumerate("xyz"):
        raw = stem.parent / f"{stem.name}.{axis}.f64"
        np.asarray(grid.data[..., c], dtype="<f8").ravel(order="F").tofile(raw)
        names.append(raw.name)
    fields = {
        "dims": " ".join(str(d) for d in grid.dims),
        "kind": grid.kind,
        "units": "normalized",
        "datafiles": " ".join(names),
    }
    for k in sorted(prov):
        fields[f"provenance.{k}"] = prov[k]
    write_header(header_path, fields)
    return header_path


def load_field(header_path) -> DeformationField | VectorFieldGrid:
    header_path = Path(header_path)
    header = read_header(header_path)
    dims = tuple(int(x) for x in header["dims"].split())
    comps = []
    for name in header["datafiles"].split():
        raw = np.fromfile(header_path.parent / name, dtype="<f8")
        if raw.size != int(np.prod(dims)):
            raise ValueError(f"{name}: expected {int(np.prod(dims))} samples, found {raw.size}")
        comps.append(raw.reshape(dims, order="F"))
    grid = VectorFieldGrid(np.stack(comps, axis=-1), header.get("kind", DISPLACEMENT))
    if grid.kind == VELOCITY:
        return grid
    prov = {k[len("provenance."):]: v for k, v in header.items() if k.startswith("provenance.")}
    return DeformationField(grid, prov)


def displacement_to_voxels(u: np.ndarray) -> np.ndarray:
    return normalized_to_voxel(u, u.shape[:3])
