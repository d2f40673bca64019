"""Volume, mask, landmark and sequence containers plus their on-disk formats.

Arrays are held as numpy arrays of shape ``(nx, ny, nz)`` indexed ``[i, j, k]``.
Raw files on disk are x-fastest, little-endian.  Normalized coordinates map a
voxel index to ``idx / (dim - 1)`` per axis, so both corner voxels sit exactly
on 0 and 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DTYPES = {"f64le": np.dtype("<f8"), "f32le": np.dtype("<f4"), "i16le": np.dtype("<i2"), "u8": np.dtype("u1")}


class VolumeFormatError(ValueError):
    pass


def _check_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 2 for d in dims):
        raise VolumeFormatError(f"dims must be three integers >= 2, got {dims}")
    return dims


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(not s > 0 for s in spacing):
        raise VolumeFormatError(f"spacing must be three positive floats, got {spacing}")
    return spacing


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        _check_dims(data.shape)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def clamped(self) -> "Volume":
        """Copy with intensities clamped to [0, 1] (export view)."""
        return Volume(np.clip(self.data, 0.0, 1.0), self.spacing)


@dataclass(frozen=True)
class Mask:
    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise VolumeFormatError("mask labels must be integers")
        if labels.size and labels.min() < 0:
            raise VolumeFormatError("mask labels must be non-negative")
        labels = labels.astype(np.int64)
        _check_dims(labels.shape)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class LandmarkSet:
    points: np.ndarray  # (n, 3) voxel-index coordinates

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def count(self) -> int:
        return len(self.points)

    def check_within(self, dims) -> None:
        upper = np.asarray(dims, dtype=np.float64) - 1
        if np.any(self.points < 0) or np.any(self.points > upper):
            raise VolumeFormatError("landmark outside grid")


@dataclass
class ImageSequence:
    volumes: list[Volume]
    times: list[int]
    reference_index: int = 1  # the time index of the reference scan
    time_span: tuple[int, int] | None = None  # (1, T); defaults to (times[0], times[-1])

    def __post_init__(self):
        if len(self.volumes) != len(self.times):
            raise ValueError("volumes and times differ in length")
        if len(self.volumes) < 2:
            raise ValueError("a sequence needs at least two volumes")
        self.times = [int(t) for t in self.times]
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("times must be strictly increasing")
        first = self.volumes[0]
        for v in self.volumes[1:]:
            if v.dims != first.dims or v.spacing != first.spacing:
                raise ValueError("grid mismatch between sequence members")
        if self.reference_index not in self.times:
            raise ValueError(f"reference time {self.reference_index} not in sequence")
        if self.time_span is None:
            self.time_span = (self.times[0], self.times[-1])
        lo, hi = self.time_span
        if hi <= lo or self.times[0] < lo or self.times[-1] > hi:
            raise ValueError(f"time span {self.time_span} does not cover {self.times}")

    @property
    def dims(self):
        return self.volumes[0].dims

    @property
    def spacing(self):
        return self.volumes[0].spacing

    @property
    def reference(self) -> Volume:
        return self.at(self.reference_index)

    def at(self, t: int) -> Volume:
        return self.volumes[self.times.index(int(t))]

    def without(self, t: int) -> "ImageSequence":
        keep = [i for i, tt in enumerate(self.times) if tt != t]
        return ImageSequence(
            [self.volumes[i] for i in keep],
            [self.times[i] for i in keep],
            self.reference_index,
            self.time_span,
        )


# -- coordinates ---------------------------------------------------------------


def voxel_to_normalized(idx, dims) -> np.ndarray:
    dims = np.asarray(_check_dims(dims), dtype=np.float64)
    return np.asarray(idx, dtype=np.float64) / (dims - 1)


def normalized_to_voxel(p, dims) -> np.ndarray:
    dims = np.asarray(_check_dims(dims), dtype=np.float64)
    return np.asarray(p, dtype=np.float64) * (dims - 1)


def grid_points(dims) -> np.ndarray:
    """Normalized coordinates of every voxel, shape ``(nx, ny, nz, 3)``."""
    axes = [np.arange(d, dtype=np.float64) / (d - 1) for d in _check_dims(dims)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def normalize_intensity(v: Volume, window: tuple[float, float]) -> Volume:
    lo, hi = float(window[0]), float(window[1])
    if not hi > lo:
        raise ValueError(f"intensity window needs hi > lo, got {window}")
    return Volume(np.clip((v.data - lo) / (hi - lo), 0.0, 1.0), v.spacing)


def cell_coordinates(x: np.ndarray, dim: int):
    """Lower corner index, fractional offset and in-range flag along one axis.

    ``x`` is in voxel units.  Out-of-range values are clamped to the border.
    A coordinate falling exactly on an interior node belongs to the cell below
    it, which fixes the one-sided derivative used there.
    """
    # idx / (dim - 1) * (dim - 1) is not always idx in floating point
    nearest = np.rint(x)
    x = np.where(np.abs(x - nearest) <= 8 * np.finfo(np.float64).eps * np.maximum(np.abs(x), 1.0), nearest, x)
    inside = (x >= 0) & (x <= dim - 1)
    xc = np.clip(x, 0.0, dim - 1)
    i0 = np.clip(np.ceil(xc) - 1, 0, dim - 2).astype(np.intp)
    return i0, xc - i0, inside


def trilinear_sample(v: Volume | np.ndarray, p) -> np.ndarray:
    """Trilinear blend of a scalar grid at normalized points ``p`` (..., 3)."""
    data = v.data if isinstance(v, Volume) else np.asarray(v, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    dims = data.shape[:3]
    i, fx, _ = cell_coordinates(p[..., 0] * (dims[0] - 1), dims[0])
    j, fy, _ = cell_coordinates(p[..., 1] * (dims[1] - 1), dims[1])
    k, fz, _ = cell_coordinates(p[..., 2] * (dims[2] - 1), dims[2])
    out = 0.0
    for a, wx in ((0, 1 - fx), (1, fx)):
        for b, wy in ((0, 1 - fy), (1, fy)):
            for c, wz in ((0, 1 - fz), (1, fz)):
                out = out + wx * wy * wz * data[i + a, j + b, k + c]
    return np.asarray(out)


# -- file formats -------------------------------------------------------------


def read_header(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"header not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise VolumeFormatError(f"{path}:{lineno}: expected 'key: value'")
        key, value = line.split(":", 1)
        out[key.strip()] = value.strip()
    return out


def write_header(path, fields: dict) -> None:
    Path(path).write_text("".join(f"{k}: {v}\n" for k, v in fields.items()))


def _fmt_floats(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def _read_raw(header_path: Path, header: dict) -> tuple[np.ndarray, tuple]:
    for key in ("dims", "spacing", "dtype", "datafile"):
        if key not in header:
            raise VolumeFormatError(f"{header_path}: missing header key '{key}'")
    try:
        dims = tuple(int(x) for x in header["dims"].replace(",", " ").split())
        spacing = tuple(float(x) for x in header["spacing"].replace(",", " ").split())
    except ValueError as exc:
        raise VolumeFormatError(f"{header_path}: {exc}") from None
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise VolumeFormatError(f"{header_path}: non-positive dims {dims}")
    _check_dims(dims)
    _check_spacing(spacing)
    dtype = DTYPES.get(header["dtype"])
    if dtype is None:
        raise VolumeFormatError(f"{header_path}: unknown dtype '{header['dtype']}'")
    raw_path = header_path.parent / header["datafile"]
    if not raw_path.is_file():
        raise FileNotFoundError(f"raw data file not found: {raw_path}")
    raw = np.fromfile(raw_path, dtype=dtype)
    expected = dims[0] * dims[1] * dims[2]
    if raw.size != expected or raw_path.stat().st_size != expected * dtype.itemsize:
        raise VolumeFormatError(
            f"{raw_path}: expected {expected} samples of {header['dtype']}, found {raw.size}"
        )
    return raw.reshape(dims, order="F"), spacing


def load_volume(header_path) -> Volume:
    header_path = Path(header_path)
    data, spacing = _read_raw(header_path, read_header(header_path))
    return Volume(data.astype(np.float64), spacing)


def save_volume(header_path, v: Volume, dtype: str = "f64le", extra: dict | None = None) -> Path:
    """Write header + raw file.  ``f32le`` round-trips only float32-representable data."""
    header_path = Path(header_path)
    raw_path = header_path.with_suffix(".raw")
    arr = v.data if isinstance(v, Volume) else np.asarray(v)
    np.asarray(arr, dtype=DTYPES[dtype]).ravel(order="F").tofile(raw_path)
    fields = {
        "dims": " ".join(str(d) for d in arr.shape),
        "spacing": _fmt_floats(v.spacing),
        "dtype": dtype,
        "datafile": raw_path.name,
    }
    fields.update(extra or {})
    write_header(header_path, fields)
    return header_path


def load_mask(header_path) -> Mask:
    header_path = Path(header_path)
    header = read_header(header_path)
    if header.get("dtype") != "u8":
        raise VolumeFormatError(f"{header_path}: masks must use dtype u8")
    data, spacing = _read_raw(header_path, header)
    return Mask(data.astype(np.int64), spacing)


def save_mask(header_path, m: Mask, extra: dict | None = None) -> Path:
    if m.labels.max(initial=0) > 255:
        raise VolumeFormatError("mask labels exceed u8 range")
    header_path = Path(header_path)
    raw_path = header_path.with_suffix(".raw")
    m.labels.astype("u1").ravel(order="F").tofile(raw_path)
    fields = {
        "dims": " ".join(str(d) for d in m.dims),
        "spacing": _fmt_floats(m.spacing),
        "dtype": "u8",
        "datafile": raw_path.name,
    }
    fields.update(extra or {})
    write_header(header_path, fields)
    return header_path


def load_landmarks(path) -> LandmarkSet:
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3:
            raise VolumeFormatError(f"{path}:{lineno}: expected 'x y z'")
        rows.append([float(x) for x in parts])
    return LandmarkSet(np.array(rows, dtype=np.float64).reshape(-1, 3))


def save_landmarks(path, lm: LandmarkSet) -> None:
    Path(path).write_text("".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in lm.points.tolist()))


def load_sequence(manifest_path) -> ImageSequence:
    """Sequence manifest: ``reference=<t>``, optional ``span=<lo> <hi>``, then ``<t> <header>`` lines."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"sequence manifest not found: {manifest_path}")
    reference, span, times, vols = None, None, [], []
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("reference="):
            reference = int(line.split("=", 1)[1])
        elif line.startswith("span="):
            lo, hi = line.split("=", 1)[1].split()
            span = (int(lo), int(hi))
        else:
            parts = line.split(None, 1)
            if len(parts) != 2:
                raise VolumeFormatError(f"{manifest_path}:{lineno}: expected '<t> <header path>'")
            times.append(int(parts[0]))
            vols.append(load_volume(manifest_path.parent / parts[1]))
    if not times:
        raise VolumeFormatError(f"{manifest_path}: empty sequence")
    return ImageSequence(vols, times, times[0] if reference is None else reference, span)


def save_sequence_manifest(path, entries: Sequence[tuple[int, str]], reference: int,
                           span: tuple[int, int] | None = None) -> None:
    lines = [f"reference={reference}\n"]
    if span is not None:
        lines.append(f"span={span[0]} {span[1]}\n")
    lines += [f"{t} {p}\n" for t, p in entries]
    Path(path).write_text("".join(lines))
