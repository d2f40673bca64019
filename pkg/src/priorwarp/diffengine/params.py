"""Named parameter arrays over one flat float64 buffer, and their checkpoint format.

Checkpoint = ``<stem>.manifest`` (text) + ``<stem>.f64`` (raw little-endian
float64: trainable arrays in manifest order, then fixed arrays).
"""

from __future__ import annotations

import hashlib
import math
from pathlib import Path

import numpy as np


class CheckpointError(ValueError):
    pass


class ParameterSet:
    """Trainable arrays as views into ``flat``; fixed arrays kept alongside."""

    def __init__(self, shapes: dict[str, tuple[int, ...]], seed: int | None = None,
                 fixed: dict[str, np.ndarray] | None = None):
        self.names = list(shapes)
        self.shapes = {k: tuple(int(d) for d in v) for k, v in shapes.items()}
        sizes = [math.prod(self.shapes[k]) for k in self.names]
        self.flat = np.zeros(sum(sizes), dtype=np.float64)
        self._views = {}
        offset = 0
        for name, size in zip(self.names, sizes):
            self._views[name] = self.flat[offset:offset + size].reshape(self.shapes[name])
            offset += size
        self.seed = seed
        self.fixed = {k: np.array(v, dtype=np.float64) for k, v in (fixed or {}).items()}

    def __getitem__(self, name) -> np.ndarray:
        if name in self._views:
            return self._views[name]
        return self.fixed[name]

    def __setitem__(self, name, arr):
        view = self._views[name]
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != view.shape:
            raise ValueError(f"{name}: shape {arr.shape} != {view.shape}")
        view[...] = arr

    def __len__(self):
        return self.flat.size

    def copy(self) -> "ParameterSet":
        other = ParameterSet(self.shapes, self.seed, self.fixed)
        other.flat[:] = self.flat
        return other

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: self._views[k] for k in self.names}

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat)))

    def digest(self) -> str:
        h = hashlib.sha256(self.flat.astype("<f8").tobytes())
        for name in sorted(self.fixed):
            h.update(self.fixed[name].astype("<f8").tobytes())
        return h.hexdigest()[:16]


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def save_checkpoint(stem, params: ParameterSet, meta: dict | None = None) -> Path:
    stem = Path(stem)
    manifest = stem.with_suffix(".manifest")
    raw = stem.with_suffix(".f64")
    lines = ["format=paramset-v1", f"seed={params.seed}"]
    for key, val in (meta or {}).items():
        lines.append(f"meta.{key}={_fmt(val)}")
    for name in params.names:
        lines.append(f"param {name} {','.join(map(str, params.shapes[name]))}")
    for name, arr in params.fixed.items():
        lines.append(f"fixed {name} {','.join(map(str, arr.shape))}")
    lines.append(f"datafile={raw.name}")
    lines.append(f"digest={params.digest()}")
    blob = [params.flat.astype("<f8")] + [a.astype("<f8").ravel() for a in params.fixed.values()]
    np.concatenate(blob).tofile(raw)
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_checkpoint(path) -> tuple[ParameterSet, dict[str, str]]:
    """Returns the ParameterSet and the raw ``meta.*`` strings."""
    manifest = Path(path)
    if manifest.suffix != ".manifest":
        manifest = manifest.with_suffix(".manifest")
    if not manifest.is_file():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest}")
    shapes, fixed_shapes, meta = {}, {}, {}
    seed, datafile = None, None
    for line in manifest.read_text().splitlines():
        if line.startswith("param ") or line.startswith("fixed "):
            kind, name, dims = line.split()
            shape = tuple(int(d) for d in dims.split(",") if d)
            (shapes if kind == "param" else fixed_shapes)[name] = shape
        elif line.startswith("meta."):
            key, val = line[5:].split("=", 1)
            meta[key] = val
        elif line.startswith("seed="):
            s = line.split("=", 1)[1]
            seed = None if s == "None" else int(s)
        elif line.startswith("datafile="):
            datafile = line.split("=", 1)[1]
        elif line.startswith("format=") and line != "format=paramset-v1":
            raise CheckpointError(f"{manifest}: unsupported {line}")
    if datafile is None:
        raise CheckpointError(f"{manifest}: no datafile entry")
    data = np.fromfile(manifest.parent / datafile, dtype="<f8")
    n_train = sum(math.prod(s) for s in shapes.values())
    n_fixed = sum(math.prod(s) for s in fixed_shapes.values())
    if data.size != n_train + n_fixed:
        raise CheckpointError(f"{manifest}: expected {n_train + n_fixed} values, found {data.size}")
    fixed, offset = {}, n_train
    for name, shape in fixed_shapes.items():
        size = math.prod(shape)
        fixed[name] = data[offset:offset + size].reshape(shape)
        offset += size
    params = ParameterSet(shapes, seed, fixed)
    params.flat[:] = data[:n_train]
    return params, meta
