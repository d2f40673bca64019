"""Differentiable primitives.

Every op accepts `Var` or plain ndarray operands.  With no tracked operand it
returns a plain ndarray and records nothing, so the same network code serves
training and inference.  Adjoints are only formed for tracked operands.
"""

from __future__ import annotations

import numpy as np

from priorwarp.diffengine.tape import ShapeError, Var, tape_of, value
from priorwarp.volume import cell_coordinates


def _same_shape(a, b, op):
    sa, sb = np.shape(value(a)), np.shape(value(b))
    if sa != sb and sa != () and sb != ():
        raise ShapeError(f"{op}: shape mismatch {sa} vs {sb}")


def _reduce_to(g, shape):
    # scalar operands of add/sub/mul get summed adjoints
    return g if np.shape(g) == shape else np.sum(g).reshape(shape)


def add(a, b):
    _same_shape(a, b, "add")
    out = value(a) + value(b)
    tape = tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(value(a)), np.shape(value(b))
    return tape.record(out, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b):
    _same_shape(a, b, "sub")
    out = value(a) - value(b)
    tape = tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(value(a)), np.shape(value(b))
    return tape.record(out, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b):
    _same_shape(a, b, "mul")
    va, vb = value(a), value(b)
    tape = tape_of(a, b)
    if tape is None:
        return va * vb
    sa, sb = np.shape(va), np.shape(vb)

    def back(g):
        ga = _reduce_to(g * vb, sa) if isinstance(a, Var) else None
        gb = _reduce_to(g * va, sb) if isinstance(b, Var) else None
        return ga, gb

    return tape.record(va * vb, (a, b), back)


def scale(x, c: float):
    out = value(x) * c
    tape = tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g * c,))


def sine(x, omega: float = 1.0):
    """sin(omega * x)."""
    s = value(x) * omega if omega != 1.0 else value(x)
    out = np.sin(s)
    tape = tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g * (omega * np.cos(s)),))


def cosine(x, omega: float = 1.0):
    """cos(omega * x)."""
    s = value(x) * omega if omega != 1.0 else value(x)
    out = np.cos(s)
    tape = tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g * (-omega * np.sin(s)),))


def linear(x, W, b=None):
    """``x @ W.T + b`` for x of shape (n, in), W (out, in), b (out,)."""
    vx, vW = value(x), value(W)
    if vx.ndim != 2 or vW.ndim != 2 or vx.shape[1] != vW.shape[1]:
        raise ShapeError(f"linear: x {vx.shape} incompatible with W {vW.shape}")
    out = vx @ vW.T
    if b is not None:
        vb = value(b)
        if vb.shape != (vW.shape[0],):
            raise ShapeError(f"linear: bias {vb.shape} does not match W {vW.shape}")
        out += vb
    tape = tape_of(x, W, b)
    if tape is None:
        return out

    def back(g):
        gx = g @ vW if isinstance(x, Var) else None
        gW = g.T @ vx if isinstance(W, Var) else None
        gb = g.sum(axis=0) if isinstance(b, Var) else None
        return gx, gW, gb

    return tape.record(out, (x, W, b), back)


def concat(xs, axis: int = -1):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    tape = tape_of(*xs)
    if tape is None:
        return out
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return tape.record(out, tuple(xs), back)


def reshape(x, shape):
    vx = value(x)
    out = vx.reshape(shape)
    tape = tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g.reshape(vx.shape),))


def take_rows(x, idx):
    """Rows ``idx`` of x viewed as (n, c); grid fields are flattened first."""
    vx = value(x)
    flat = vx.reshape(-1, vx.shape[-1])
    idx = np.asarray(idx, dtype=np.intp)
    out = flat[idx]
    tape = tape_of(x)
    if tape is None:
        return out

    def back(g):
        gx = np.zeros_like(flat)
        np.add.at(gx, idx, g)
        return (gx.reshape(vx.shape),)

    return tape.record(out, (x,), back)


def mse(pred, target):
    """Mean of squared differences over all elements."""
    _same_shape(pred, target, "mse")
    diff = value(pred) - value(target)
    out = np.asarray(np.mean(diff * diff))
    tape = tape_of(pred, target)
    if tape is None:
        return out
    n = diff.size

    def back(g):
        d = (2.0 / n) * g * diff
        return (d if isinstance(pred, Var) else None, -d if isinstance(target, Var) else None)

    return tape.record(out, (pred, target), back)


def trilinear_grid_sample(field, p):
    """Sample a grid field at normalized points with edge clamping.

    ``field`` has shape (nx, ny, nz) or (nx, ny, nz, c); ``p`` has shape
    (..., 3).  Output shape is ``p.shape[:-1]`` (+ ``(c,)``).  The result is
    differentiable in both the field values and the coordinates; the
    coordinate derivative is zero along clamped axes.
    """
    vf, vp = value(field), value(p)
    if vf.ndim not in (3, 4) or vp.shape[-1:] != (3,):
        raise ShapeError(f"trilinear_grid_sample: field {vf.shape}, points {vp.shape}")
    scalar = vf.ndim == 3
    F = vf[..., None] if scalar else vf
    dims = F.shape[:3]
    nch = F.shape[3]
    pts = vp.reshape(-1, 3)
    cells = [cell_coordinates(pts[:, a] * (dims[a] - 1), dims[a]) for a in range(3)]
    (i, fx, inx), (j, fy, iny), (k, fz, inz) = cells
    wx = (1 - fx, fx)
    wy = (1 - fy, fy)
    wz = (1 - fz, fz)
    out = np.zeros((len(pts), nch))
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                out += (wx[a] * wy[b] * wz[c])[:, None] * F[i + a, j + b, k + c]
    shape = vp.shape[:-1] if scalar else vp.shape[:-1] + (nch,)
    result = out.reshape(shape)
    tape = tape_of(field, p)
    if tape is None:
        return result

    def back(g):
        g = g.reshape(len(pts), nch)
        gfield = gp = None
        if isinstance(field, Var):
            acc = np.zeros(F.size)
            chan = np.arange(nch)
            for a in (0, 1):
                for b in (0, 1):
                    for c in (0, 1):
                        flat = ((i + a) * dims[1] + (j + b)) * dims[2] + (k + c)
                        w = (wx[a] * wy[b] * wz[c])[:, None] * g
                        acc += np.bincount((flat[:, None] * nch + chan).ravel(),
                                           weights=w.ravel(), minlength=F.size)
            gfield = acc.reshape(vf.shape)
        if isinstance(p, Var):
            dx = np.zeros((len(pts), nch))
            dy = np.zeros((len(pts), nch))
            dz = np.zeros((len(pts), nch))
            sign = (-1.0, 1.0)
            for a in (0, 1):
                for b in (0, 1):
                    for c in (0, 1):
                        corner = F[i + a, j + b, k + c]
                        dx += (sign[a] * wy[b] * wz[c])[:, None] * corner
                        dy += (wx[a] * sign[b] * wz[c])[:, None] * corner
                        dz += (wx[a] * wy[b] * sign[c])[:, None] * corner
            gp = np.stack([
                np.sum(g * dx, axis=1) * (dims[0] - 1) * inx,
                np.sum(g * dy, axis=1) * (dims[1] - 1) * iny,
                np.sum(g * dz, axis=1) * (dims[2] - 1) * inz,
            ], axis=1).reshape(vp.shape)
        return gfield, gp

    return tape.record(result, (field, p), back)
