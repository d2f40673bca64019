"""Coordinate networks: Gaussian Fourier features feeding a sine-activated MLP.

`RefNet` maps a normalized position to an intensity.  `DefNet` maps a
position (and, in temporal mode, a normalized scan time) to a stationary
velocity vector in normalized-coordinate units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from priorwarp.diffengine import (
    NonFiniteError,
    ParameterSet,
    Var,
    concat,
    cosine,
    linear,
    load_checkpoint,
    reshape,
    save_checkpoint,
    sine,
)

TEMPORAL = "temporal"
PAIRWISE = "pairwise"


@dataclass(frozen=True)
class FourierEncoder:
    B: np.ndarray  # (n_freq, d_in), never trained
    sigma: float
    seed: int | None = None

    @classmethod
    def create(cls, d_in: int, n_features: int = 256, sigma: float = 3.0, seed=None) -> "FourierEncoder":
        if n_features % 2:
            raise ValueError("Fourier feature width must be even")
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, sigma, size=(n_features // 2, d_in)), float(sigma), seed)

    @property
    def d_in(self) -> int:
        return self.B.shape[1]

    @property
    def out_dim(self) -> int:
        return 2 * self.B.shape[0]


def fourier_encode(enc: FourierEncoder, p):
    """``[cos(2 pi B p), sin(2 pi B p)]`` for a batch of points (n, d_in)."""
    z = linear(p, 2 * np.pi * enc.B)
    return concat([cosine(z), sine(z)], axis=-1)


@dataclass(frozen=True)
class SirenMLP:
    in_dim: int
    out_dim: int
    depth: int = 8
    width: int = 256
    omega0: float = 30.0

    def shapes(self) -> dict[str, tuple[int, int]]:
        shapes = {}
        fan_in = self.in_dim
        for layer in range(self.depth + 1):
            fan_out = self.out_dim if layer == self.depth else self.width
            shapes[f"l{layer}.W"] = (fan_out, fan_in)
            shapes[f"l{layer}.b"] = (fan_out,)
            fan_in = fan_out
        return shapes

    def initialize(self, params: ParameterSet, rng: np.random.Generator, zero_last: bool) -> None:
        for layer in range(self.depth + 1):
            W = params[f"l{layer}.W"]
            fan_in = W.shape[1]
            if layer == 0:
                bound = 1.0 / fan_in
            else:
                bound = np.sqrt(6.0 / fan_in) / self.omega0
            if layer == self.depth and zero_last:
                params[f"l{layer}.W"] = 0.0 * W
                params[f"l{layer}.b"] = 0.0 * params[f"l{layer}.b"]
                continue
            params[f"l{layer}.W"] = rng.uniform(-bound, bound, size=W.shape)
            bb = 1.0 / np.sqrt(fan_in)
            params[f"l{layer}.b"] = rng.uniform(-bb, bb, size=W.shape[0])

    def forward(self, weights, h):
        """``weights`` maps layer names to arrays or tape leaves."""
        for layer in range(self.depth):
            h = sine(linear(h, weights[f"l{layer}.W"], weights[f"l{layer}.b"]), self.omega0)
        return linear(h, weights[f"l{self.depth}.W"], weights[f"l{self.depth}.b"])


class CoordinateNet:
    kind = "coordnet"

    def __init__(self, encoder: FourierEncoder, mlp: SirenMLP, params: ParameterSet):
        self.encoder = encoder
        self.mlp = mlp
        self.params = params

    @classmethod
    def _build(cls, d_in, out_dim, *, depth, width, n_features, sigma, omega0, seed, zero_last):
        enc_seq, mlp_seq = np.random.SeedSequence(seed).spawn(2)
        encoder = FourierEncoder.create(d_in, n_features, sigma, seed=np.random.default_rng(enc_seq))
        mlp = SirenMLP(encoder.out_dim, out_dim, depth, width, omega0)
        params = ParameterSet(mlp.shapes(), seed=seed, fixed={"fourier.B": encoder.B})
        encoder = FourierEncoder(params.fixed["fourier.B"], float(sigma), seed)
        mlp.initialize(params, np.random.default_rng(mlp_seq), zero_last)
        return encoder, mlp, params

    def weights(self, leaves=None):
        return self.params.arrays() if leaves is None else leaves

    def _run(self, x, leaves):
        out = self.mlp.forward(self.weights(leaves), fourier_encode(self.encoder, x))
        if not isinstance(out, Var) and not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{self.kind} produced non-finite output")
        return out

    def meta(self) -> dict:
        return {
            "kind": self.kind,
            "d_in": self.encoder.d_in,
            "out_dim": self.mlp.out_dim,
            "depth": self.mlp.depth,
            "width": self.mlp.width,
            "omega0": float(self.mlp.omega0),
            "sigma": float(self.encoder.sigma),
            "fourier_features": self.encoder.out_dim,
            "encoder_seed": self.params.seed,
        }

    def save(self, stem, extra: dict | None = None):
        meta = self.meta()
        meta.update(extra or {})
        return save_checkpoint(stem, self.params, meta)


class RefNet(CoordinateNet):
    kind = "refnet"

    @classmethod
    def create(cls, depth=8, width=256, n_features=256, sigma=3.0, omega0=30.0, seed=0) -> "RefNet":
        return cls(*cls._build(3, 1, depth=depth, width=width, n_features=n_features, sigma=sigma,
                               omega0=omega0, seed=seed, zero_last=False))


class DefNet(CoordinateNet):
    kind = "defnet"

    def __init__(self, encoder, mlp, params, mode=TEMPORAL, time_span=(1, 2)):
        super().__init__(encoder, mlp, params)
        if mode not in (TEMPORAL, PAIRWISE):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.time_span = (int(time_span[0]), int(time_span[1]))
        if self.time_span[1] <= self.time_span[0]:
            raise ValueError(f"degenerate time span {time_span}")

    @classmethod
    def create(cls, mode=TEMPORAL, time_span=(1, 2), depth=8, width=256, n_features=256,
               sigma=3.0, omega0=30.0, seed=0) -> "DefNet":
        d_in = 4 if mode == TEMPORAL else 3
        parts = cls._build(d_in, 3, depth=depth, width=width, n_features=n_features, sigma=sigma,
                           omega0=omega0, seed=seed, zero_last=True)
        return cls(*parts, mode=mode, time_span=time_span)

    def normalized_time(self, t, allow_extrapolation: bool = False):
        lo, hi = self.time_span
        t = np.asarray(t, dtype=np.float64)
        if not allow_extrapolation and (np.any(t < lo) or np.any(t > hi)):
            raise ValueError(f"time {t} outside [{lo}, {hi}] (pass allow_extrapolation to extend)")
        return (t - lo) / (hi - lo)

    def meta(self) -> dict:
        meta = super().meta()
        meta.update(mode=self.mode, time_lo=self.time_span[0], time_hi=self.time_span[1])
        return meta


def refnet_eval(net: RefNet, p, leaves=None):
    """Intensity at each point of a batch (n, 3); shape (n,)."""
    out = net._run(p, leaves)
    n = (p.value if isinstance(p, Var) else np.asarray(p)).shape[0]
    return reshape(out, (n,))


def defnet_eval(net: DefNet, p, t=None, leaves=None, allow_extrapolation: bool = False):
    """Velocity (n, 3) at points (n, 3) and time t (scalar or (n,) array)."""
    if net.mode == PAIRWISE:
        return net._run(p, leaves)
    if t is None:
        raise ValueError("temporal Def-Net needs a time argument")
    n = (p.value if isinstance(p, Var) else np.asarray(p)).shape[0]
    tn = np.broadcast_to(net.normalized_time(t, allow_extrapolation), (n,)).reshape(n, 1)
    return net._run(concat([p, tn], axis=-1), leaves)


def evaluate_chunked(fn, points: np.ndarray, chunk: int = 32768) -> np.ndarray:
    """Apply an untracked batch function over (n, d) points in slices."""
    pieces = [fn(points[s:s + chunk]) for s in range(0, len(points), chunk)]
    return np.concatenate(pieces, axis=0)


def load_network(path) -> RefNet | DefNet:
    params, meta = load_checkpoint(path)
    kind = meta.get("kind")
    B = params.fixed["fourier.B"]
    seed = params.seed
    encoder = FourierEncoder(B, float(meta["sigma"]), seed)
    mlp = SirenMLP(encoder.out_dim, int(meta["out_dim"]), int(meta["depth"]), int(meta["width"]),
                   float(meta["omega0"]))
    if set(mlp.shapes()) != set(params.names):
        raise ValueError(f"{path}: parameter names do not match a depth-{mlp.depth} network")
    if kind == RefNet.kind:
        return RefNet(encoder, mlp, params)
    if kind == DefNet.kind:
        return DefNet(encoder, mlp, params, meta["mode"], (int(meta["time_lo"]), int(meta["time_hi"])))
    raise ValueError(f"{path}: unknown network kind {kind!r}")
