"""Two-stage fitting: the reference prior first, then the deformation network
trained through the frozen prior.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from priorwarp.diffengine import (
    AdamState,
    NonFiniteError,
    Tape,
    adam_step,
    add,
    backward,
    flat_grad,
    mse,
    reshape,
    scale,
    take_rows,
    trilinear_grid_sample,
)
from priorwarp.diffeo import DeformationField, VectorFieldGrid, integrate_velocity, warp_volume
from priorwarp.inr import PAIRWISE, TEMPORAL, DefNet, RefNet, defnet_eval, evaluate_chunked, refnet_eval
from priorwarp.volume import ImageSequence, Volume, grid_points

log = logging.getLogger("priorwarp.trainer")

WARP_BACKENDS = ("refnet", "trilinear")
TIME_SAMPLING = ("round_robin", "random")


class TrainingDiverged(RuntimeError):
    """Non-finite loss or gradient; ``net`` holds the last finite parameters."""

    def __init__(self, msg, net=None, record=None):
        super().__init__(msg)
        self.net = net
        self.record = record


@dataclass
class TrainConfig:
    iterations_ref: int = 2000
    iterations_def: int = 2000
    lr_ref: float = 1e-4
    lr_def: float = 1e-5
    batch_size: int = 10000
    seed: int = 0
    steps_scaling_squaring: int = 7
    mode: str = TEMPORAL
    warp_backend: str = "refnet"
    deterministic_reduction: bool = True
    depth: int = 8
    width: int = 256
    def_depth: int = 8
    def_width: int = 256
    fourier_features: int = 256
    sigma: float = 3.0
    omega0: float = 30.0
    time_sampling: str = "round_robin"
    chunk_size: int = 0  # coordinates per independent tape in the prior stage; 0 = whole batch
    threads: int = 1
    allow_extrapolation: bool = False
    log_every: int = 100

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.lr_ref > 0 or not self.lr_def > 0:
            raise ValueError("learning rates must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations_ref < 0 or self.iterations_def < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.steps_scaling_squaring < 1:
            raise ValueError("steps_scaling_squaring must be >= 1")
        if self.mode not in (TEMPORAL, PAIRWISE):
            raise ValueError(f"mode must be temporal or pairwise, got {self.mode!r}")
        if self.warp_backend not in WARP_BACKENDS:
            raise ValueError(f"warp_backend must be one of {WARP_BACKENDS}, got {self.warp_backend!r}")
        if self.time_sampling not in TIME_SAMPLING:
            raise ValueError(f"time_sampling must be one of {TIME_SAMPLING}")
        for name in ("depth", "width", "def_depth", "def_width", "fourier_features", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.fourier_features % 2:
            raise ValueError("fourier_features must be even")
        if self.chunk_size < 0:
            raise ValueError("chunk_size must be >= 0")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class TrainRecord:
    stage: str
    losses: list[float] = field(default_factory=list)
    times: list[int] = field(default_factory=list)  # scan time used per iteration (deformation stage)
    wall_clock: float = 0.0
    initial_checkpoint: str = ""
    final_checkpoint: str = ""

    def to_csv(self) -> str:
        rows = ["iteration,loss" + (",t" if self.times else "")]
        for i, loss in enumerate(self.losses):
            row = f"{i + 1},{loss!r}"
            if self.times:
                row += f",{self.times[i]}"
            rows.append(row)
        return "\n".join(rows) + "\n"

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path

    def moving_average(self, window: int = 100) -> np.ndarray:
        losses = np.asarray(self.losses)
        if len(losses) < window:
            return losses.copy()
        kernel = np.ones(window) / window
        return np.convolve(losses, kernel, mode="valid")


class EpochSampler:
    """Indices drawn without replacement, reshuffled once the epoch is used up."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.perm = rng.permutation(n)
        self.cursor = 0

    def next(self, size: int) -> np.ndarray:
        size = min(size, self.n)
        if self.cursor + size > self.n:
            self.perm = self.rng.permutation(self.n)
            self.cursor = 0
        out = self.perm[self.cursor:self.cursor + size]
        self.cursor += size
        return out


def _stage_rng(seed: int, stage: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stage]))


def _check_finite_loss(loss, net, last_good, record, stage):
    if not np.isfinite(loss):
        net.params.flat[:] = last_good
        raise TrainingDiverged(f"{stage}: non-finite loss at iteration {len(record.losses) + 1}",
                               net, record)


def _log_progress(stage, it, total, loss, every):
    if every and ((it + 1) % every == 0 or it + 1 == total):
        log.info("%s %d/%d loss=%.6g", stage, it + 1, total, loss)


# -- prior embedding --------------------------------------------------------------


def _refnet_chunk_grad(net: RefNet, pts, vals, weight):
    tape = Tape()
    leaves = tape.watch(net.params)
    loss = scale(mse(refnet_eval(net, pts, leaves), vals), weight)
    backward(tape, loss)
    return float(loss.value), flat_grad(leaves, net.params)


def refnet_loss_and_grad(net: RefNet, pts: np.ndarray, vals: np.ndarray, cfg: TrainConfig,
                         pool: ThreadPoolExecutor | None = None) -> tuple[float, np.ndarray]:
    """Batch MSE and its gradient, optionally split over independent tapes."""
    n = len(pts)
    chunk = cfg.chunk_size or n
    bounds = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    jobs = [(pts[a:b], vals[a:b], (b - a) / n) for a, b in bounds]
    if len(jobs) == 1:
        return _refnet_chunk_grad(net, *jobs[0])
    if pool is None:
        results = [_refnet_chunk_grad(net, *job) for job in jobs]
    else:
        futures = [pool.submit(_refnet_chunk_grad, net, *job) for job in jobs]
        if cfg.deterministic_reduction:
            results = [f.result() for f in futures]
        else:
            results = [f.result() for f in as_completed(futures)]
    loss = 0.0
    grad = np.zeros(len(net.params))
    for part_loss, part_grad in results:
        loss += part_loss
        grad += part_grad
    return loss, grad


def train_refnet(f_r: Volume, cfg: TrainConfig) -> tuple[RefNet, TrainRecord]:
    """Fit the reference network to every coordinate/intensity pair of ``f_r``."""
    start = time.perf_counter()
    net = RefNet.create(cfg.depth, cfg.width, cfg.fourier_features, cfg.sigma, cfg.omega0, seed=cfg.seed)
    record = TrainRecord("refnet", initial_checkpoint=net.params.digest())
    pts = grid_points(f_r.dims).reshape(-1, 3)
    vals = f_r.data.reshape(-1)
    sampler = EpochSampler(len(pts), _stage_rng(cfg.seed, 1))
    state = AdamState.for_params(net.params)
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 and cfg.chunk_size else None
    try:
        for it in range(cfg.iterations_ref):
            idx = np.sort(sampler.next(cfg.batch_size))
            last_good = net.params.flat.copy()
            try:
                loss, grad = refnet_loss_and_grad(net, pts[idx], vals[idx], cfg, pool)
                _check_finite_loss(loss, net, last_good, record, "refnet")
                adam_step(net.params, grad, state, cfg.lr_ref)
            except NonFiniteError as exc:
                net.params.flat[:] = last_good
                raise TrainingDiverged(f"refnet: {exc}", net, record) from exc
            record.losses.append(loss)
            _log_progress("refnet", it, cfg.iterations_ref, loss, cfg.log_every)
    finally:
        if pool is not None:
            pool.shutdown()
    record.wall_clock = time.perf_counter() - start
    record.final_checkpoint = net.params.digest()
    return net, record


def render_refnet(net: RefNet, dims, spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Evaluate the reference network at every voxel (unclamped)."""
    pts = grid_points(dims).reshape(-1, 3)
    return Volume(evaluate_chunked(lambda p: refnet_eval(net, p), pts).reshape(dims), spacing)


# -- deformation learning -----------------------------------------------------------


def training_times(seq: ImageSequence, mode: str) -> list[int]:
    if mode == TEMPORAL:
        return list(seq.times)
    targets = [t for t in seq.times if t != seq.reference_index]
    if len(targets) != 1:
        raise ValueError(f"pairwise mode needs exactly one target volume, got {len(targets)}")
    return targets


def _deformation_loss(defnet, leaves, refnet, ref_volume, P, P_flat, idx, target, t, cfg):
    dims = P.shape[:3]
    v = reshape(defnet_eval(defnet, P_flat, t, leaves), dims + (3,))
    u = integrate_velocity(v, cfg.steps_scaling_squaring)
    q = add(P_flat[idx], take_rows(u, idx))
    if cfg.warp_backend == "refnet":
        pred = refnet_eval(refnet, q)
    else:
        pred = trilinear_grid_sample(ref_volume.data, q)
    return mse(pred, target)


def train_defnet(seq: ImageSequence, refnet: RefNet | None, cfg: TrainConfig) -> tuple[DefNet, TrainRecord]:
    """Fit the deformation network so that warped prior intensities match every training frame.

    The prior's parameters are constants here; only its input coordinates
    carry gradient.  With ``warp_backend='trilinear'`` the reference volume is
    resampled directly instead.
    """
    start = time.perf_counter()
    if cfg.warp_backend == "refnet" and refnet is None:
        raise ValueError("refnet backend requires a trained RefNet")
    times = training_times(seq, cfg.mode)
    defnet = DefNet.create(cfg.mode, seq.time_span, cfg.def_depth, cfg.def_width, cfg.fourier_features,
                           cfg.sigma, cfg.omega0, seed=cfg.seed + 1)
    record = TrainRecord("defnet", initial_checkpoint=defnet.params.digest())
    dims = seq.dims
    P = grid_points(dims)
    P_flat = P.reshape(-1, 3)
    rng = _stage_rng(cfg.seed, 2)
    samplers = {t: EpochSampler(len(P_flat), rng) for t in times}
    targets = {t: seq.at(t).data.reshape(-1) for t in times}
    ref_volume = seq.reference
    state = AdamState.for_params(defnet.params)
    for it in range(cfg.iterations_def):
        if cfg.time_sampling == "round_robin":
            t = times[it % len(times)]
        else:
            t = times[int(rng.integers(len(times)))]
        idx = np.sort(samplers[t].next(cfg.batch_size))
        last_good = defnet.params.flat.copy()
        try:
            tape = Tape()
            leaves = tape.watch(defnet.params)
            loss = _deformation_loss(defnet, leaves, refnet, ref_volume, P, P_flat, idx,
                                     targets[t][idx], t, cfg)
            backward(tape, loss)
            loss_val = float(loss.value)
            _check_finite_loss(loss_val, defnet, last_good, record, "defnet")
            adam_step(defnet.params, flat_grad(leaves, defnet.params), state, cfg.lr_def)
        except NonFiniteError as exc:
            defnet.params.flat[:] = last_good
            raise TrainingDiverged(f"defnet: {exc}", defnet, record) from exc
        record.losses.append(loss_val)
        record.times.append(t)
        _log_progress("defnet", it, cfg.iterations_def, loss_val, cfg.log_every)
    record.wall_clock = time.perf_counter() - start
    record.final_checkpoint = defnet.params.digest()
    return defnet, record


# -- prediction -----------------------------------------------------------------------


def velocity_on_grid(defnet: DefNet, t, dims, allow_extrapolation: bool = False) -> np.ndarray:
    P_flat = grid_points(dims).reshape(-1, 3)
    v = evaluate_chunked(lambda p: defnet_eval(defnet, p, t, allow_extrapolation=allow_extrapolation), P_flat)
    return v.reshape(tuple(dims) + (3,))


def predict_field(defnet: DefNet, t, dims, steps: int = 7, allow_extrapolation: bool = False) -> DeformationField:
    v = velocity_on_grid(defnet, t, dims, allow_extrapolation)
    u = integrate_velocity(v, steps)
    return DeformationField(VectorFieldGrid(u), {"defnet": defnet.params.digest(), "t": repr(float(t)) if t is not None else "none",
                                                 "steps": steps})


def predict_image(refnet: RefNet | None, defnet: DefNet, t, grid, backend: str = "refnet",
                  ref_volume: Volume | None = None, steps: int = 7,
                  allow_extrapolation: bool = False) -> tuple[Volume, DeformationField]:
    """Predicted volume and its displacement at time ``t`` (integer or not)."""
    dims = grid.dims if isinstance(grid, Volume) else tuple(grid)
    spacing = grid.spacing if isinstance(grid, Volume) else (ref_volume.spacing if ref_volume else (1.0, 1.0, 1.0))
    field_ = predict_field(defnet, t, dims, steps, allow_extrapolation)
    source = refnet if backend == "refnet" else ref_volume
    return warp_volume(source, field_, backend, spacing), field_


def register_pair(ref: Volume, target: Volume, cfg: TrainConfig, return_models: bool = False,
                  refnet: RefNet | None = None):
    """Pairwise registration: displacement taking target coordinates to reference coordinates.

    A prior already fitted to ``ref`` may be passed in to skip the embedding stage.
    """
    if ref.dims != target.dims:
        raise ValueError(f"grid mismatch: {ref.dims} vs {target.dims}")
    cfg = cfg.replace(mode=PAIRWISE)
    seq = ImageSequence([ref, target], [1, 2], reference_index=1)
    ref_record = None
    if cfg.warp_backend != "refnet":
        refnet = None
    elif refnet is None:
        refnet, ref_record = train_refnet(ref, cfg)
    defnet, def_record = train_defnet(seq, refnet, cfg)
    field_ = predict_field(defnet, None, ref.dims, cfg.steps_scaling_squaring)
    if return_models:
        return field_, refnet, defnet, ref_record, def_record
    return field_
