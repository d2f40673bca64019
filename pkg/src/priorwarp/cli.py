"""``priorwarp`` command line: phantom | embed | train | interp | register | propagate | eval.

Every command reads an optional key=value config (``--config``), applies
``--set key=value`` overrides, echoes the resolved settings to the output
directory and stamps the config digest into each artifact it writes.
Exit status: 0 success, 1 usage/config/input error, 2 runtime or training failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from priorwarp import plotting
from priorwarp.analysis import MetricsReport, evaluate, propagate_roi, psnr, ssim3d
from priorwarp.config import ConfigError, RunConfig, build_config, digest, echo, parse_pairs
from priorwarp.diffengine import CheckpointError, NonFiniteError
from priorwarp.diffeo import GridMismatchError, jacobian_analysis, load_field, save_field, warp_volume
from priorwarp.inr import PAIRWISE, DefNet, RefNet, load_network
from priorwarp.phantom import PhantomSpec, PhantomSpecError, generate_phantom, write_phantom
from priorwarp.trainer import (
    TrainingDiverged,
    predict_image,
    register_pair,
    render_refnet,
    train_defnet,
    train_refnet,
)
from priorwarp.volume import (
    ImageSequence,
    Volume,
    VolumeFormatError,
    load_landmarks,
    load_mask,
    load_sequence,
    load_volume,
    normalize_intensity,
    save_mask,
    save_volume,
)

log = logging.getLogger("priorwarp")

COMMANDS = ("phantom", "embed", "train", "interp", "register", "propagate", "eval")
USAGE_ERRORS = (ConfigError, FileNotFoundError, VolumeFormatError, GridMismatchError, CheckpointError,
                PhantomSpecError)
RUNTIME_ERRORS = (TrainingDiverged, NonFiniteError, FloatingPointError, RuntimeError, MemoryError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="priorwarp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--out", help="output directory (overrides config and environment)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a single config key; may repeat")
    return parser


class Context:
    """Resolved config plus the helpers every command uses for output."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.digest = digest(cfg)
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / f"{command}.config.txt").write_text(echo(cfg) + f"config_digest={self.digest}\n")

    @property
    def stamp(self) -> dict:
        return {"config_digest": self.digest}

    def path(self, name: str) -> Path:
        return self.out / name

    def figure(self, fn, name: str, *args, **kw):
        if self.cfg.figures:
            fn(*args, path=self.path(f"figures/{name}"), **kw)

    def write_record(self, record, name: str):
        self.path(name).write_text(f"# config_digest={self.digest}\n" + record.to_csv())

    def save_net(self, net, stem: str) -> Path:
        return net.save(self.path(stem), self.stamp)


def _ident(path: str, arr: np.ndarray) -> str:
    return f"{Path(path).name}@{hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()[:16]}"


def _windowed(cfg: RunConfig, v: Volume) -> Volume:
    window = cfg.window()
    return normalize_intensity(v, window) if window else v


def _sequence(cfg: RunConfig) -> ImageSequence:
    seq = load_sequence(cfg.sequence)
    ref = seq.reference_index if cfg.reference_index is None else cfg.reference_index
    vols = [_windowed(cfg, v) for v in seq.volumes]
    try:
        return ImageSequence(vols, seq.times, ref, seq.time_span)
    except ValueError as exc:
        raise ConfigError(f"{cfg.sequence}: {exc}") from None


def _load_net(path: str, kind):
    net = load_network(path)
    if not isinstance(net, kind):
        raise ConfigError(f"{path}: expected a {kind.kind} checkpoint, found {net.kind}")
    return net


def _image_report(pred: Volume, target: Volume) -> dict:
    return {"psnr_db": _json_psnr(psnr(pred.clamped(), target)), "ssim": ssim3d(pred.clamped(), target)}


def _json_psnr(v: float):
    return "inf" if math.isinf(v) else v


# -- commands -------------------------------------------------------------------


def cmd_phantom(ctx: Context) -> None:
    cfg = ctx.cfg
    dims = tuple(int(x) for x in cfg.phantom_dims.split())
    spacing = tuple(float(x) for x in cfg.phantom_spacing.split())
    amp_vox = np.array([float(x) for x in cfg.phantom_amplitude_vox.split()])
    if len(dims) != 3 or len(spacing) != 3 or amp_vox.shape != (3,):
        raise ConfigError("phantom_dims, phantom_spacing and phantom_amplitude_vox need three values")
    spec = PhantomSpec(dims=dims, spacing=spacing, frames=cfg.phantom_frames, period=cfg.phantom_period,
                       amplitude=tuple(float(a) for a in amp_vox / (np.asarray(dims) - 1)),
                       landmarks=cfg.phantom_landmarks, tumor_radius_mm=cfg.phantom_tumor_radius_mm)
    seq, gt = generate_phantom(spec, cfg.phantom_seed)
    manifest = write_phantom(ctx.out, seq, gt, ctx.stamp)
    with open(ctx.path("phantom.manifest"), "a") as fh:
        fh.write(f"config_digest={ctx.digest}\n")
    ctx.figure(plotting.plot_slices, "phantom_frames.png",
               {f"t={t}": seq.at(t) for t in (seq.times[0], seq.times[len(seq.times) // 2])})
    print(f"phantom: {len(seq.times)} frames on {dims} -> {manifest}")


def cmd_embed(ctx: Context) -> None:
    cfg = ctx.cfg
    if cfg.sequence is not None:
        ref = _sequence(cfg).reference
        source = cfg.sequence
    else:
        ref = _windowed(cfg, load_volume(cfg.volume))
        source = cfg.volume
    net, record = train_refnet(ref, cfg.train)
    ctx.save_net(net, "refnet")
    ctx.write_record(record, "refnet_loss.csv")
    render = render_refnet(net, ref.dims, ref.spacing)
    save_volume(ctx.path("refnet_render.hdr"), render, extra=ctx.stamp)
    report = MetricsReport(psnr_db=psnr(render.clamped(), ref), ssim=ssim3d(render.clamped(), ref),
                           inputs={"reference": _ident(source, ref.data)}, config_digest=ctx.digest)
    report.write(ctx.path("embed_report.json"))
    ctx.figure(plotting.plot_loss, "refnet_loss.png", record)
    ctx.figure(plotting.plot_slices, "refnet_render.png", {"reference": ref, "rendered": render.clamped()})
    print(f"embed: psnr={report.psnr_db:.2f} dB ssim={report.ssim:.4f} -> {ctx.path('refnet.manifest')}")


def cmd_train(ctx: Context) -> None:
    cfg = ctx.cfg
    full = _sequence(cfg)
    seq = full
    for t in cfg.holdout_times():
        if t == full.reference_index:
            raise ConfigError("the reference frame cannot be held out")
        seq = seq.without(t)
    refnet = _load_net(cfg.refnet, RefNet) if cfg.train.warp_backend == "refnet" else None
    defnet, record = train_defnet(seq, refnet, cfg.train)
    ctx.save_net(defnet, "defnet")
    ctx.write_record(record, "defnet_loss.csv")
    frames = {}
    for t, target in zip(full.times, full.volumes):
        tq = None if defnet.mode == PAIRWISE else t
        if defnet.mode == PAIRWISE and t == full.reference_index:
            continue
        pred, u = predict_image(refnet, defnet, tq, target, cfg.train.warp_backend, full.reference,
                                cfg.train.steps_scaling_squaring)
        entry = _image_report(pred, target)
        entry["folding_count"] = jacobian_analysis(u)[1]
        entry["held_out"] = t in cfg.holdout_times()
        frames[str(t)] = entry
    report = {"config_digest": ctx.digest, "frames": frames,
              "inputs": {f"t{t}": _ident(f"frame{t}", v.data) for t, v in zip(full.times, full.volumes)}}
    _write_json(ctx.path("train_report.json"), report)
    ctx.figure(plotting.plot_loss, "defnet_loss.png", record)
    print(f"train: {len(record.losses)} iterations -> {ctx.path('defnet.manifest')}")


def cmd_interp(ctx: Context) -> None:
    cfg = ctx.cfg
    defnet = _load_net(cfg.defnet, DefNet)
    refnet = _load_net(cfg.refnet, RefNet) if cfg.train.warp_backend == "refnet" else None
    if cfg.sequence is not None:
        seq = _sequence(cfg)
        grid, ref_volume = seq.reference, seq.reference
    else:
        grid = ref_volume = _windowed(cfg, load_volume(cfg.volume))
    t = None if defnet.mode == PAIRWISE else cfg.t
    try:
        pred, u = predict_image(refnet, defnet, t, grid, cfg.train.warp_backend, ref_volume,
                                cfg.train.steps_scaling_squaring, cfg.train.allow_extrapolation)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    tag = f"{cfg.t:g}".replace(".", "p")
    save_volume(ctx.path(f"pred_t{tag}.hdr"), pred, extra=ctx.stamp)
    save_field(ctx.path(f"disp_t{tag}.hdr"), u, ctx.stamp)
    det, folds = jacobian_analysis(u)
    report = MetricsReport(folding_count=folds, config_digest=ctx.digest,
                           inputs={"defnet": defnet.params.digest(), "t": repr(float(cfg.t))})
    report.write(ctx.path(f"interp_t{tag}_report.json"))
    ctx.figure(plotting.plot_slices, f"pred_t{tag}.png", {"predicted": pred.clamped()})
    ctx.figure(plotting.plot_field, f"disp_t{tag}.png", u, det=det)
    print(f"interp: t={cfg.t:g} folding_count={folds} -> {ctx.path(f'pred_t{tag}.hdr')}")


def cmd_register(ctx: Context) -> None:
    cfg = ctx.cfg
    ref = _windowed(cfg, load_volume(cfg.volume))
    target = _windowed(cfg, load_volume(cfg.target))
    if ref.dims != target.dims:
        raise GridMismatchError(f"grid mismatch: {ref.dims} vs {target.dims}")
    u, refnet, defnet, ref_rec, def_rec = register_pair(ref, target, cfg.train, return_models=True)
    if refnet is not None:
        ctx.save_net(refnet, "refnet")
        ctx.write_record(ref_rec, "refnet_loss.csv")
    ctx.save_net(defnet, "defnet")
    ctx.write_record(def_rec, "defnet_loss.csv")
    save_field(ctx.path("disp.hdr"), u, ctx.stamp)
    source = refnet if cfg.train.warp_backend == "refnet" else ref
    warped = warp_volume(source, u, cfg.train.warp_backend, ref.spacing)
    save_volume(ctx.path("warped.hdr"), warped, extra=ctx.stamp)
    report = _metrics(ctx, warped.clamped(), target, u, spacing=ref.spacing,
                      inputs={"reference": _ident(cfg.volume, ref.data), "target": _ident(cfg.target, target.data)})
    report.write(ctx.path("register_report.json"))
    ctx.figure(plotting.plot_loss, "loss.png", [r for r in (ref_rec, def_rec) if r is not None])
    ctx.figure(plotting.plot_slices, "register.png", {"reference": ref, "target": target, "warped": warped.clamped()})
    ctx.figure(plotting.plot_field, "disp.png", u, det=jacobian_analysis(u)[0])
    print(f"register: psnr={report.psnr_db:.2f} dB folding_count={report.folding_count} -> {ctx.path('disp.hdr')}")


def _metrics(ctx, a, b, u, spacing, inputs) -> MetricsReport:
    """Image metrics plus Dice / TRE when the config names masks or landmarks."""
    cfg = ctx.cfg
    mask_a = mask_b = None
    if cfg.mask is not None and cfg.target_mask is not None:
        mask_b = load_mask(cfg.target_mask)
        mask_a = propagate_roi(load_mask(cfg.mask), u)
        save_mask(ctx.path("propagated_mask.hdr"), mask_a, ctx.stamp)
    lm_t = load_landmarks(cfg.landmarks) if cfg.landmarks else None
    lm_r = load_landmarks(cfg.landmarks_ref) if cfg.landmarks_ref else None
    return evaluate(a, b, mask_a=mask_a, mask_b=mask_b, labels=cfg.label_list(), u=u,
                    landmarks_target=lm_t, landmarks_ref=lm_r, spacing=spacing, inputs=inputs,
                    config_digest=ctx.digest)


def cmd_propagate(ctx: Context) -> None:
    cfg = ctx.cfg
    mask = load_mask(cfg.mask)
    u = load_field(cfg.field)
    if mask.dims != tuple(u.dims):
        raise GridMismatchError(f"grid mismatch: mask {mask.dims} vs field {tuple(u.dims)}")
    out = propagate_roi(mask, u)
    save_mask(ctx.path("propagated_mask.hdr"), out, ctx.stamp)
    inputs = {"mask": _ident(cfg.mask, mask.labels), "field": _ident(cfg.field, u.data)}
    report = MetricsReport(inputs=inputs, config_digest=ctx.digest)
    if cfg.target_mask is not None:
        report = evaluate(mask_a=out, mask_b=load_mask(cfg.target_mask), labels=cfg.label_list(),
                          inputs=inputs, config_digest=ctx.digest)
    report.write(ctx.path("propagate_report.json"))
    print(f"propagate: labels {sorted(int(x) for x in np.unique(out.labels))} -> {ctx.path('propagated_mask.hdr')}")


def cmd_eval(ctx: Context) -> None:
    cfg = ctx.cfg
    inputs, grids = {}, []
    a = b = mask_a = mask_b = u = lm_t = lm_r = None
    spacing = None
    if cfg.volume is not None and cfg.target is not None:
        a, b = _windowed(cfg, load_volume(cfg.volume)), _windowed(cfg, load_volume(cfg.target))
        inputs.update(volume=_ident(cfg.volume, a.data), target=_ident(cfg.target, b.data))
        grids += [("volume", a.dims), ("target", b.dims)]
        spacing = a.spacing
    if cfg.mask is not None and cfg.target_mask is not None:
        mask_a, mask_b = load_mask(cfg.mask), load_mask(cfg.target_mask)
        inputs.update(mask=_ident(cfg.mask, mask_a.labels), target_mask=_ident(cfg.target_mask, mask_b.labels))
        grids += [("mask", mask_a.dims), ("target_mask", mask_b.dims)]
        spacing = spacing or mask_a.spacing
    if cfg.field is not None:
        u = load_field(cfg.field)
        inputs["field"] = _ident(cfg.field, u.data)
        grids.append(("field", tuple(u.dims)))
        if cfg.landmarks and cfg.landmarks_ref:
            lm_t, lm_r = load_landmarks(cfg.landmarks), load_landmarks(cfg.landmarks_ref)
            spacing = spacing or (1.0, 1.0, 1.0)
    if not grids:
        raise ConfigError("eval: nothing to compare (give volume+target, mask+target_mask or field)")
    first = grids[0]
    for name, dims in grids[1:]:
        if tuple(dims) != tuple(first[1]):
            raise GridMismatchError(f"eval: {first[0]} grid {tuple(first[1])} does not match {name} grid {tuple(dims)}")
    report = evaluate(a, b, mask_a=mask_a, mask_b=mask_b, labels=cfg.label_list(), u=u,
                      landmarks_target=lm_t, landmarks_ref=lm_r, spacing=spacing, inputs=inputs,
                      config_digest=ctx.digest)
    report.write(ctx.path("eval_report.json"))
    if a is not None:
        ctx.figure(plotting.plot_slices, "eval.png", {"volume": a, "target": b})
    print("eval: " + " ".join(f"{k}={v}" for k, v in report.to_dict().items()
                             if k in ("psnr_db", "ssim", "dice", "folding_count", "tre_mean_mm") and v not in (None, {})))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


HANDLERS = {
    "phantom": cmd_phantom, "embed": cmd_embed, "train": cmd_train, "interp": cmd_interp,
    "register": cmd_register, "propagate": cmd_propagate, "eval": cmd_eval,
}


def load_run_config(command: str, config: str | None, sets: list[str], out: str | None) -> RunConfig:
    pairs = {}
    if config is not None:
        path = Path(config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        pairs.update(parse_pairs(path.read_text().splitlines(), str(path)))
    pairs.update(parse_pairs(sets, "--set"))
    if out is not None:
        pairs["output_dir"] = out
    return build_config(pairs, Path.cwd(), command)


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"priorwarp: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    ctx = None
    try:
        cfg = load_run_config(args.command, args.config, args.set, args.out)
        ctx = Context(cfg, args.command)
        with threadpool_limits(limits=cfg.train.threads):
            HANDLERS[args.command](ctx)
    except USAGE_ERRORS as exc:
        print(f"priorwarp {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        if isinstance(exc, TrainingDiverged) and exc.net is not None and ctx is not None:
            # keep the last finite parameters for inspection
            ctx.save_net(exc.net, f"{exc.net.kind}_last_finite")
        print(f"priorwarp {args.command}: failed: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"priorwarp {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
