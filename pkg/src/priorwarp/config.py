"""Run configuration: line-oriented ``key=value`` files layered over documented defaults."""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path

from priorwarp.trainer import TrainConfig

OUTPUT_ENV = "PRIORWARP_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


def _train_fields():
    return {f.name: f for f in fields(TrainConfig)}


@dataclass
class RunConfig:
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    output_dir: str = "out"
    sequence: str | None = None  # sequence manifest
    reference_index: int | None = None
    volume: str | None = None
    target: str | None = None
    mask: str | None = None
    target_mask: str | None = None
    landmarks: str | None = None  # target-frame landmarks
    landmarks_ref: str | None = None
    window_lo: float | None = None
    window_hi: float | None = None
    refnet: str | None = None
    defnet: str | None = None
    field: str | None = None
    t: float | None = None
    holdout: str = ""  # space-separated times left out of deformation training
    labels: str = ""  # space-separated mask labels for Dice; empty = all non-zero
    figures: bool = True
    phantom_dims: str = "32 32 32"
    phantom_spacing: str = "1.0 1.0 1.0"
    phantom_frames: int = 8
    phantom_amplitude_vox: str = "3.0 0.0 0.0"
    phantom_period: float = 16.0
    phantom_landmarks: int = 50
    phantom_tumor_radius_mm: float = 6.0
    phantom_seed: int = 0

    def holdout_times(self) -> list[int]:
        return [int(x) for x in self.holdout.split()]

    def label_list(self) -> list[int] | None:
        return [int(x) for x in self.labels.split()] or None

    def window(self):
        if self.window_lo is None and self.window_hi is None:
            return None
        if self.window_lo is None or self.window_hi is None:
            raise ConfigError("window_lo and window_hi must be given together")
        return (self.window_lo, self.window_hi)


PATH_KEYS = ("output_dir", "sequence", "volume", "target", "mask", "target_mask", "landmarks",
             "landmarks_ref", "refnet", "defnet", "field")

REQUIRED = {
    "phantom": (),
    "embed": (("sequence", "volume"),),
    "train": ("sequence",),
    "interp": ("defnet", "t"),
    "register": ("volume", "target"),
    "propagate": ("mask", "field"),
    "eval": (),
}


def run_fields():
    return {f.name: f for f in fields(RunConfig) if f.name != "train"}


def all_keys() -> list[str]:
    return list(_train_fields()) + list(run_fields())


def _field_type(f) -> str:
    return f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))


def _convert(key: str, raw: str, ftype: str):
    raw = raw.strip()
    base = ftype.replace(" | None", "").strip()
    if "None" in ftype and raw.lower() in ("", "none"):
        return None
    try:
        if base == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if base == "int":
            return int(raw)
        if base == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {base}") from None
    return raw


def parse_pairs(lines, source: str = "<config>") -> dict[str, str]:
    out = {}
    known = set(all_keys())
    for lineno, line in enumerate(lines, 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, val = stripped.split("=", 1)
        key = key.strip()
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
        out[key] = val.strip()
    return out


def build_config(pairs: dict[str, str], base_dir: Path | None = None, command: str | None = None) -> RunConfig:
    tf, rf = _train_fields(), run_fields()
    train_kw, run_kw = {}, {}
    for key, raw in pairs.items():
        if key in tf:
            train_kw[key] = _convert(key, raw, _field_type(tf[key]))
        elif key in rf:
            run_kw[key] = _convert(key, raw, _field_type(rf[key]))
        else:
            raise ConfigError(f"unknown key '{key}'")
    try:
        train = TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig(train=train, **run_kw)
    env_out = os.environ.get(OUTPUT_ENV)
    if env_out and "output_dir" not in pairs:
        cfg.output_dir = env_out
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    for key in PATH_KEYS:
        val = getattr(cfg, key)
        if val is not None:
            setattr(cfg, key, str((base / Path(val).expanduser()).resolve()))
    if command is not None:
        check_required(cfg, command)
    return cfg


def check_required(cfg: RunConfig, command: str) -> None:
    if command not in REQUIRED:
        raise ConfigError(f"unknown command '{command}'")
    for req in REQUIRED[command]:
        options = req if isinstance(req, tuple) else (req,)
        if all(getattr(cfg, k) is None for k in options):
            raise ConfigError(f"{command}: missing required key {' or '.join(options)}")
    if command == "train" and cfg.train.warp_backend == "refnet" and cfg.refnet is None:
        raise ConfigError("train: the refnet backend needs an embed checkpoint (key refnet)")
    if command == "interp" and cfg.train.warp_backend == "refnet" and cfg.refnet is None:
        raise ConfigError("interp: the refnet backend needs key refnet")
    if command == "interp" and cfg.sequence is None and cfg.volume is None:
        raise ConfigError("interp: a sequence or volume is needed to define the grid")


def parse_config(path, command: str | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Read a key=value file; omitted keys take their defaults."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    pairs = parse_pairs(path.read_text().splitlines(), str(path))
    pairs.update(overrides or {})
    return build_config(pairs, Path.cwd(), command)


def echo(cfg: RunConfig) -> str:
    """Canonical text form of every setting (paths excluded from the digest)."""
    lines = []
    for name in _train_fields():
        lines.append(f"{name}={_fmt(getattr(cfg.train, name))}")
    for name in run_fields():
        lines.append(f"{name}={_fmt(getattr(cfg, name))}")
    return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def digest(cfg: RunConfig) -> str:
    """Hash of the path-independent settings, embedded in every output."""
    lines = [line for line in echo(cfg).splitlines() if line.split("=", 1)[0] not in PATH_KEYS]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]
