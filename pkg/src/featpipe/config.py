"""Flat run configuration: defaults, config-file values, flag overrides.

Every tunable across the package lives here under one snake_case key.
Values resolve in precedence order flag > file > default, and each
resolved value remembers where it came from so the serialized config
written next to run outputs documents the run exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .detector import ScaleSpaceConfig
from .geometry import PatchGeometry
from .grad import ShapeError
from .training import PipelineArch, TrainingConfig

__all__ = [
    "RunConfig",
    "make_geometry",
    "make_scale_config",
    "make_training_config",
    "make_arch",
    "parse_config_file",
    "resolve_config",
    "serialize_config",
    "write_run_config",
]

_PROFILES = ("full", "tiny")


@dataclass
class RunConfig:
    # run
    seed: int = 0
    profile: str = "full"
    threads: int = 1
    # synthetic dataset
    scenes: int = 8
    views: int = 3
    image_size: int = 256
    features: int = 6
    nonfeatures: int = 2
    # patch geometry
    outer: int = 128
    inner: int = 64
    support_mult: float = 24.0
    beta: float = 10.0
    # training schedule
    momentum: float = 0.9
    descriptor_steps: int = 300
    descriptor_batch: int = 128
    descriptor_lr: float = 0.01
    mining_doubling_every: int = 5000
    orientation_steps: int = 300
    orientation_batch: int = 64
    orientation_lr: float = 0.01
    detector_pretrain_steps: int = 300
    detector_steps: int = 200
    detector_forward: int = 32
    detector_backward: int = 8
    detector_pretrain_lr: float = 0.01
    detector_lr: float = 0.001
    gamma: float = 1.0
    margin: float = 4.0
    # scale-space detection
    num_levels: int = 9
    scale_factor: float = 2.0 ** (1.0 / 3.0)
    base_sigma: float = 1.6
    nms_radius: int = 5
    nms_scale_radius: int = 1
    score_threshold: float = 0.0
    max_keypoints: int = 1000
    # evaluation
    tol_px: float = 5.0

    def __post_init__(self):
        if self.profile not in _PROFILES:
            raise ShapeError(
                f"unknown profile {self.profile!r}; expected one of {_PROFILES}"
            )


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _convert(name: str, raw, where: str):
    field = _FIELDS[name]
    if isinstance(raw, str):
        try:
            if field.type in ("int", int):
                return int(raw)
            if field.type in ("float", float):
                return float(raw)
            return raw
        except ValueError as exc:
            raise ShapeError(f"{where}: bad value for {name!r}: {exc}") from exc
    return raw


def parse_config_file(path) -> dict[str, str]:
    """`key = value` lines; '#' starts a comment, blank lines ignored."""
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ShapeError(
                    f"config file {path} line {lineno}: expected 'key = value'"
                )
            key, _, raw = text.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in _FIELDS:
                raise ShapeError(f"config file {path} line {lineno}: unknown key {key!r}")
            if key in values:
                raise ShapeError(f"config file {path} line {lineno}: duplicate key {key!r}")
            values[key] = raw
    return values


def resolve_config(
    file_values: dict[str, str] | None = None,
    flag_values: dict[str, object] | None = None,
) -> tuple[RunConfig, dict[str, str]]:
    """Merge defaults, file values, and flags; flags win.

    Returns the config plus a per-key provenance map with entries
    "default", "file", or "flag"."""
    base = RunConfig()
    merged = {}
    provenance = {}
    for name in _FIELDS:
        merged[name] = getattr(base, name)
        provenance[name] = "default"
    for name, raw in (file_values or {}).items():
        if name not in _FIELDS:
            raise ShapeError(f"unknown config key {name!r}")
        merged[name] = _convert(name, raw, "config file")
        provenance[name] = "file"
    for name, raw in (flag_values or {}).items():
        if raw is None:
            continue
        if name not in _FIELDS:
            raise ShapeError(f"unknown config key {name!r}")
        merged[name] = _convert(name, raw, "flag")
        provenance[name] = "flag"
    return RunConfig(**merged), provenance


def _fmt_value(v) -> str:
    if isinstance(v, float):
        return f"{v:.12g}"
    return str(v)


def serialize_config(cfg: RunConfig, provenance: dict[str, str] | None = None) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        src = (provenance or {}).get(f.name, "default")
        lines.append(f"{f.name} = {_fmt_value(getattr(cfg, f.name))}  # {src}")
    return "\n".join(lines) + "\n"


def write_run_config(path, cfg: RunConfig, provenance: dict[str, str] | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg, provenance))


def make_geometry(cfg: RunConfig) -> PatchGeometry:
    return PatchGeometry(
        outer=cfg.outer,
        inner=cfg.inner,
        support_mult=cfg.support_mult,
        beta=cfg.beta,
    )


def make_scale_config(cfg: RunConfig) -> ScaleSpaceConfig:
    return ScaleSpaceConfig(
        num_levels=cfg.num_levels,
        scale_factor=cfg.scale_factor,
        base_sigma=cfg.base_sigma,
        nms_radius=cfg.nms_radius,
        nms_scale_radius=cfg.nms_scale_radius,
        score_threshold=cfg.score_threshold,
        max_keypoints=cfg.max_keypoints,
    )


def make_training_config(cfg: RunConfig) -> TrainingConfig:
    return TrainingConfig(
        seed=cfg.seed,
        momentum=cfg.momentum,
        descriptor_steps=cfg.descriptor_steps,
        descriptor_batch=cfg.descriptor_batch,
        descriptor_lr=cfg.descriptor_lr,
        mining_doubling_every=cfg.mining_doubling_every,
        orientation_steps=cfg.orientation_steps,
        orientation_batch=cfg.orientation_batch,
        orientation_lr=cfg.orientation_lr,
        detector_pretrain_steps=cfg.detector_pretrain_steps,
        detector_steps=cfg.detector_steps,
        detector_forward=cfg.detector_forward,
        detector_backward=cfg.detector_backward,
        detector_pretrain_lr=cfg.detector_pretrain_lr,
        detector_lr=cfg.detector_lr,
        gamma=cfg.gamma,
        margin=cfg.margin,
    )


def make_arch(cfg: RunConfig) -> PipelineArch:
    return PipelineArch() if cfg.profile == "full" else PipelineArch.tiny()
