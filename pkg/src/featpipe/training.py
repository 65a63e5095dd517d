"""Staged training: descriptor, then orientation, then detector.

Each stage optimizes one component against the later, already-trained
ones; earlier-stage parameters are left untouched because the loss
graphs freeze them, so their gradients never exist.  All stages share a
single parameter store, which is what gets checkpointed.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .dataset import DatasetStats, SceneGroundTruth, build_quadruplets
from .descriptor import DescriptorArch, DescriptorParams, describe, init_descriptor
from .descriptor import descriptor_from_store
from .detector import DetectorParams, detector_from_store, init_detector
from .geometry import PatchGeometry, rot_crop
from .grad import NumericsError, ParamStore, ShapeError, sgd_step
from .losses import (
    DescLossConfig,
    DetectorLossConfig,
    desc_losses,
    detector_losses,
    hard_mine,
    mining_ratio_at,
    orientation_losses,
)
from .orientation import OrientationArch, OrientationParams, init_orientation
from .orientation import orientation_from_store

__all__ = [
    "LOSS_HEADER",
    "PipelineArch",
    "TrainingConfig",
    "TrainingResult",
    "canonical_crops",
    "init_pipeline",
    "mean_orientation_loss",
    "read_loss_csv",
    "run_staged_training",
    "train_descriptor",
    "train_detector",
    "train_orientation",
    "triplet_accuracy",
    "write_loss_csv",
]

LOSS_HEADER = "step,stage,loss,mining_ratio"


@dataclass(frozen=True)
class PipelineArch:
    """Architecture sizes for all three stages."""

    det_n: int = 4
    det_m: int = 4
    det_k: int = 25
    orientation: OrientationArch = field(default_factory=OrientationArch)
    descriptor: DescriptorArch = field(default_factory=DescriptorArch)

    @staticmethod
    def tiny() -> "PipelineArch":
        return PipelineArch(
            det_n=2,
            det_m=2,
            det_k=9,
            orientation=OrientationArch.tiny(),
            descriptor=DescriptorArch.tiny(),
        )


@dataclass
class TrainingConfig:
    seed: int = 0
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

    def __post_init__(self):
        for name in (
            "descriptor_steps",
            "orientation_steps",
            "detector_pretrain_steps",
            "detector_steps",
        ):
            if getattr(self, name) < 0:
                raise ShapeError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in (
            "descriptor_batch",
            "orientation_batch",
            "detector_forward",
            "detector_backward",
            "mining_doubling_every",
        ):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.detector_forward % self.detector_backward != 0:
            raise ShapeError(
                "detector_forward must be a multiple of detector_backward, got "
                f"{self.detector_forward} and {self.detector_backward}"
            )

    @property
    def detector_ratio(self) -> int:
        return self.detector_forward // self.detector_backward


def _take(stream, n: int) -> list:
    batch = list(itertools.islice(stream, n))
    if len(batch) < n:
        raise ShapeError(
            f"training stream exhausted: wanted {n} quadruplets, got {len(batch)}"
        )
    return batch


def canonical_crops(patches, xys, thetas, geom: PatchGeometry) -> np.ndarray:
    """Reference-angle inner crops as plain arrays (B, 1, inner, inner).

    This is the descriptor-stage view of a patch: centered on the true
    feature location and rotated into the shared reference frame, so
    positive pairs depict the same content."""
    stack = np.stack([np.asarray(p, dtype=np.float64) for p in patches])
    if stack.ndim == 3:
        stack = stack[:, None]
    out = rot_crop(
        stack,
        np.stack([np.asarray(x, dtype=np.float64) for x in xys]),
        np.asarray(thetas, dtype=np.float64),
        geom.inner,
    )
    return out.data


def _check_finite(value: float, stage: str, step: int) -> float:
    if not np.isfinite(value):
        raise NumericsError(f"{stage} stage: non-finite loss {value!r} at step {step}")
    return value


def train_descriptor(
    stream,
    rho: DescriptorParams,
    cfg: TrainingConfig = TrainingConfig(),
    geom: PatchGeometry = PatchGeometry(),
) -> list[tuple[int, str, float, int]]:
    """Hinge training on canonical crops with progressive hard mining.

    Every step forwards batch*ratio freshly drawn pairs of each
    polarity, keeps the hardest batch of each, and backpropagates the
    mean hinge over the kept 2*batch pairs."""
    if rho.arch.input_size != geom.inner:
        raise ShapeError(
            f"descriptor expects {rho.arch.input_size} px input, inner crop is {geom.inner}"
        )
    dcfg = DescLossConfig(margin=cfg.margin)
    rows = []
    for step in range(cfg.descriptor_steps):
        r = mining_ratio_at(step, cfg.mining_doubling_every)
        quads = _take(stream, cfg.descriptor_batch * r)
        c1 = canonical_crops([q.p1 for q in quads], [q.x1 for q in quads],
                             [q.theta1 for q in quads], geom)
        c2 = canonical_crops([q.p2 for q in quads], [q.x2 for q in quads],
                             [q.theta2 for q in quads], geom)
        c3 = canonical_crops([q.p3 for q in quads], [q.x3 for q in quads],
                             [q.theta3 for q in quads], geom)
        if r > 1:
            da = describe(c1, rho, frozen=True).data
            db = describe(c2, rho, frozen=True).data
            dc = describe(c3, rho, frozen=True).data
            pos_vals = np.linalg.norm(da - db, axis=1)
            neg_vals = np.maximum(0.0, cfg.margin - np.linalg.norm(da - dc, axis=1))
            pos_sel = hard_mine(pos_vals, r)
            neg_sel = hard_mine(neg_vals, r)
        else:
            pos_sel = neg_sel = np.arange(len(quads))
        side_a = np.concatenate([c1[pos_sel], c1[neg_sel]])
        side_b = np.concatenate([c2[pos_sel], c3[neg_sel]])
        positive = np.concatenate(
            [np.ones(len(pos_sel)), np.zeros(len(neg_sel))]
        )
        loss = desc_losses(side_a, side_b, positive, rho, dcfg).mean()
        val = _check_finite(float(loss.data), "descriptor", step)
        loss.backward()
        sgd_step(rho.store, cfg.descriptor_lr, cfg.momentum)
        rows.append((step, "descriptor", val, r))
    return rows


def train_orientation(
    stream,
    phi: OrientationParams,
    rho: DescriptorParams,
    cfg: TrainingConfig = TrainingConfig(),
    geom: PatchGeometry = PatchGeometry(),
) -> list[tuple[int, str, float, int]]:
    """Minimize descriptor distance between corresponding patches after
    predicted-angle rotation; the descriptor itself stays frozen."""
    if phi.arch.input_size != geom.inner:
        raise ShapeError(
            f"orientation expects {phi.arch.input_size} px input, inner crop is {geom.inner}"
        )
    rows = []
    for step in range(cfg.orientation_steps):
        quads = _take(stream, cfg.orientation_batch)
        p1 = np.stack([np.asarray(q.p1, dtype=np.float64) for q in quads])[:, None]
        p2 = np.stack([np.asarray(q.p2, dtype=np.float64) for q in quads])[:, None]
        x1 = np.stack([q.x1 for q in quads])
        x2 = np.stack([q.x2 for q in quads])
        loss = orientation_losses(p1, x1, p2, x2, phi, rho, geom).mean()
        val = _check_finite(float(loss.data), "orientation", step)
        loss.backward()
        sgd_step(phi.store, cfg.orientation_lr, cfg.momentum)
        rows.append((step, "orientation", val, 1))
    return rows


def _quad_stacks(quads):
    def stack(attr):
        return np.stack(
            [np.asarray(getattr(q, attr), dtype=np.float64) for q in quads]
        )[:, None]

    return stack("p1"), stack("p2"), stack("p3"), stack("p4")


def train_detector(
    stream,
    mu: DetectorParams,
    phi: OrientationParams,
    rho: DescriptorParams,
    cfg: TrainingConfig = TrainingConfig(),
    geom: PatchGeometry = PatchGeometry(),
) -> tuple[list[tuple[int, str, float, int]], ParamStore]:
    """Two detector stages sharing one quadruplet stream.

    The first replaces the full pair term with the proposal-overlap
    objective so localization converges before the rest of the chain
    weighs in; the second switches to descriptor distances at a lower
    learning rate.  Returns the loss rows and a parameter snapshot
    taken between the stages.
    """
    dcfg = DetectorLossConfig(gamma=cfg.gamma)
    r = cfg.detector_ratio
    rows = []
    snapshot = mu.store.clone()
    stages = (
        ("detector-pretrain", cfg.detector_pretrain_steps, cfg.detector_pretrain_lr, True),
        ("detector", cfg.detector_steps, cfg.detector_lr, False),
    )
    for stage_name, steps, lr, pretrain in stages:
        for step in range(steps):
            quads = _take(stream, cfg.detector_forward)
            s1, s2, s3, s4 = _quad_stacks(quads)
            if r > 1:
                vals = detector_losses(
                    s1, s2, s3, s4, mu, phi, rho, dcfg, geom,
                    pretrain=pretrain, frozen=True,
                ).data
                sel = hard_mine(vals, r)
            else:
                sel = np.arange(len(quads))
            loss = detector_losses(
                s1[sel], s2[sel], s3[sel], s4[sel], mu, phi, rho, dcfg, geom,
                pretrain=pretrain,
            ).mean()
            val = _check_finite(float(loss.data), stage_name, step)
            loss.backward()
            sgd_step(mu.store, lr, cfg.momentum)
            rows.append((step, stage_name, val, r))
        if pretrain:
            snapshot = mu.store.clone()
    return rows, snapshot


# ---------------------------------------------------------------------------
# whole-pipeline orchestration
# ---------------------------------------------------------------------------


def init_pipeline(arch: PipelineArch, stats: DatasetStats, seed: int) -> ParamStore:
    """Fresh parameters for all three stages plus normalization stats,
    in one store.

    Each namespace draws from its own seed offset, so a stage-by-stage
    run that initializes one component at a time lands on the same
    values as this all-at-once path."""
    store = ParamStore()
    init_descriptor(np.random.default_rng(seed), arch.descriptor, store)
    init_orientation(np.random.default_rng(seed + 1), arch.orientation, store)
    init_detector(
        np.random.default_rng(seed + 2), arch.det_n, arch.det_m, arch.det_k, store
    )
    store.add("stats/mean", np.array([stats.mean]), trainable=False)
    store.add("stats/std", np.array([stats.std]), trainable=False)
    return store


@dataclass
class TrainingResult:
    store: ParamStore
    pretrain_store: ParamStore
    rows: list[tuple[int, str, float, int]]


def run_staged_training(
    images: dict[str, np.ndarray],
    gt: SceneGroundTruth,
    stats: DatasetStats,
    cfg: TrainingConfig = TrainingConfig(),
    arch: PipelineArch = PipelineArch(),
    geom: PatchGeometry = PatchGeometry(),
    store: ParamStore | None = None,
) -> TrainingResult:
    """Run the three stages in order on train-split quadruplets.

    Each stage draws from its own seeded stream so shortening one stage
    does not shift the data another sees.  Passing a store resumes from
    those parameters instead of a fresh initialization.
    """
    if store is None:
        store = init_pipeline(arch, stats, cfg.seed)
    rho = descriptor_from_store(store)
    phi = orientation_from_store(store)
    mu = detector_from_store(store)
    rows: list[tuple[int, str, float, int]] = []

    def stream(offset: int):
        rng = np.random.default_rng(cfg.seed + offset)
        return build_quadruplets(gt, images, stats, rng, geom, split="train")

    rows += train_descriptor(stream(101), rho, cfg, geom)
    rows += train_orientation(stream(202), phi, rho, cfg, geom)
    det_rows, snapshot = train_detector(stream(303), mu, phi, rho, cfg, geom)
    rows += det_rows
    return TrainingResult(store=store, pretrain_store=snapshot, rows=rows)


# ---------------------------------------------------------------------------
# held-out diagnostics
# ---------------------------------------------------------------------------


def triplet_accuracy(
    stream,
    rho: DescriptorParams,
    count: int,
    geom: PatchGeometry = PatchGeometry(),
) -> float:
    """Fraction of quadruplets whose positive distance beats the negative."""
    quads = _take(stream, count)
    c1 = canonical_crops([q.p1 for q in quads], [q.x1 for q in quads],
                         [q.theta1 for q in quads], geom)
    c2 = canonical_crops([q.p2 for q in quads], [q.x2 for q in quads],
                         [q.theta2 for q in quads], geom)
    c3 = canonical_crops([q.p3 for q in quads], [q.x3 for q in quads],
                         [q.theta3 for q in quads], geom)
    da = describe(c1, rho, frozen=True).data
    db = describe(c2, rho, frozen=True).data
    dc = describe(c3, rho, frozen=True).data
    pos = np.linalg.norm(da - db, axis=1)
    neg = np.linalg.norm(da - dc, axis=1)
    return float(np.mean(pos < neg))


def mean_orientation_loss(
    stream,
    phi: OrientationParams,
    rho: DescriptorParams,
    count: int,
    geom: PatchGeometry = PatchGeometry(),
) -> float:
    """Mean corresponding-pair descriptor distance under predicted angles."""
    quads = _take(stream, count)
    p1 = np.stack([np.asarray(q.p1, dtype=np.float64) for q in quads])[:, None]
    p2 = np.stack([np.asarray(q.p2, dtype=np.float64) for q in quads])[:, None]
    x1 = np.stack([q.x1 for q in quads])
    x2 = np.stack([q.x2 for q in quads])
    vals = orientation_losses(p1, x1, p2, x2, phi, rho, geom, frozen=True).data
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# loss curve files
# ---------------------------------------------------------------------------


def write_loss_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(LOSS_HEADER + "\n")
        for step, stage, loss, ratio in rows:
            fh.write(f"{int(step)},{stage},{loss:.12g},{int(ratio)}\n")


def read_loss_csv(path) -> list[tuple[int, str, float, int]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != LOSS_HEADER:
        raise ShapeError(f"loss file {path}: missing header {LOSS_HEADER!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise ShapeError(f"loss file {path} line {lineno}: expected 4 fields")
        try:
            rows.append((int(parts[0]), parts[1], float(parts[2]), int(parts[3])))
        except ValueError as exc:
            raise ShapeError(f"loss file {path} line {lineno}: {exc}") from exc
    return rows
