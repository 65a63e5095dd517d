"""Training objectives for the three pipeline stages, plus hard mining.

Each loss exists in two forms: a batched version returning per-sample
values (B,) that training feeds to the miner, and a scalar wrapper
matching the per-sample contracts.  Frozen stages contribute no
parameter gradients but stay on the tape so gradients pass through
their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grad import ShapeError, Tensor, relu, soft_max_lme_batched, vec_norm
from .geometry import PatchGeometry, overlap_loss, softargmax
from .detector import DetectorParams, score_map
from .orientation import OrientationParams, g_transform
from .descriptor import DescriptorParams, describe
from .dataset import Quadruplet

__all__ = [
    "DescLossConfig",
    "DetectorLossConfig",
    "embedding_hinge",
    "desc_loss",
    "desc_losses",
    "orientation_loss",
    "orientation_losses",
    "class_loss",
    "class_losses",
    "pair_loss",
    "pair_losses",
    "pretrain_pair_loss",
    "pretrain_pair_losses",
    "detector_loss",
    "detector_losses",
    "hard_mine",
    "mining_ratio_at",
]


@dataclass(frozen=True)
class DescLossConfig:
    margin: float = 4.0

    def __post_init__(self):
        if not self.margin > 0:
            raise ShapeError(f"descriptor margin must be positive, got {self.margin}")


@dataclass(frozen=True)
class DetectorLossConfig:
    gamma: float = 1.0
    alpha: tuple[float, float, float, float] = (1 / 6, 1 / 6, 1 / 6, 3 / 6)
    labels: tuple[float, float, float, float] = (1.0, 1.0, 1.0, -1.0)

    def __post_init__(self):
        if abs(sum(self.alpha) - 1.0) > 1e-9:
            raise ShapeError(f"class weights must sum to 1, got {sum(self.alpha)}")


def _stack(patches) -> Tensor:
    """(B, 1, S, S) constant tensor from one patch or a batch."""
    if isinstance(patches, Tensor):
        t = patches
    else:
        t = Tensor(np.asarray(patches, dtype=np.float64))
    if t.ndim == 2:
        t = t.reshape((1, 1) + t.shape)
    elif t.ndim == 3:
        t = t.reshape((t.shape[0], 1) + t.shape[1:])
    if t.ndim != 4:
        raise ShapeError(f"expected patches of rank 2..4, got shape {t.shape}")
    return t


# ---------------------------------------------------------------------------
# descriptor stage
# ---------------------------------------------------------------------------


def embedding_hinge(
    distances, positive: np.ndarray, margin: float = 4.0
) -> Tensor:
    """Hinge embedding over precomputed distances (B,): the distance
    itself for positive pairs, max(0, margin - distance) for negatives."""
    d = distances if isinstance(distances, Tensor) else Tensor(np.asarray(distances, dtype=np.float64))
    pos = np.asarray(positive, dtype=np.float64).reshape(-1)
    if pos.shape != d.shape:
        raise ShapeError(f"positive mask shape {pos.shape} != distances {d.shape}")
    return d * pos + relu(margin - d) * (1.0 - pos)


def desc_losses(
    pa,
    pb,
    positive: np.ndarray,
    rho: DescriptorParams,
    cfg: DescLossConfig = DescLossConfig(),
    frozen: bool = False,
) -> Tensor:
    """Hinge embedding losses (B,) between descriptors of two patch
    batches."""
    da = describe(_stack(pa), rho, frozen=frozen)
    db = describe(_stack(pb), rho, frozen=frozen)
    d = vec_norm(da - db, axis=1)
    return embedding_hinge(d, positive, cfg.margin)


def desc_loss(
    pk, pl, positive: bool, rho: DescriptorParams, cfg: DescLossConfig = DescLossConfig()
) -> Tensor:
    mask = np.array([1.0 if positive else 0.0])
    return desc_losses(pk, pl, mask, rho, cfg).sum()


# ---------------------------------------------------------------------------
# orientation stage
# ---------------------------------------------------------------------------


def orientation_losses(
    p1,
    x1,
    p2,
    x2,
    phi: OrientationParams,
    rho: DescriptorParams,
    geom: PatchGeometry = PatchGeometry(),
    frozen: bool = False,
) -> Tensor:
    """Descriptor distances (B,) between rotation-normalized crops of
    corresponding patches; the descriptor is frozen so only the
    orientation net learns."""
    g1 = g_transform(_stack(p1), x1, phi, geom, frozen=frozen)
    g2 = g_transform(_stack(p2), x2, phi, geom, frozen=frozen)
    d1 = describe(g1, rho, frozen=True)
    d2 = describe(g2, rho, frozen=True)
    return vec_norm(d1 - d2, axis=1)


def orientation_loss(p1, x1, p2, x2, phi, rho, geom=PatchGeometry()) -> Tensor:
    return orientation_losses(
        p1, np.asarray(x1, dtype=np.float64).reshape(1, 2),
        p2, np.asarray(x2, dtype=np.float64).reshape(1, 2),
        phi, rho, geom,
    ).sum()


# ---------------------------------------------------------------------------
# detector stage
# ---------------------------------------------------------------------------


def _class_terms(score_maps, cfg: DetectorLossConfig) -> Tensor:
    """Weighted squared hinges (B,) over four per-patch score maps."""
    total = None
    for weight, label, smap in zip(cfg.alpha, cfg.labels, score_maps):
        peaks = soft_max_lme_batched(smap)
        h = relu(1.0 - peaks * label)
        term = h * h * weight
        total = term if total is None else total + term
    return total


def class_losses(
    p1,
    p2,
    p3,
    p4,
    mu: DetectorParams,
    cfg: DetectorLossConfig = DetectorLossConfig(),
    frozen: bool = False,
) -> Tensor:
    """Weighted squared-hinge classification losses (B,).

    The three feature patches should score high, the non-feature patch
    low; the soft maximum of each score map stands in for its peak."""
    maps = [score_map(_stack(p), mu, frozen=frozen) for p in (p1, p2, p3, p4)]
    return _class_terms(maps, cfg)


def class_loss(quad: Quadruplet, mu, cfg=DetectorLossConfig()) -> Tensor:
    return class_losses(quad.p1, quad.p2, quad.p3, quad.p4, mu, cfg).sum()


def _pair_from_maps(t1, s1, t2, s2, phi, rho, geom, pretrain: bool) -> Tensor:
    """Pair term from precomputed score maps s1/s2 over patches t1/t2."""
    loc1 = softargmax(s1, geom.beta)
    loc2 = softargmax(s2, geom.beta)
    if pretrain:
        return overlap_loss(loc1, loc2, float(geom.inner))
    g1 = g_transform(t1, loc1, phi, geom, frozen=True)
    g2 = g_transform(t2, loc2, phi, geom, frozen=True)
    d1 = describe(g1, rho, frozen=True)
    d2 = describe(g2, rho, frozen=True)
    return vec_norm(d1 - d2, axis=1)


def pair_losses(
    p1,
    p2,
    mu: DetectorParams,
    phi: OrientationParams,
    rho: DescriptorParams,
    geom: PatchGeometry = PatchGeometry(),
    frozen: bool = False,
) -> Tensor:
    """Descriptor distances (B,) through the full chain: the detector
    localizes, orientation canonicalizes, the descriptor compares.
    Orientation and descriptor are frozen; gradients reach the detector
    through the soft localization and both resampling steps."""
    t1, t2 = _stack(p1), _stack(p2)
    s1 = score_map(t1, mu, frozen=frozen)
    s2 = score_map(t2, mu, frozen=frozen)
    return _pair_from_maps(t1, s1, t2, s2, phi, rho, geom, pretrain=False)


def pair_loss(p1, p2, mu, phi, rho, geom=PatchGeometry()) -> Tensor:
    return pair_losses(p1, p2, mu, phi, rho, geom).sum()


def pretrain_pair_losses(
    p1,
    p2,
    mu: DetectorParams,
    geom: PatchGeometry = PatchGeometry(),
    frozen: bool = False,
) -> Tensor:
    """Proposal-overlap losses (B,) used before the full pair loss: pull
    the two predicted locations together without running the rest of
    the chain."""
    loc1 = softargmax(score_map(_stack(p1), mu, frozen=frozen), geom.beta)
    loc2 = softargmax(score_map(_stack(p2), mu, frozen=frozen), geom.beta)
    return overlap_loss(loc1, loc2, float(geom.inner))


def pretrain_pair_loss(p1, p2, mu, geom=PatchGeometry()) -> Tensor:
    return pretrain_pair_losses(p1, p2, mu, geom).sum()


def detector_losses(
    p1,
    p2,
    p3,
    p4,
    mu: DetectorParams,
    phi: OrientationParams,
    rho: DescriptorParams,
    cfg: DetectorLossConfig = DetectorLossConfig(),
    geom: PatchGeometry = PatchGeometry(),
    pretrain: bool = False,
    frozen: bool = False,
) -> Tensor:
    """Total per-quadruplet detector losses (B,): gamma times the
    classification term plus the pair term. The p1/p2 score maps are
    shared between the two terms."""
    t1, t2 = _stack(p1), _stack(p2)
    s1, s2 = score_map(t1, mu, frozen=frozen), score_map(t2, mu, frozen=frozen)
    maps = [
        s1,
        s2,
        score_map(_stack(p3), mu, frozen=frozen),
        score_map(_stack(p4), mu, frozen=frozen),
    ]
    cls = _class_terms(maps, cfg)
    pair = _pair_from_maps(t1, s1, t2, s2, phi, rho, geom, pretrain)
    return cls * cfg.gamma + pair


def detector_loss(
    quad: Quadruplet,
    mu,
    phi,
    rho,
    cfg=DetectorLossConfig(),
    geom=PatchGeometry(),
    pretrain: bool = False,
) -> Tensor:
    return detector_losses(
        quad.p1, quad.p2, quad.p3, quad.p4, mu, phi, rho, cfg, geom, pretrain
    ).sum()


# ---------------------------------------------------------------------------
# hard mining
# ---------------------------------------------------------------------------


def hard_mine(losses, r: int) -> np.ndarray:
    """Indices of the top len/r losses, ties going to the lower index.

    Returned ascending so gathered batches keep their original order.
    """
    vals = np.asarray([float(v) for v in np.ravel(losses)])
    r = int(r)
    if r < 1:
        raise ShapeError(f"mining ratio must be >= 1, got {r}")
    keep = vals.size // r
    if keep < 1:
        raise ShapeError(f"mining ratio {r} leaves no samples from {vals.size}")
    order = np.lexsort((np.arange(vals.size), -vals))
    return np.sort(order[:keep])


def mining_ratio_at(step: int, doubling_every: int = 5000) -> int:
    """Descriptor-stage schedule: 1 at the start, doubled every
    `doubling_every` steps."""
    if step < 0:
        raise ShapeError(f"step must be non-negative, got {step}")
    return 2 ** (int(step) // int(doubling_every))
