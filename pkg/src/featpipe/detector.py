"""Piecewise-linear feature detector and its scale-space runtime.

The score map of a patch is sum_n delta_n * max_m (W_mn * P + b_mn)
with delta alternating +1, -1 starting at +1.  Training localizes soft
peaks inside standardized patches; at run time the same filters slide
over an image pyramid and strict 3-D non-max suppression picks discrete
keypoints, so no dense orientation or descriptor pass is ever needed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grad import ParamStore, ShapeError, Tensor, conv2d
from .grad import MaxReduce, Sum
from .geometry import softargmax

__all__ = [
    "DetectorParams",
    "ScaleSpaceConfig",
    "Keypoint",
    "init_detector",
    "score_map",
    "detect_patch",
    "build_pyramid",
    "nms3d",
    "detect_multiscale",
    "write_keypoints",
    "read_keypoints",
]


@dataclass
class DetectorParams:
    """Filter bank: n_sum branches, m_max filters each, k x k kernels."""

    n_sum: int
    m_max: int
    ksize: int
    store: ParamStore = field(repr=False)

    @property
    def weights(self) -> Tensor:
        return self.store["detector/w"]

    @property
    def bias(self) -> Tensor:
        return self.store["detector/b"]

    @property
    def deltas(self) -> np.ndarray:
        # +1 for branch 1, 3, ... (odd, 1-based), -1 for the rest
        return np.array([1.0 if i % 2 == 0 else -1.0 for i in range(self.n_sum)])


def init_detector(
    rng: np.random.Generator,
    n_sum: int = 4,
    m_max: int = 4,
    ksize: int = 25,
    store: ParamStore | None = None,
) -> DetectorParams:
    if ksize % 2 == 0:
        raise ShapeError(f"detector kernel size must be odd, got {ksize}")
    if store is None:
        store = ParamStore()
    w = rng.normal(size=(n_sum * m_max, 1, ksize, ksize)) / ksize
    store.add("detector/w", w)
    store.add("detector/b", np.zeros(n_sum * m_max))
    store.add("detector/meta", np.array([n_sum, m_max, ksize], dtype=np.float64), trainable=False)
    return DetectorParams(n_sum=n_sum, m_max=m_max, ksize=ksize, store=store)


def detector_from_store(store: ParamStore) -> DetectorParams:
    if "detector/meta" not in store:
        raise ShapeError("store holds no detector namespace")
    n_sum, m_max, ksize = (int(v) for v in store["detector/meta"].data)
    return DetectorParams(n_sum=n_sum, m_max=m_max, ksize=ksize, store=store)


def score_map(patch, det: DetectorParams, frozen: bool = False) -> Tensor:
    """Same-resolution detector response of a patch.

    Accepts (H, W), (1, H, W) or (B, 1, H, W); pads with k//2 so the
    output matches the input extent.  The max over m routes gradients
    through the winning filter only.  With `frozen` the filter bank is
    detached and no tape is built for it.
    """
    t = patch if isinstance(patch, Tensor) else Tensor(patch)
    squeeze = t.ndim < 4
    if t.ndim == 2:
        t = t.reshape((1, 1) + t.shape)
    elif t.ndim == 3:
        t = t.reshape((1,) + t.shape)
    if t.ndim != 4 or t.shape[1] != 1:
        raise ShapeError(f"score_map expects single-channel patches, got {t.shape}")
    w, b = det.weights, det.bias
    if frozen:
        w, b = w.detach(), b.detach()
    resp = conv2d(t, w, b, stride=1, pad=det.ksize // 2)
    bsz, _, h, wid = resp.shape
    resp = resp.reshape((bsz, det.n_sum, det.m_max, h, wid))
    winner = MaxReduce.apply(resp, axis=2)
    signed = winner * det.deltas[None, :, None, None]
    out = Sum.apply(signed, axis=1, keepdims=True)
    return out.reshape((h, wid)) if squeeze else out


def detect_patch(patch, det: DetectorParams, beta: float = 10.0) -> Tensor:
    """Soft (x, y) location of the strongest response inside a patch."""
    return softargmax(score_map(patch, det), beta=beta)


# ---------------------------------------------------------------------------
# scale-space runtime
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScaleSpaceConfig:
    num_levels: int = 9
    scale_factor: float = 2.0 ** (1.0 / 3.0)
    base_sigma: float = 1.6
    nms_radius: int = 5
    nms_scale_radius: int = 1
    score_threshold: float = 0.0
    max_keypoints: int = 1000


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    sigma: float
    theta: float
    score: float


def _block_average_2x(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    img = img[: h - h % 2, : w - w % 2]
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def _resize_bilinear(img: np.ndarray, factor: float) -> np.ndarray:
    """Shrink by `factor` (>= 1) sampling at area-consistent centers."""
    h, w = img.shape
    oh = max(1, int(np.floor(h / factor)))
    ow = max(1, int(np.floor(w / factor)))
    ys = factor * (np.arange(oh) + 0.5) - 0.5
    xs = factor * (np.arange(ow) + 0.5) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    return (
        img[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + img[np.ix_(y0, x1)] * (1 - fy) * fx
        + img[np.ix_(y1, x0)] * fy * (1 - fx)
        + img[np.ix_(y1, x1)] * fy * fx
    )


def build_pyramid(image: np.ndarray, cfg: ScaleSpaceConfig) -> list[tuple[np.ndarray, float]]:
    """Level images with their nominal downsampling factors.

    Octave bases come from exact 2x block averaging; sub-levels are
    bilinear shrinks of the nearest base below.  Level l has factor
    scale_factor**l, and a pixel (x, y) there sits at original
    coordinates factor * (x + 0.5) - 0.5.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"build_pyramid expects a 2-d grayscale image, got {image.shape}")
    bases = [image]
    levels = []
    for lvl in range(cfg.num_levels):
        factor = cfg.scale_factor ** lvl
        octave = int(np.floor(np.log2(factor) + 1e-9))
        while len(bases) <= octave:
            bases.append(_block_average_2x(bases[-1]))
        rel = factor / (2.0 ** octave)
        base = bases[octave]
        lvl_img = base if abs(rel - 1.0) < 1e-9 else _resize_bilinear(base, rel)
        levels.append((lvl_img, factor))
    return levels


def _level_to_original(coord: float, factor: float) -> float:
    return factor * (coord + 0.5) - 0.5


def _original_to_level(coord: float, factor: float) -> float:
    return (coord + 0.5) / factor - 0.5


def nms3d(
    score_maps: list[np.ndarray],
    cfg: ScaleSpaceConfig,
    margins: list[int] | None = None,
    factors: list[float] | None = None,
) -> list[tuple[int, int, int, float]]:
    """Strict 3-D non-max suppression over a stack of score maps.

    A candidate survives when its score exceeds the threshold, is never
    beaten inside the spatial radius at any level within the scale
    radius (comparing across levels at nearest reprojected coordinates),
    wins every tie by smallest (level, y, x), and strictly exceeds at
    least one neighbor so constant regions yield nothing.  Comparisons
    ignore a per-level border margin where padding contaminates scores.
    Returns (level, y, x, score) tuples.
    """
    if factors is None:
        factors = [cfg.scale_factor ** lvl for lvl in range(len(score_maps))]
    if margins is None:
        margins = [0] * len(score_maps)
    r = cfg.nms_radius
    size = 2 * r + 1
    results: list[tuple[int, int, int, float]] = []
    interiors = []
    for s, m in zip(score_maps, margins):
        h, w = s.shape
        interiors.append((m, h - m, m, w - m))  # y0, y1, x0, x1 half-open

    def window(lvl: int, cy: int, cx: int):
        y0, y1, x0, x1 = interiors[lvl]
        s = score_maps[lvl]
        ay0, ay1 = max(y0, cy - r), min(y1, cy + r + 1)
        ax0, ax1 = max(x0, cx - r), min(x1, cx + r + 1)
        if ay0 >= ay1 or ax0 >= ax1:
            return None
        return s[ay0:ay1, ax0:ax1], ay0, ax0

    for lvl, (s, m) in enumerate(zip(score_maps, margins)):
        y0, y1, x0, x1 = interiors[lvl]
        if y0 >= y1 or x0 >= x1:
            continue
        inner = s[y0:y1, x0:x1]
        local_max = ndimage.maximum_filter(inner, size=size, mode="constant", cval=-np.inf)
        cand_y, cand_x = np.nonzero((inner >= local_max) & (inner > cfg.score_threshold))
        for cy, cx in zip(cand_y + y0, cand_x + x0):
            score = s[cy, cx]
            ok = True
            beats_someone = False
            for lvl2 in range(
                max(0, lvl - cfg.nms_scale_radius),
                min(len(score_maps), lvl + cfg.nms_scale_radius + 1),
            ):
                if lvl2 == lvl:
                    wy, wx = int(cy), int(cx)
                else:
                    ox = _level_to_original(float(cx), factors[lvl])
                    oy = _level_to_original(float(cy), factors[lvl])
                    wx = int(round(_original_to_level(ox, factors[lvl2])))
                    wy = int(round(_original_to_level(oy, factors[lvl2])))
                win = window(lvl2, wy, wx)
                if win is None:
                    continue
                block, by, bx = win
                if (block > score).any():
                    ok = False
                    break
                if (block < score).any():
                    beats_someone = True
                ties = np.argwhere(block == score)
                for ty, tx in ties:
                    ny, nx = by + int(ty), bx + int(tx)
                    if lvl2 == lvl and ny == cy and nx == cx:
                        continue
                    if (lvl2, ny, nx) < (lvl, int(cy), int(cx)):
                        ok = False
                        break
                if not ok:
                    break
            if ok and beats_someone:
                results.append((lvl, int(cy), int(cx), float(score)))
    return results


def detect_multiscale(
    image: np.ndarray, det: DetectorParams, cfg: ScaleSpaceConfig
) -> list[Keypoint]:
    """Run the detector over a pyramid and return capped, sorted keypoints.

    Levels too small for the filter are skipped with a warning.  Output
    is sorted by descending score (ties by level, y, x) and truncated to
    `cfg.max_keypoints`.
    """
    levels = build_pyramid(image, cfg)
    margin = det.ksize // 2
    maps: list[np.ndarray] = []
    factors: list[float] = []
    margins: list[int] = []
    for lvl_img, factor in levels:
        if min(lvl_img.shape) < det.ksize:
            warnings.warn(
                f"pyramid level with shape {lvl_img.shape} smaller than filter "
                f"size {det.ksize}, skipped"
            )
            continue
        resp = score_map(lvl_img, det, frozen=True)
        maps.append(resp.data)
        factors.append(factor)
        margins.append(margin)
    peaks = nms3d(maps, cfg, margins=margins, factors=factors)
    kps = []
    for lvl, y, x, score in peaks:
        f = factors[lvl]
        kps.append(
            (
                score,
                lvl,
                y,
                x,
                Keypoint(
                    x=_level_to_original(float(x), f),
                    y=_level_to_original(float(y), f),
                    sigma=cfg.base_sigma * f,
                    theta=0.0,
                    score=score,
                ),
            )
        )
    kps.sort(key=lambda t: (-t[0], t[1], t[2], t[3]))
    return [k[-1] for k in kps[: cfg.max_keypoints]]


# ---------------------------------------------------------------------------
# keypoint file format
# ---------------------------------------------------------------------------

_KP_HEADER = "# x y sigma theta score"


def write_keypoints(path, keypoints: list[Keypoint]) -> None:
    """One keypoint per line, 6-decimal fixed point, '#' header."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_KP_HEADER + "\n")
        for kp in keypoints:
            fh.write(
                f"{kp.x:.6f} {kp.y:.6f} {kp.sigma:.6f} {kp.theta:.6f} {kp.score:.6f}\n"
            )


def read_keypoints(path) -> list[Keypoint]:
    kps = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ShapeError(f"{path}: malformed keypoint line {lineno}: {line!r}")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise ShapeError(f"{path}: malformed keypoint line {lineno}: {line!r}") from None
            kps.append(Keypoint(*vals))
    return kps
