"""Homography benchmark: correspondences, matching, and the three metrics.

Everything here works on keypoint lists plus aligned descriptor rows
for one image pair under a known homography.  Metrics that would
divide by zero are reported as undefined (Python None, the string
"undefined" in CSV) rather than silently collapsing to 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import project
from .detector import Keypoint
from .grad import ShapeError

__all__ = [
    "METRICS_HEADER",
    "PairGroundTruth",
    "PairMetrics",
    "evaluate_pair",
    "gt_correspondences",
    "in_region_masks",
    "matching_score",
    "nn_map",
    "nn_match",
    "read_gt_file",
    "read_metrics_csv",
    "render_matches",
    "repeatability",
    "summary_table",
    "write_gt_file",
    "write_metrics_csv",
]

METRICS_HEADER = "pair_id,repeatability,nn_map,matching_score"
DEFAULT_TOL_PX = 5.0
DEFAULT_BASE_SIGMA = 1.6


@dataclass(frozen=True)
class PairGroundTruth:
    """Homography from image a to image b plus the two image shapes.

    The shared viewpoint region is derived from the shapes: a point
    counts as shared when it lies inside its own image and its
    projection lands inside the other."""

    h_ab: np.ndarray
    shape_a: tuple[int, int]
    shape_b: tuple[int, int]

    def __post_init__(self):
        h = np.asarray(self.h_ab, dtype=np.float64)
        if h.shape != (3, 3):
            raise ShapeError(f"homography must be 3x3, got {h.shape}")
        if abs(np.linalg.det(h)) < 1e-12:
            raise ShapeError("homography is not invertible")
        object.__setattr__(self, "h_ab", h)

    @property
    def h_ba(self) -> np.ndarray:
        return np.linalg.inv(self.h_ab)


def _in_bounds(xy: np.ndarray, shape: tuple[int, int]) -> bool:
    rows, cols = shape
    return bool(0.0 <= xy[0] <= cols - 1 and 0.0 <= xy[1] <= rows - 1)


def in_region_masks(
    kps_a: list[Keypoint], kps_b: list[Keypoint], gt: PairGroundTruth
) -> tuple[np.ndarray, np.ndarray]:
    """Boolean masks for keypoints inside the shared viewpoint region."""
    h_ba = gt.h_ba
    mask_a = np.array(
        [
            _in_bounds(np.array([k.x, k.y]), gt.shape_a)
            and _in_bounds(project(gt.h_ab, np.array([k.x, k.y])), gt.shape_b)
            for k in kps_a
        ],
        dtype=bool,
    )
    mask_b = np.array(
        [
            _in_bounds(np.array([k.x, k.y]), gt.shape_b)
            and _in_bounds(project(h_ba, np.array([k.x, k.y])), gt.shape_a)
            for k in kps_b
        ],
        dtype=bool,
    )
    return mask_a, mask_b


def gt_correspondences(
    kps_a: list[Keypoint],
    kps_b: list[Keypoint],
    gt: PairGroundTruth,
    tol_px: float = DEFAULT_TOL_PX,
    base_sigma: float = DEFAULT_BASE_SIGMA,
) -> list[tuple[int, int]]:
    """Ground-truth index pairs (a, b), one-to-one.

    A pair qualifies when both keypoints sit in the shared region and
    the projection of a lands within tol_px of b, with the tolerance
    widened by the candidate's scale above base_sigma.  Conflicts are
    resolved greedily by ascending reprojection distance, ties by
    index order, so the result is deterministic."""
    mask_a, mask_b = in_region_masks(kps_a, kps_b, gt)
    candidates = []
    for i, ka in enumerate(kps_a):
        if not mask_a[i]:
            continue
        proj = project(gt.h_ab, np.array([ka.x, ka.y]))
        for j, kb in enumerate(kps_b):
            if not mask_b[j]:
                continue
            dist = float(np.hypot(proj[0] - kb.x, proj[1] - kb.y))
            if dist <= tol_px * max(1.0, kb.sigma / base_sigma):
                candidates.append((dist, i, j))
    candidates.sort()
    used_a: set[int] = set()
    used_b: set[int] = set()
    pairs = []
    for dist, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    return pairs


def repeatability(
    kps_a: list[Keypoint],
    kps_b: list[Keypoint],
    gt: PairGroundTruth,
    tol_px: float = DEFAULT_TOL_PX,
    base_sigma: float = DEFAULT_BASE_SIGMA,
) -> float | None:
    """Shared-region correspondence ratio, or None when either side
    has no keypoints in the shared region."""
    mask_a, mask_b = in_region_masks(kps_a, kps_b, gt)
    denom = min(int(mask_a.sum()), int(mask_b.sum()))
    if denom == 0:
        return None
    pairs = gt_correspondences(kps_a, kps_b, gt, tol_px, base_sigma)
    return len(pairs) / denom


def nn_match(desc_a: np.ndarray, desc_b: np.ndarray) -> list[tuple[int, int, float]]:
    """Nearest neighbor of every a-descriptor among the b-descriptors.

    Rows are (index_a, index_b, distance); each index_a appears once,
    ties on distance go to the lower index_b."""
    da = np.asarray(desc_a, dtype=np.float64)
    db = np.asarray(desc_b, dtype=np.float64)
    if da.ndim != 2 or db.ndim != 2:
        raise ShapeError("descriptors must be 2-d arrays (count, dim)")
    if da.shape[0] == 0 or db.shape[0] == 0:
        return []
    if da.shape[1] != db.shape[1]:
        raise ShapeError(
            f"descriptor dimensions differ: {da.shape[1]} vs {db.shape[1]}"
        )
    d2 = (
        np.sum(da * da, axis=1)[:, None]
        + np.sum(db * db, axis=1)[None, :]
        - 2.0 * da @ db.T
    )
    np.maximum(d2, 0.0, out=d2)
    nearest = np.argmin(d2, axis=1)
    return [
        (int(i), int(j), float(np.sqrt(d2[i, j])))
        for i, j in enumerate(nearest)
    ]


def nn_map(
    desc_a: np.ndarray,
    desc_b: np.ndarray,
    gt_pairs: list[tuple[int, int]],
) -> float | None:
    """Area under the precision-recall curve of nearest-neighbor
    matching, swept over the match-distance threshold.

    A putative match (a, NN(a)) is correct iff it appears in gt_pairs;
    recall is counted against all of gt_pairs.  None when gt_pairs is
    empty."""
    if not gt_pairs:
        return None
    matches = nn_match(desc_a, desc_b)
    truth = set(gt_pairs)
    ordered = sorted(matches, key=lambda m: (m[2], m[0]))
    total = len(gt_pairs)
    points = [(0.0, 1.0)]
    tp = fp = 0
    k = 0
    while k < len(ordered):
        # admit every match at the current threshold distance together
        dist = ordered[k][2]
        while k < len(ordered) and ordered[k][2] == dist:
            i, j, _ = ordered[k]
            if (i, j) in truth:
                tp += 1
            else:
                fp += 1
            k += 1
        points.append((tp / total, tp / (tp + fp)))
    auc = 0.0
    for (r0, p0), (r1, p1) in zip(points[:-1], points[1:]):
        auc += (r1 - r0) * (p0 + p1) / 2.0
    return auc


def matching_score(
    kps_a: list[Keypoint],
    desc_a: np.ndarray,
    kps_b: list[Keypoint],
    desc_b: np.ndarray,
    gt: PairGroundTruth,
    tol_px: float = DEFAULT_TOL_PX,
    base_sigma: float = DEFAULT_BASE_SIGMA,
) -> float | None:
    """Fraction of shared-region features recovered by the whole
    pipeline: nearest-neighbor matches that are also ground-truth
    correspondences, over the smaller in-region feature count."""
    if len(kps_a) != len(np.asarray(desc_a)) or len(kps_b) != len(np.asarray(desc_b)):
        raise ShapeError("keypoint and descriptor counts are misaligned")
    mask_a, mask_b = in_region_masks(kps_a, kps_b, gt)
    denom = min(int(mask_a.sum()), int(mask_b.sum()))
    if denom == 0:
        return None
    truth = set(gt_correspondences(kps_a, kps_b, gt, tol_px, base_sigma))
    matches = nn_match(desc_a, desc_b)
    recovered = sum(1 for i, j, _ in matches if (i, j) in truth)
    return recovered / denom


@dataclass(frozen=True)
class PairMetrics:
    pair_id: str
    repeatability: float | None
    nn_map: float | None
    matching_score: float | None


def evaluate_pair(
    pair_id: str,
    kps_a: list[Keypoint],
    desc_a: np.ndarray,
    kps_b: list[Keypoint],
    desc_b: np.ndarray,
    gt: PairGroundTruth,
    tol_px: float = DEFAULT_TOL_PX,
    base_sigma: float = DEFAULT_BASE_SIGMA,
) -> PairMetrics:
    pairs = gt_correspondences(kps_a, kps_b, gt, tol_px, base_sigma)
    return PairMetrics(
        pair_id=pair_id,
        repeatability=repeatability(kps_a, kps_b, gt, tol_px, base_sigma),
        nn_map=nn_map(desc_a, desc_b, pairs),
        matching_score=matching_score(
            kps_a, desc_a, kps_b, desc_b, gt, tol_px, base_sigma
        ),
    )


# ---------------------------------------------------------------------------
# files and reports
# ---------------------------------------------------------------------------


def write_gt_file(path, entries: list[tuple[str, str, np.ndarray]]) -> None:
    """One pair per line: the two image ids, then 9 row-major entries."""
    with open(path, "w", encoding="utf-8") as fh:
        for id_a, id_b, h in entries:
            vals = " ".join(f"{v:.12g}" for v in np.asarray(h, dtype=np.float64).reshape(-1))
            fh.write(f"{id_a} {id_b} {vals}\n")


def read_gt_file(path) -> list[tuple[str, str, np.ndarray]]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 11:
                raise ShapeError(
                    f"ground-truth file {path} line {lineno}: expected 11 fields, got {len(parts)}"
                )
            try:
                h = np.array([float(v) for v in parts[2:]]).reshape(3, 3)
            except ValueError as exc:
                raise ShapeError(
                    f"ground-truth file {path} line {lineno}: {exc}"
                ) from exc
            if abs(np.linalg.det(h)) < 1e-12:
                raise ShapeError(
                    f"ground-truth file {path} line {lineno}: homography is singular"
                )
            entries.append((parts[0], parts[1], h))
    return entries


def _fmt_metric(v: float | None) -> str:
    return "undefined" if v is None else f"{v:.12g}"


def write_metrics_csv(path, rows: list[PairMetrics]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(METRICS_HEADER + "\n")
        for m in rows:
            fh.write(
                f"{m.pair_id},{_fmt_metric(m.repeatability)},"
                f"{_fmt_metric(m.nn_map)},{_fmt_metric(m.matching_score)}\n"
            )


def read_metrics_csv(path) -> list[PairMetrics]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != METRICS_HEADER:
        raise ShapeError(f"metrics file {path}: missing header {METRICS_HEADER!r}")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise ShapeError(f"metrics file {path} line {lineno}: expected 4 fields")
        vals = [None if p == "undefined" else float(p) for p in parts[1:]]
        out.append(PairMetrics(parts[0], *vals))
    return out


def summary_table(rows: list[PairMetrics]) -> str:
    """Aligned text table with a mean row over the defined values."""
    header = ("pair", "repeatability", "nn_map", "matching_score")
    body = [
        (
            m.pair_id,
            _fmt_metric(None if m.repeatability is None else round(m.repeatability, 4)),
            _fmt_metric(None if m.nn_map is None else round(m.nn_map, 4)),
            _fmt_metric(None if m.matching_score is None else round(m.matching_score, 4)),
        )
        for m in rows
    ]

    def mean_of(pick):
        vals = [pick(m) for m in rows if pick(m) is not None]
        return None if not vals else round(float(np.mean(vals)), 4)

    body.append(
        (
            "mean",
            _fmt_metric(mean_of(lambda m: m.repeatability)),
            _fmt_metric(mean_of(lambda m: m.nn_map)),
            _fmt_metric(mean_of(lambda m: m.matching_score)),
        )
    )
    widths = [
        max(len(header[c]), max((len(r[c]) for r in body), default=0))
        for c in range(4)
    ]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    for r in body:
        lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
    return "\n".join(lines)


def render_matches(
    image_a: np.ndarray,
    kps_a: list[Keypoint],
    image_b: np.ndarray,
    kps_b: list[Keypoint],
    matches: list[tuple[int, int, float]],
    path,
    gap: int = 8,
) -> None:
    """Side-by-side PNG with a line per match and a dot per keypoint."""
    from PIL import Image, ImageDraw

    def to_u8(img):
        arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
        return (arr * 255.0 + 0.5).astype(np.uint8)

    a8, b8 = to_u8(image_a), to_u8(image_b)
    ha, wa = a8.shape
    hb, wb = b8.shape
    canvas = np.zeros((max(ha, hb), wa + gap + wb), dtype=np.uint8)
    canvas[:ha, :wa] = a8
    canvas[:hb, wa + gap:] = b8
    img = Image.fromarray(canvas).convert("RGB")
    draw = ImageDraw.Draw(img)
    shift = wa + gap
    for k in kps_a:
        draw.ellipse([k.x - 2, k.y - 2, k.x + 2, k.y + 2], outline=(255, 200, 0))
    for k in kps_b:
        draw.ellipse(
            [k.x - 2 + shift, k.y - 2, k.x + 2 + shift, k.y + 2],
            outline=(255, 200, 0),
        )
    for i, j, _ in matches:
        ka, kb = kps_a[i], kps_b[j]
        draw.line([(ka.x, ka.y), (kb.x + shift, kb.y)], fill=(0, 220, 0), width=1)
    img.save(path, format="PNG")
