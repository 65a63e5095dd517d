"""Training data: synthetic planar scenes, patch extraction, quadruplets.

Scenes are analytic functions on a world plane (value-noise background
plus elliptical blobs, each with a satellite dot fixing an unambiguous
orientation).  Views render the scene directly through each view's
homography, so cross-view correspondences are exact by construction
rather than resampled approximations.

Conventions for keypoint records:

* (x, y) are pixel coordinates in the record's image, x along columns;
* sigma is the blob scale in image pixels; a record's support region is
  a square of side support_mult * sigma centered on (x, y);
* theta_ref is the angle to feed rot_crop so the patch content lands in
  its canonical pose (satellite pointing +x).  For a view with local
  rotation alpha and a blob with world-plane satellite angle psi this
  is -psi - alpha.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .grad import NumericsError, ShapeError
from .geometry import PatchGeometry

__all__ = [
    "KeypointRecord",
    "DatasetStats",
    "SceneGroundTruth",
    "Quadruplet",
    "extract_patch",
    "perturb_location",
    "compute_stats",
    "synth_scenes",
    "build_quadruplets",
    "point_split",
    "write_pgm",
    "read_pgm",
    "write_manifest",
    "read_manifest",
]


@dataclass(frozen=True)
class KeypointRecord:
    image_id: str
    point3d_id: int | None
    x: float
    y: float
    sigma: float
    theta_ref: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ShapeError(f"record sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class DatasetStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ShapeError(f"stats std must be positive, got {self.std}")

    def normalize(self, a: np.ndarray) -> np.ndarray:
        return (np.asarray(a, dtype=np.float64) - self.mean) / self.std


@dataclass
class SceneGroundTruth:
    """Exact correspondences: per-pair homographies and per-image records.

    homographies maps (image_a, image_b) to the 3x3 H with
    x_b ~ H @ (x_a, y_a, 1); records maps image_id to its keypoint
    records, feature points first, non-feature samples after.
    """

    homographies: dict[tuple[str, str], np.ndarray]
    records: dict[str, list[KeypointRecord]]

    def pair_homography(self, a: str, b: str) -> np.ndarray:
        if (a, b) in self.homographies:
            return self.homographies[(a, b)]
        if (b, a) in self.homographies:
            return np.linalg.inv(self.homographies[(b, a)])
        raise ShapeError(f"no ground-truth homography for pair ({a}, {b})")


@dataclass
class Quadruplet:
    """Training sample: two views of one point, one other point, one
    non-feature patch.  Locations are the true (unperturbed) feature
    positions inside each extracted patch; thetas are the records'
    canonical angles."""

    p1: np.ndarray
    p2: np.ndarray
    p3: np.ndarray
    p4: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray
    theta1: float
    theta2: float
    theta3: float


# ---------------------------------------------------------------------------
# patch extraction
# ---------------------------------------------------------------------------


def extract_patch(
    image: np.ndarray,
    rec: KeypointRecord,
    geom: PatchGeometry = PatchGeometry(),
    stats: DatasetStats | None = None,
) -> np.ndarray:
    """Standardized patch: a support_mult*sigma square resampled to SxS.

    Bilinear sampling, zero outside the image.  Output pixel (i, j)
    reads the image at (x + (j - (S-1)/2) * step, y + ...) with
    step = support_mult * sigma / S, so the record center always lands
    in the middle of the patch.
    """
    if not rec.sigma > 0:
        raise ShapeError(f"extract_patch needs sigma > 0, got {rec.sigma}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"extract_patch expects a 2-d image, got shape {img.shape}")
    size = geom.outer
    step = geom.support_mult * rec.sigma / size
    offs = (np.arange(size) - (size - 1) / 2.0) * step
    sx = rec.x + offs
    sy = rec.y + offs
    cols, rows = np.meshgrid(sx, sy)
    patch = map_coordinates(
        img, np.stack([rows, cols]), order=1, mode="constant", cval=0.0
    )
    if stats is not None:
        patch = stats.normalize(patch)
    return patch


def perturb_location(
    rec: KeypointRecord, rng: np.random.Generator, range_frac: float = 0.20
) -> KeypointRecord:
    """Uniform location jitter over range_frac of the support width.

    The default 0.20 gives offsets in [-2.4 sigma, +2.4 sigma] per axis
    (x drawn first, then y).  Scale and orientation are untouched.
    """
    half = 0.5 * range_frac * PatchGeometry().support_mult * rec.sigma
    dx = rng.uniform(-half, half)
    dy = rng.uniform(-half, half)
    return replace(rec, x=rec.x + dx, y=rec.y + dy)


def compute_stats(patches) -> DatasetStats:
    """Population mean/std over every pixel of a patch stream."""
    count = 0
    total = 0.0
    total_sq = 0.0
    n_patches = 0
    for p in patches:
        a = np.asarray(p, dtype=np.float64)
        count += a.size
        total += float(a.sum())
        total_sq += float((a * a).sum())
        n_patches += 1
    if n_patches < 2:
        raise ShapeError(f"compute_stats needs at least 2 patches, got {n_patches}")
    mean = total / count
    var = total_sq / count - mean * mean
    var = max(var, 0.0)
    std = float(np.sqrt(var))
    if std <= 1e-12:
        raise ShapeError("degenerate dataset: zero variance across patches")
    return DatasetStats(mean=float(mean), std=std)


# ---------------------------------------------------------------------------
# homography helpers
# ---------------------------------------------------------------------------


def project(h: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Apply a 3x3 homography to (..., 2) points."""
    pts = np.asarray(xy, dtype=np.float64)
    ones = np.ones(pts.shape[:-1] + (1,))
    hom = np.concatenate([pts, ones], axis=-1) @ np.asarray(h).T
    return hom[..., :2] / hom[..., 2:3]


def homography_jacobian(h: np.ndarray, xy: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """2x2 local Jacobian of the projective map at a point."""
    x = np.asarray(xy, dtype=np.float64)
    jx = (project(h, x + [eps, 0]) - project(h, x - [eps, 0])) / (2 * eps)
    jy = (project(h, x + [0, eps]) - project(h, x - [0, eps])) / (2 * eps)
    return np.stack([jx, jy], axis=-1)


def local_angle_scale(h: np.ndarray, xy: np.ndarray) -> tuple[float, float]:
    """Rotation angle and isotropic scale of the map around a point."""
    j = homography_jacobian(h, xy)
    alpha = float(np.arctan2(j[1, 0] - j[0, 1], j[0, 0] + j[1, 1]))
    scale = float(np.sqrt(abs(np.linalg.det(j))))
    return alpha, scale


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

SIGMA_RANGE = (1.4, 2.4)
FEATURE_BOX_MARGIN = 32.0  # feature centers live in center +- this, world px
SATELLITE_DIST_SIGMA = 3.0
NOISE_CELL = 16.0


@dataclass(frozen=True)
class _Blob:
    cx: float
    cy: float
    sigma: float
    aspect: float
    angle: float
    amp: float
    psi: float  # satellite direction on the world plane


def _blob_field(blob: _Blob, xw: np.ndarray, yw: np.ndarray) -> np.ndarray:
    sa = blob.sigma * np.sqrt(blob.aspect)
    sb = blob.sigma / np.sqrt(blob.aspect)
    c, s = np.cos(blob.angle), np.sin(blob.angle)
    dx = xw - blob.cx
    dy = yw - blob.cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    main = blob.amp * np.exp(-0.5 * ((u / sa) ** 2 + (v / sb) ** 2))
    r = SATELLITE_DIST_SIGMA * blob.sigma
    mx = blob.cx + r * np.cos(blob.psi)
    my = blob.cy + r * np.sin(blob.psi)
    ss = 0.6 * blob.sigma
    sat = -0.8 * blob.amp * np.exp(-0.5 * (((xw - mx) / ss) ** 2 + ((yw - my) / ss) ** 2))
    return main + sat


def _value_noise(lattice: np.ndarray, xw: np.ndarray, yw: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of a coarse random lattice, clamped at the
    border so out-of-canvas world coordinates stay defined."""
    n = lattice.shape[0]
    u = np.clip(xw / NOISE_CELL + 1.0, 0.0, n - 1.001)
    v = np.clip(yw / NOISE_CELL + 1.0, 0.0, n - 1.001)
    return map_coordinates(lattice, np.stack([v, u]), order=1, mode="nearest")


def _random_homography(rng: np.random.Generator, size: int) -> np.ndarray:
    """Center similarity (rotation, scale, translation) plus a touch of
    perspective."""
    angle = rng.uniform(-np.pi / 4, np.pi / 4)
    scale = rng.uniform(0.8, 1.25)
    tx, ty = rng.uniform(-8.0, 8.0, size=2)
    px, py = rng.uniform(-3e-4, 3e-4, size=2)
    cx = cy = (size - 1) / 2.0
    c, s = np.cos(angle), np.sin(angle)
    sim = np.array(
        [
            [scale * c, -scale * s, 0.0],
            [scale * s, scale * c, 0.0],
            [0.0, 0.0, 1.0],
        ]
    )
    pre = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    post = np.array([[1, 0, cx + tx], [0, 1, cy + ty], [0, 0, 1.0]])
    h = post @ sim @ pre
    h[2, 0] = px
    h[2, 1] = py
    return h / h[2, 2]


def _sample_feature_centers(
    rng: np.random.Generator, count: int, size: int, min_dist: float
) -> np.ndarray:
    lo = (size - 1) / 2.0 - FEATURE_BOX_MARGIN
    hi = (size - 1) / 2.0 + FEATURE_BOX_MARGIN
    centers: list[np.ndarray] = []
    tries = 0
    while len(centers) < count:
        cand = rng.uniform(lo, hi, size=2)
        tries += 1
        if tries > 4000:
            raise NumericsError("could not place feature centers; box too crowded")
        if all(np.linalg.norm(cand - c) >= min_dist for c in centers):
            centers.append(cand)
    return np.array(centers)


def _sample_nonfeature(
    rng: np.random.Generator,
    size: int,
    feature_xy: np.ndarray,
    min_dist: float,
) -> np.ndarray:
    lo, hi = 30.0, size - 1 - 30.0
    best = None
    best_d = -1.0
    for _ in range(200):
        cand = rng.uniform(lo, hi, size=2)
        d = float(np.min(np.linalg.norm(feature_xy - cand, axis=1)))
        if d > min_dist:
            return cand
        if d > best_d:
            best, best_d = cand, d
    # corners are the emptiest spots on this layout; take the best seen
    corners = np.array([[lo, lo], [lo, hi], [hi, lo], [hi, hi]])
    for cand in corners:
        d = float(np.min(np.linalg.norm(feature_xy - cand, axis=1)))
        if d > best_d:
            best, best_d = cand, d
    return np.asarray(best)


def synth_scenes(
    seed: int,
    num_scenes: int,
    views_per_scene: int,
    image_size: int = 256,
    features_per_scene: int = 6,
    nonfeatures_per_view: int = 2,
) -> tuple[dict[str, np.ndarray], SceneGroundTruth]:
    """Analytic planar scenes rendered under exact homographies.

    View 0 of every scene is the identity view.  Images are quantized
    to 8 bits before being returned so the in-memory arrays match what
    lands on disk byte for byte.
    """
    images: dict[str, np.ndarray] = {}
    homographies: dict[tuple[str, str], np.ndarray] = {}
    records: dict[str, list[KeypointRecord]] = {}
    support = PatchGeometry().support_mult
    for scene in range(num_scenes):
        rng = np.random.default_rng(seed ^ (scene + 1))
        lattice_n = int(image_size / NOISE_CELL) + 3
        lattice = rng.uniform(0.35, 0.65, size=(lattice_n, lattice_n))
        centers = _sample_feature_centers(
            rng, features_per_scene, image_size, min_dist=16.0
        )
        blobs = []
        for k in range(features_per_scene):
            sign = 1.0 if rng.uniform() < 0.5 else -1.0
            blobs.append(
                _Blob(
                    cx=centers[k, 0],
                    cy=centers[k, 1],
                    sigma=rng.uniform(*SIGMA_RANGE),
                    aspect=rng.uniform(1.0, 1.6),
                    angle=rng.uniform(0.0, np.pi),
                    amp=sign * rng.uniform(0.35, 0.5),
                    psi=rng.uniform(0.0, 2 * np.pi),
                )
            )
        views = [np.eye(3)]
        for _ in range(1, views_per_scene):
            views.append(_random_homography(rng, image_size))
        ids = [f"s{scene:03d}_v{v}" for v in range(views_per_scene)]
        grid = np.arange(image_size, dtype=np.float64)
        gx, gy = np.meshgrid(grid, grid)
        pix = np.stack([gx, gy], axis=-1)
        for v, (vid, hv) in enumerate(zip(ids, views)):
            world = pix if v == 0 else project(np.linalg.inv(hv), pix)
            xw, yw = world[..., 0], world[..., 1]
            img = _value_noise(lattice, xw, yw)
            for blob in blobs:
                img += _blob_field(blob, xw, yw)
            img = np.clip(img, 0.0, 1.0)
            img = np.round(img * 255.0) / 255.0
            images[vid] = img
            recs = []
            for pid, blob in enumerate(blobs):
                center = project(hv, np.array([blob.cx, blob.cy]))
                alpha, sc = local_angle_scale(hv, np.array([blob.cx, blob.cy]))
                recs.append(
                    KeypointRecord(
                        image_id=vid,
                        point3d_id=scene * 1000 + pid,
                        x=float(center[0]),
                        y=float(center[1]),
                        sigma=blob.sigma * sc,
                        theta_ref=float(-blob.psi - alpha),
                    )
                )
            feature_xy = np.array([[r.x, r.y] for r in recs])
            sigma_max = max(r.sigma for r in recs)
            for _ in range(nonfeatures_per_view):
                spot = _sample_nonfeature(
                    rng, image_size, feature_xy, min_dist=support * sigma_max
                )
                recs.append(
                    KeypointRecord(
                        image_id=vid,
                        point3d_id=None,
                        x=float(spot[0]),
                        y=float(spot[1]),
                        sigma=float(rng.uniform(*SIGMA_RANGE)),
                        theta_ref=0.0,
                    )
                )
            records[vid] = recs
        for i in range(views_per_scene):
            for j in range(i + 1, views_per_scene):
                h_ab = views[j] @ np.linalg.inv(views[i])
                homographies[(ids[i], ids[j])] = h_ab / h_ab[2, 2]
    return images, SceneGroundTruth(homographies=homographies, records=records)


# ---------------------------------------------------------------------------
# quadruplets
# ---------------------------------------------------------------------------


def point_split(point3d_id: int) -> str:
    """Deterministic 80/20 split keyed on the 3D point identity."""
    digest = hashlib.md5(str(int(point3d_id)).encode()).hexdigest()
    return "train" if int(digest, 16) % 10 < 8 else "val"


def _patch_location(rec: KeypointRecord, perturbed: KeypointRecord, size: int) -> np.ndarray:
    """True feature position inside the patch extracted at the
    perturbed center."""
    step = PatchGeometry(outer=size).support_mult * rec.sigma / size
    cx = (size - 1) / 2.0 + (rec.x - perturbed.x) / step
    cy = (size - 1) / 2.0 + (rec.y - perturbed.y) / step
    return np.array([cx, cy])


def build_quadruplets(
    gt: SceneGroundTruth,
    images: dict[str, np.ndarray],
    stats: DatasetStats,
    rng: np.random.Generator,
    geom: PatchGeometry = PatchGeometry(),
    split: str | None = None,
    limit: int | None = None,
    perturb_frac: float = 0.20,
):
    """Stream of training quadruplets (a generator).

    P1/P2 come from two views of one 3D point, P3 from a different
    point, P4 from a non-feature record.  Every patch center is
    perturbed before extraction; the stored locations point back at the
    true feature position inside each patch.
    """
    by_point: dict[int, list[KeypointRecord]] = {}
    nonfeatures: list[KeypointRecord] = []
    for recs in gt.records.values():
        for r in recs:
            if r.point3d_id is None:
                nonfeatures.append(r)
            else:
                by_point.setdefault(r.point3d_id, []).append(r)
    eligible = sorted(
        pid
        for pid, views in by_point.items()
        if len(views) >= 2 and (split is None or point_split(pid) == split)
    )
    if len(eligible) < 2:
        raise ShapeError(
            f"need at least 2 multi-view points in split {split!r}, got {len(eligible)}"
        )
    if not nonfeatures:
        raise ShapeError("dataset has no non-feature records for P4 patches")

    def prepared(rec: KeypointRecord):
        pert = perturb_location(rec, rng, perturb_frac)
        patch = extract_patch(images[rec.image_id], pert, geom, stats)
        return patch, _patch_location(rec, pert, geom.outer)

    emitted = 0
    while limit is None or emitted < limit:
        pid = eligible[rng.integers(len(eligible))]
        views = by_point[pid]
        i, j = rng.choice(len(views), size=2, replace=False)
        others = [q for q in eligible if q != pid]
        qid = others[rng.integers(len(others))]
        r3 = by_point[qid][rng.integers(len(by_point[qid]))]
        r4 = nonfeatures[rng.integers(len(nonfeatures))]
        r1, r2 = views[i], views[j]
        p1, x1 = prepared(r1)
        p2, x2 = prepared(r2)
        p3, x3 = prepared(r3)
        pert4 = perturb_location(r4, rng, perturb_frac)
        p4 = extract_patch(images[r4.image_id], pert4, geom, stats)
        yield Quadruplet(
            p1=p1, p2=p2, p3=p3, p4=p4,
            x1=x1, x2=x2, x3=x3,
            theta1=r1.theta_ref, theta2=r2.theta_ref, theta3=r3.theta_ref,
        )
        emitted += 1


def training_stats(
    gt: SceneGroundTruth,
    images: dict[str, np.ndarray],
    geom: PatchGeometry = PatchGeometry(),
    cap: int = 512,
) -> DatasetStats:
    """Normalization stats over unperturbed train-split feature patches."""
    patches = []
    for vid in sorted(gt.records):
        for rec in gt.records[vid]:
            if rec.point3d_id is None or point_split(rec.point3d_id) != "train":
                continue
            patches.append(extract_patch(images[vid], rec, geom))
            if len(patches) >= cap:
                return compute_stats(patches)
    return compute_stats(patches)


# ---------------------------------------------------------------------------
# manifest and image files
# ---------------------------------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255) from a [0, 1] grayscale array."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"write_pgm expects a 2-d image, got shape {img.shape}")
    q = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P5"):
        raise ShapeError(f"{path}: not a binary PGM (missing P5 magic)")
    # header = magic, width, height, maxval; '#' comments allowed
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3 and pos < len(blob):
        ch = blob[pos : pos + 1]
        if ch == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(blob) and not blob[pos : pos + 1].isspace():
                pos += 1
            tokens.append(blob[start:pos])
    if len(tokens) < 3:
        raise ShapeError(f"{path}: truncated PGM header")
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ShapeError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    data = blob[pos : pos + w * h]
    if len(data) != w * h:
        raise ShapeError(f"{path}: expected {w * h} pixel bytes, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def write_manifest(
    outdir,
    images: dict[str, np.ndarray],
    gt: SceneGroundTruth,
    stats: DatasetStats | None = None,
) -> None:
    out = Path(outdir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for vid in sorted(images):
        write_pgm(out / "images" / f"{vid}.pgm", images[vid])
    with open(out / "records.txt", "w") as fh:
        for vid in sorted(gt.records):
            for r in gt.records[vid]:
                pid = "none" if r.point3d_id is None else str(r.point3d_id)
                fh.write(
                    f"{r.image_id} {pid} {r.x:.10g} {r.y:.10g} "
                    f"{r.sigma:.10g} {r.theta_ref:.10g}\n"
                )
    with open(out / "pairs.txt", "w") as fh:
        for (a, b) in sorted(gt.homographies):
            vals = " ".join(f"{v:.12g}" for v in gt.homographies[(a, b)].reshape(-1))
            fh.write(f"{a} {b} {vals}\n")
    if stats is not None:
        with open(out / "stats.txt", "w") as fh:
            fh.write(f"{stats.mean:.12g} {stats.std:.12g}\n")


def read_manifest(indir):
    """Load a dataset directory back into (images, gt, stats-or-None)."""
    root = Path(indir)
    if not (root / "records.txt").exists():
        raise ShapeError(f"{indir}: not a dataset directory (records.txt missing)")
    images: dict[str, np.ndarray] = {}
    for p in sorted((root / "images").glob("*.pgm")):
        images[p.stem] = read_pgm(p)
    records: dict[str, list[KeypointRecord]] = {}
    with open(root / "records.txt") as fh:
        for ln, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ShapeError(f"records.txt line {ln}: expected 6 fields")
            vid, pid = parts[0], parts[1]
            records.setdefault(vid, []).append(
                KeypointRecord(
                    image_id=vid,
                    point3d_id=None if pid == "none" else int(pid),
                    x=float(parts[2]),
                    y=float(parts[3]),
                    sigma=float(parts[4]),
                    theta_ref=float(parts[5]),
                )
            )
    homographies: dict[tuple[str, str], np.ndarray] = {}
    pairs_path = root / "pairs.txt"
    if pairs_path.exists():
        with open(pairs_path) as fh:
            for ln, line in enumerate(fh, start=1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != 11:
                    raise ShapeError(f"pairs.txt line {ln}: expected 11 fields")
                h = np.array([float(v) for v in parts[2:]]).reshape(3, 3)
                homographies[(parts[0], parts[1])] = h
    stats = None
    stats_path = root / "stats.txt"
    if stats_path.exists():
        vals = stats_path.read_text().split()
        if len(vals) != 2:
            raise ShapeError("stats.txt: expected two numbers (mean, std)")
        stats = DatasetStats(mean=float(vals[0]), std=float(vals[1]))
    return images, SceneGroundTruth(homographies=homographies, records=records), stats
