"""Command-line surface: one binary, subcommand per workflow step.

Exit codes: 0 success, 1 usage error, 2 data or shape error, 3
numerical failure.  Every subcommand writes the fully resolved run
configuration (with per-key provenance) next to its outputs so a run
can be reproduced from the artifacts alone.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from .config import (
    RunConfig,
    make_arch,
    make_geometry,
    make_scale_config,
    make_training_config,
    parse_config_file,
    resolve_config,
    write_run_config,
)
from .dataset import (
    DatasetStats,
    KeypointRecord,
    build_quadruplets,
    extract_patch,
    point_split,
    read_manifest,
    read_pgm,
    synth_scenes,
    training_stats,
    write_manifest,
)
from .descriptor import (
    DescriptorArch,
    describe,
    descriptor_from_store,
    init_descriptor,
    read_descriptors,
    write_descriptors,
)
from .detector import (
    detect_multiscale,
    detector_from_store,
    init_detector,
    read_keypoints,
    write_keypoints,
)
from .evalbench import (
    PairGroundTruth,
    evaluate_pair,
    nn_match,
    read_gt_file,
    render_matches,
    summary_table,
    write_metrics_csv,
)
from .geometry import PatchGeometry, crop, rot_crop, softargmax
from .grad import (
    NumericsError,
    ParamStore,
    ShapeError,
    Tensor,
    conv2d,
    finite_diff_check,
    l2_pool,
    load_checkpoint,
    save_checkpoint,
    subtractive_norm,
    tanh_act,
)
from .losses import detector_losses
from .orientation import (
    OrientationArch,
    g_transform,
    init_orientation,
    orientation_from_store,
)
from .training import (
    train_descriptor,
    train_detector,
    train_orientation,
    run_staged_training,
    write_loss_csv,
)

_CONFIG_KEYS = [f.name for f in dataclass_fields(RunConfig)]


def _add_config_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", default=None, help="key = value config file")
    for key in _CONFIG_KEYS:
        sub.add_argument(
            f"--{key.replace('_', '-')}",
            dest=f"cfg_{key}",
            default=None,
            metavar="V",
        )


def _resolve(args) -> tuple[RunConfig, dict[str, str]]:
    file_values = parse_config_file(args.config) if args.config else {}
    flag_values = {
        key: getattr(args, f"cfg_{key}")
        for key in _CONFIG_KEYS
        if getattr(args, f"cfg_{key}", None) is not None
    }
    return resolve_config(file_values, flag_values)


def _stats_from_store(store: ParamStore) -> DatasetStats:
    if "stats/mean" not in store or "stats/std" not in store:
        raise ShapeError("checkpoint is missing normalization stats")
    return DatasetStats(
        mean=float(store["stats/mean"].data.reshape(-1)[0]),
        std=float(store["stats/std"].data.reshape(-1)[0]),
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg, prov = _resolve(args)
    out = Path(args.out)
    images, gt = synth_scenes(
        cfg.seed,
        cfg.scenes,
        cfg.views,
        image_size=cfg.image_size,
        features_per_scene=cfg.features,
        nonfeatures_per_view=cfg.nonfeatures,
    )
    geom = make_geometry(cfg)
    train_features = sum(
        1
        for recs in gt.records.values()
        for r in recs
        if r.point3d_id is not None and point_split(r.point3d_id) == "train"
    )
    stats = training_stats(gt, images, geom) if train_features >= 2 else None
    write_manifest(out, images, gt, stats)
    write_run_config(out / "run_config_synth.txt", cfg, prov)
    print(f"wrote {len(images)} images ({cfg.scenes} scenes x {cfg.views} views) to {out}")
    return 0


def _require_namespaces(store: ParamStore, needed: list[str], wanted_stage: str) -> None:
    for stage in needed:
        if f"{stage}/meta" not in store:
            raise ShapeError(
                f"stage '{wanted_stage}' needs trained {stage} parameters; "
                f"run --stage {stage} first"
            )


def cmd_train(args) -> int:
    cfg, prov = _resolve(args)
    images, gt, stats = read_manifest(args.data)
    geom = make_geometry(cfg)
    arch = make_arch(cfg)
    tcfg = make_training_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if stats is None:
        stats = training_stats(gt, images, geom)

    def stream(offset: int):
        rng = np.random.default_rng(tcfg.seed + offset)
        return build_quadruplets(gt, images, stats, rng, geom, split="train")

    stage = args.stage
    if stage == "all":
        result = run_staged_training(images, gt, stats, tcfg, arch, geom)
        store, rows = result.store, result.rows
    else:
        if args.ckpt:
            store = load_checkpoint(args.ckpt)
        elif stage == "descriptor":
            store = ParamStore()
            store.add("stats/mean", np.array([stats.mean]), trainable=False)
            store.add("stats/std", np.array([stats.std]), trainable=False)
        else:
            earlier = "descriptor" if stage == "orientation" else "orientation"
            raise ShapeError(
                f"stage '{stage}' needs --ckpt with earlier-stage parameters; "
                f"run --stage {earlier} first"
            )
        if stage == "descriptor":
            if "descriptor/meta" not in store:
                init_descriptor(np.random.default_rng(tcfg.seed), arch.descriptor, store)
            rows = train_descriptor(stream(101), descriptor_from_store(store), tcfg, geom)
        elif stage == "orientation":
            _require_namespaces(store, ["descriptor"], "orientation")
            if "orientation/meta" not in store:
                init_orientation(
                    np.random.default_rng(tcfg.seed + 1), arch.orientation, store
                )
            rows = train_orientation(
                stream(202),
                orientation_from_store(store),
                descriptor_from_store(store),
                tcfg,
                geom,
            )
        elif stage == "detector":
            _require_namespaces(store, ["descriptor", "orientation"], "detector")
            if "detector/meta" not in store:
                init_detector(
                    np.random.default_rng(tcfg.seed + 2),
                    arch.det_n,
                    arch.det_m,
                    arch.det_k,
                    store,
                )
            rows, _ = train_detector(
                stream(303),
                detector_from_store(store),
                orientation_from_store(store),
                descriptor_from_store(store),
                tcfg,
                geom,
            )
        else:
            raise ShapeError(f"unknown training stage {stage!r}")
    ckpt_path = out / "checkpoint.bin"
    save_checkpoint(ckpt_path, store)
    write_loss_csv(out / "loss.csv", rows)
    write_run_config(out / "run_config_train.txt", cfg, prov)
    print(f"stage {stage}: {len(rows)} steps, checkpoint -> {ckpt_path}")
    return 0


def cmd_detect(args) -> int:
    cfg, prov = _resolve(args)
    image = read_pgm(args.image)
    store = load_checkpoint(args.ckpt)
    if "detector/meta" not in store:
        raise ShapeError("checkpoint has no detector parameters")
    det = detector_from_store(store)
    stats = _stats_from_store(store)
    kps = detect_multiscale(stats.normalize(image), det, make_scale_config(cfg))
    out = Path(args.out)
    write_keypoints(out, kps)
    write_run_config(out.parent / "run_config_detect.txt", cfg, prov)
    print(f"{len(kps)} keypoints -> {out}")
    return 0


def cmd_describe(args) -> int:
    cfg, prov = _resolve(args)
    image = read_pgm(args.image)
    kps = read_keypoints(args.keypoints)
    store = load_checkpoint(args.ckpt)
    if "orientation/meta" not in store or "descriptor/meta" not in store:
        raise ShapeError("checkpoint is missing orientation or descriptor parameters")
    phi = orientation_from_store(store)
    rho = descriptor_from_store(store)
    stats = _stats_from_store(store)
    geom = make_geometry(cfg)
    center = (geom.outer - 1) / 2.0
    rows = []
    chunk = 16
    for start in range(0, len(kps), chunk):
        part = kps[start:start + chunk]
        patches = np.stack(
            [
                extract_patch(
                    image,
                    KeypointRecord(
                        image_id="query",
                        point3d_id=None,
                        x=k.x,
                        y=k.y,
                        sigma=k.sigma,
                        theta_ref=0.0,
                    ),
                    geom,
                    stats,
                )
                for k in part
            ]
        )[:, None]
        xy = np.full((len(part), 2), center)
        g = g_transform(patches, xy, phi, geom, frozen=True)
        rows.append(describe(g, rho, frozen=True).data)
    descs = np.vstack(rows) if rows else np.zeros((0, rho.arch.dim))
    out = Path(args.out)
    write_descriptors(out, descs)
    write_run_config(out.parent / "run_config_describe.txt", cfg, prov)
    print(f"{descs.shape[0]} descriptors (dim {descs.shape[1]}) -> {out}")
    return 0


def cmd_match(args) -> int:
    cfg, prov = _resolve(args)
    da = read_descriptors(args.desc_a)
    db = read_descriptors(args.desc_b)
    matches = nn_match(da, db)
    out = Path(args.out)
    with open(out, "w", encoding="utf-8") as fh:
        for i, j, dist in matches:
            fh.write(f"{i} {j} {dist:.12g}\n")
    if args.viz:
        needed = (args.image_a, args.image_b, args.kps_a, args.kps_b)
        if any(v is None for v in needed):
            raise ShapeError("--viz needs --image-a, --image-b, --kps-a, --kps-b")
        kps_a = read_keypoints(args.kps_a)
        kps_b = read_keypoints(args.kps_b)
        if len(kps_a) != len(da) or len(kps_b) != len(db):
            raise ShapeError("keypoint and descriptor counts are misaligned")
        render_matches(
            read_pgm(args.image_a), kps_a, read_pgm(args.image_b), kps_b,
            matches, args.viz,
        )
    write_run_config(out.parent / "run_config_match.txt", cfg, prov)
    print(f"{len(matches)} matches -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg, prov = _resolve(args)
    entries = read_gt_file(args.gt)
    feat_dir = Path(args.feature_dir)
    image_dir = Path(args.image_dir)
    results = []
    for id_a, id_b, h in entries:
        kps_a = read_keypoints(feat_dir / f"{id_a}.kps")
        kps_b = read_keypoints(feat_dir / f"{id_b}.kps")
        desc_a = read_descriptors(feat_dir / f"{id_a}.desc")
        desc_b = read_descriptors(feat_dir / f"{id_b}.desc")
        shape_a = read_pgm(image_dir / f"{id_a}.pgm").shape
        shape_b = read_pgm(image_dir / f"{id_b}.pgm").shape
        gt = PairGroundTruth(h, shape_a, shape_b)
        results.append(
            evaluate_pair(
                f"{id_a}:{id_b}", kps_a, desc_a, kps_b, desc_b, gt,
                tol_px=cfg.tol_px, base_sigma=cfg.base_sigma,
            )
        )
    out = Path(args.out)
    write_metrics_csv(out, results)
    write_run_config(out.parent / "run_config_evaluate.txt", cfg, prov)
    print(summary_table(results))
    return 0


# ---------------------------------------------------------------------------
# gradcheck suite
# ---------------------------------------------------------------------------


def _store_with_leaf(store: ParamStore, target: str, leaf: Tensor) -> ParamStore:
    """Copy of a store with one parameter replaced by an external leaf."""
    s2 = ParamStore()
    for name, t in store.items():
        if name == target:
            s2.put(name, leaf)
        else:
            s2.add(name, t.data, trainable=t.requires_grad)
    return s2


def _check_conv_chain(rng):
    w = rng.normal(size=(2, 1, 3, 3)) * 0.5
    b = rng.normal(size=2) * 0.1
    x = rng.normal(size=(1, 1, 12, 12))

    def net(t):
        return subtractive_norm(
            l2_pool(tanh_act(conv2d(t, Tensor(w), Tensor(b))), 2), radius=2
        ).sum()

    def wrt_w(t):
        return subtractive_norm(
            l2_pool(tanh_act(conv2d(Tensor(x), t, Tensor(b))), 2), radius=2
        ).sum()

    yield finite_diff_check(net, x, eps=1e-5)
    yield finite_diff_check(wrt_w, w, eps=1e-5)


def _check_softargmax(rng):
    # the exponential weighting amplifies roundoff under tiny steps, so
    # this smooth chain is probed at the wider step size
    s = rng.normal(size=(1, 1, 9, 9))
    yield finite_diff_check(lambda t: softargmax(t, 10.0).sum(), s, eps=1e-4)


def _check_crop(rng):
    p = rng.normal(size=(1, 1, 16, 16))
    xy = np.array([7.3, 8.1]) + rng.uniform(-0.4, 0.4, size=2)
    yield finite_diff_check(lambda t: crop(t, Tensor(xy), 8).sum(), p, eps=1e-5)
    yield finite_diff_check(lambda t: crop(Tensor(p), t, 8).sum(), xy, eps=1e-6)


def _check_rot_crop(rng):
    p = rng.normal(size=(1, 1, 16, 16))
    xy = np.array([7.3, 8.1]) + rng.uniform(-0.4, 0.4, size=2)
    th = np.array(rng.uniform(-2.0, 2.0))
    yield finite_diff_check(
        lambda t: rot_crop(t, Tensor(xy), Tensor(th), 8).sum(), p, eps=1e-5
    )
    yield finite_diff_check(
        lambda t: rot_crop(Tensor(p), t, Tensor(th), 8).sum(), xy, eps=1e-6
    )
    yield finite_diff_check(
        lambda t: rot_crop(Tensor(p), Tensor(xy), t, 8).sum(), th, eps=1e-6
    )


_SMALL_DESC = DescriptorArch(blocks=((3, 5, 2), (4, 2, 1), (6, 5, 1)), input_size=16)
_SMALL_ORIENT = OrientationArch(
    conv_channels=(2, 3, 4), conv_sizes=(5, 3, 1), fc_width=5, input_size=16
)


def _check_describe(rng):
    store = ParamStore()
    rho = init_descriptor(rng, _SMALL_DESC, store)
    x = rng.normal(size=(1, 1, 16, 16))
    w = store["descriptor/conv1/w"].data.copy()

    yield finite_diff_check(
        lambda t: describe(t, rho).sum(), x, eps=1e-5, entries=24, rng=rng
    )

    def wrt_w(t):
        s2 = _store_with_leaf(store, "descriptor/conv1/w", t)
        return describe(Tensor(x), descriptor_from_store(s2)).sum()

    yield finite_diff_check(wrt_w, w, eps=1e-5, entries=12, rng=rng)


def _check_g_transform(rng):
    store = ParamStore()
    phi = init_orientation(rng, _SMALL_ORIENT, store)
    geom = PatchGeometry(outer=32, inner=16)
    p = rng.normal(size=(1, 1, 32, 32)) * 0.5
    xy = np.array([15.5, 15.5]) + rng.uniform(-1.0, 1.0, size=2)
    w = store["orientation/conv1/w"].data.copy()

    yield finite_diff_check(
        lambda t: g_transform(t, Tensor(xy), phi, geom).sum(),
        p, eps=1e-5, entries=24, rng=rng,
    )

    def wrt_w(t):
        s2 = _store_with_leaf(store, "orientation/conv1/w", t)
        return g_transform(
            Tensor(p), Tensor(xy), orientation_from_store(s2), geom
        ).sum()

    # weight entries steer the output only through the tiny predicted
    # angle, so small steps leave the difference inside roundoff; the
    # wider step stays far from any resampling kink
    yield finite_diff_check(wrt_w, w, eps=1e-4, entries=12, rng=rng)


def _check_detector_loss(rng):
    from .training import PipelineArch, init_pipeline

    stats = DatasetStats(mean=0.0, std=1.0)
    store = init_pipeline(PipelineArch.tiny(), stats, int(rng.integers(1 << 30)))
    mu = detector_from_store(store)
    phi = orientation_from_store(store)
    rho = descriptor_from_store(store)
    geom = PatchGeometry()
    quad = [rng.normal(size=(1, 1, 128, 128)) * 0.4 for _ in range(4)]
    w = store["detector/w"].data.copy()

    def wrt_w(t):
        s2 = _store_with_leaf(store, "detector/w", t)
        return detector_losses(
            quad[0], quad[1], quad[2], quad[3],
            detector_from_store(s2), phi, rho, geom=geom,
        ).sum()

    yield finite_diff_check(wrt_w, w, eps=1e-6, entries=6, rng=rng)


GRADCHECK_CHAINS = [
    ("conv_tanh_pool_norm", 1e-4, _check_conv_chain),
    ("softargmax", 1e-4, _check_softargmax),
    ("crop", 1e-4, _check_crop),
    ("rot_crop", 1e-4, _check_rot_crop),
    ("describe", 1e-4, _check_describe),
    ("g_transform", 1e-4, _check_g_transform),
    ("detector_loss_mu", 1e-3, _check_detector_loss),
]


def gradcheck_suite(num_seeds: int = 5) -> list[tuple[str, float, float]]:
    """Worst finite-difference discrepancy per operation chain."""
    results = []
    for name, tol, builder in GRADCHECK_CHAINS:
        worst = 0.0
        for seed in range(num_seeds):
            rng = np.random.default_rng(seed)
            for err in builder(rng):
                worst = max(worst, float(err))
        results.append((name, worst, tol))
    return results


def cmd_gradcheck(args) -> int:
    cfg, _ = _resolve(args)
    del cfg
    results = gradcheck_suite()
    failed = False
    for name, err, tol in results:
        status = "ok" if err < tol else "FAIL"
        if err >= tol:
            failed = True
        print(f"{name:24s} worst {err:.3e}  tol {tol:.0e}  {status}")
    if failed:
        print("gradient check failed", file=sys.stderr)
        return 3
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="featpipe",
        description="Learned keypoint detection, orientation, and description.",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the pipeline on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument(
        "--stage",
        choices=("all", "descriptor", "orientation", "detector"),
        default="all",
    )
    p.add_argument("--ckpt", default=None, help="checkpoint with earlier stages")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="detect keypoints in an image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("describe", help="describe keypoints in an image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--keypoints", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("match", help="nearest-neighbor descriptor matching")
    p.add_argument("--desc-a", required=True)
    p.add_argument("--desc-b", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--viz", default=None, help="write a match overlay PNG here")
    p.add_argument("--image-a", default=None)
    p.add_argument("--image-b", default=None)
    p.add_argument("--kps-a", default=None)
    p.add_argument("--kps-b", default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("evaluate", help="run the metric suite over image pairs")
    p.add_argument("--gt", required=True, help="ground-truth homography file")
    p.add_argument("--feature-dir", required=True, help="directory of .kps/.desc files")
    p.add_argument("--image-dir", required=True, help="directory of .pgm images")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    _add_config_flags(p)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if getattr(args, "func", None) is None:
        parser.print_help()
        return 1
    try:
        return args.func(args)
    except ShapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
