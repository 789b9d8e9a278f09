"""Command line entry point: ``vpfuse <command> [options]``.

Exit codes: 0 success, 1 validation or data failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import augmentation, evaluation, fixtures
from .config import PipelineConfig, load_config
from .errors import VPFuseError
from .image_features import FeatureMap2D
from .kitti_io import (
    WeightBundle,
    format_labels,
    format_weights,
    load_image,
    load_mask_set,
    load_point_cloud,
    load_weights,
    parse_calibration,
    parse_labels,
)
from .pipeline import (
    detections_to_labels,
    frame_files,
    frame_rng,
    list_frames,
    load_frame,
    run_fusion,
)
from .sparse_voxel import format_grid, roi_pool_batch, spconv_stack, voxelize_virtual
from .virtual_points import assemble_features, generate_virtual_points, prepare_proposal

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DATA_ERRORS = (VPFuseError, ValueError, KeyError, OSError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _map(fn, items, jobs: int):
    """Apply ``fn`` to items, in parallel when jobs > 1; results keep input order."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _frames(args, cfg) -> list[str]:
    if getattr(args, "all", False):
        return list_frames(cfg.data_root)
    return list(args.frames)


# ------------------------------------------------------------------ ingest


def _check_frame(root, fid):
    files = frame_files(root, fid)
    results = []
    calib = None

    def attempt(name, fn):
        try:
            out = fn()
            results.append((True, str(files[name]), ""))
            return out
        except FileNotFoundError:
            results.append((False, str(files[name]), "missing file"))
        except DATA_ERRORS as exc:
            results.append((False, str(files[name]), f"{type(exc).__name__}: {exc}"))
        return None

    calib = attempt("calib", lambda: parse_calibration(files["calib"].read_text()))
    attempt("velodyne", lambda: load_point_cloud(files["velodyne"].read_bytes()))
    attempt("label", lambda: parse_labels(files["label"].read_text(), calib))
    attempt("left", lambda: load_image(files["left"].read_bytes()))
    attempt("right", lambda: load_image(files["right"].read_bytes()))
    for key in ("mask_left", "mask_right"):
        if files[key].exists():
            attempt(key, lambda k=key: load_mask_set(files[k].read_bytes(), files[k + "_side"].read_text()))
    return fid, results


def cmd_ingest(args, cfg) -> int:
    frames = _frames(args, cfg)
    reports = _map(lambda f: _check_frame(cfg.data_root, f), frames, args.jobs)
    bad = 0
    for fid, results in reports:
        ok = all(r[0] for r in results)
        bad += not ok
        for passed, path, msg in results:
            print(f"{'PASS' if passed else 'FAIL'} {path}" + ("" if passed else f": {msg}"))
    if bad:
        print(f"{bad} of {len(frames)} frames invalid")
        return EXIT_FAIL
    print(f"all {len(frames)} frames valid")
    return EXIT_OK


# -------------------------------------------------------------------- bank


def _build_bank(cfg, frames, jobs):
    scenes = _map(lambda f: load_frame(cfg.data_root, f), frames, jobs)
    parts = _map(lambda s: augmentation.build_sample_bank([s], cfg.paste), scenes, jobs)
    bank = augmentation.SampleBank()
    for part in parts:
        for sig, ts in part.triplets.items():
            for t in ts:
                bank.add(part.calibs[sig], t)
    return bank


def cmd_bank(args, cfg) -> int:
    frames = _frames(args, cfg) or list_frames(cfg.data_root)
    bank = _build_bank(cfg, frames, args.jobs)
    out = args.out or cfg.bank
    if out is None:
        print("no output directory: pass --out or set 'bank' in the config", file=sys.stderr)
        return EXIT_FAIL
    augmentation.save_bank(bank, out)
    print(f"bank: {len(bank)} triplets from {len(frames)} frames, {len(bank.triplets)} calibration(s) -> {out}")
    return EXIT_OK


# ----------------------------------------------------------------- augment


def cmd_augment(args, cfg) -> int:
    frames = _frames(args, cfg) or list_frames(cfg.data_root)
    bank_dir = args.bank or cfg.bank
    if bank_dir and (Path(bank_dir) / "index.txt").exists():
        bank = augmentation.load_bank(bank_dir)
    else:
        bank = _build_bank(cfg, list_frames(cfg.data_root), args.jobs)
        if bank_dir:
            augmentation.save_bank(bank, bank_dir)
    out = Path(args.out)

    def work(fid):
        scene = load_frame(cfg.data_root, fid)
        rng = frame_rng(cfg.seed, fid)
        scene, log = augmentation.cut_n_paste_logged(scene, bank, cfg.paste, rng)
        if cfg.augment_global:
            scene = augmentation.global_augment(scene, cfg.global_aug, rng)
        fixtures.write_frame(out, scene)
        return fid, log

    results = _map(work, frames, args.jobs)
    lines = []
    for fid, log in results:
        for rec in log:
            lines.append(f"{fid} {rec.triplet.source or '-'} {rec.instance_left} {rec.i3d!r} {rec.i2d!r}")
    (out / "paste_log.txt").write_text("".join(line + "\n" for line in lines))
    print(f"augmented {len(frames)} frames, pasted {len(lines)} objects -> {out}")
    return EXIT_OK


# -------------------------------------------------------------------- fuse


def _weights(cfg, args) -> WeightBundle:
    path = getattr(args, "weights", None) or cfg.weights
    if path is None:
        raise ValueError("no weight bundle: pass --weights or set 'weights' in the config")
    return load_weights(Path(path).read_bytes())


def cmd_fuse(args, cfg) -> int:
    weights = _weights(cfg, args)
    scene = load_frame(cfg.data_root, args.frame)
    if args.proposals:
        objs = parse_labels(Path(args.proposals).read_text(), scene.calib)
    else:
        objs = list(scene.labels)
    proposals = [o.box for o in objs if o.box is not None]
    res = run_fusion(scene, proposals, weights, cfg, frame_rng(cfg.seed, args.frame))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "pooled.bin").write_bytes(format_weights({"pooled": res.pooled}))
    (out / "d0.grid").write_bytes(format_grid(res.d0))
    dets = detections_to_labels(res.detections, cfg.eval.category, scene.calib, scene.left.width,
                                scene.left.height)
    (out / "detections.txt").write_text(format_labels(dets, scene.calib))
    print(f"frame {args.frame}: {len(proposals)} proposals, pooled {res.pooled.shape}, "
          f"{len(res.d0)} voxels in D0, {len(res.detections)} detections -> {out}")
    return EXIT_OK


# -------------------------------------------------------------------- eval


def cmd_eval(args, cfg) -> int:
    label_dir = Path(args.labels or Path(cfg.data_root) / "label_2")
    det_dir = Path(args.detections)
    calib_dir = Path(cfg.data_root) / "calib"
    frames = []
    missing = []
    for lab_path in sorted(label_dir.glob("*.txt")):
        fid = lab_path.stem
        calib = None
        if (calib_dir / f"{fid}.txt").exists():
            calib = parse_calibration((calib_dir / f"{fid}.txt").read_text())
        det_path = det_dir / f"{fid}.txt"
        if not det_path.exists():
            missing.append(str(det_path))
            dets = []
        else:
            dets = [d for d in parse_labels(det_path.read_text(), calib) if d.box is not None]
            dets = [d for d in dets if d.category == cfg.eval.category]
        frames.append((dets, parse_labels(lab_path.read_text(), calib)))
    rows = evaluation.evaluate(frames, cfg.eval)
    sys.stdout.write(evaluation.format_report(rows))
    if args.dump_csv:
        curve = evaluation.ap40(frames, cfg.eval, "iou_3d", "moderate")
        Path(args.dump_csv).write_text(evaluation.format_pr_csv(curve))
    for m in missing:
        print(f"missing detection file {m}", file=sys.stderr)
    return EXIT_FAIL if missing else EXIT_OK


# ------------------------------------------------------------------- bench


BENCH_RESOLUTIONS = ((16, 8, 16), (16, 8, 22), (16, 8, 25), (25, 12, 25), (30, 18, 30))
BENCH_DEPTH_RESOLUTION = (25, 12, 25)


def _bench_setting(scene, proposals, weights, cfg, resolution, n_layers, repeats):
    best = np.inf
    pooled = None
    for _ in range(repeats):
        rng = frame_rng(cfg.seed, scene.frame_id)
        t0 = time.perf_counter()
        left = FeatureMap2D.from_image(scene.left)
        right = FeatureMap2D.from_image(scene.right)
        prepared = [prepare_proposal(b, cfg.resize, rng, cfg.margin) for b in proposals]
        vps = [assemble_features(generate_virtual_points(b, resolution), left, right,
                                 scene.calib.left, scene.calib.right) for b in prepared]
        d0 = spconv_stack(voxelize_virtual(vps, cfg.virtual_voxel), weights, n_layers)
        pooled = roi_pool_batch(prepared, [d0], cfg.query, cfg.query_resolution, weights)
        best = min(best, time.perf_counter() - t0)
    digest = hashlib.sha256(np.ascontiguousarray(pooled, dtype="<f8").tobytes()).hexdigest()[:16]
    return best, digest


def bench_rows(cfg: PipelineConfig, resolutions=BENCH_RESOLUTIONS, depths=(6, 1), repeats: int = 3,
               n_proposals: int = 4, depth_resolution=BENCH_DEPTH_RESOLUTION):
    """(resolution, spconv depth, seconds, checksum) rows over one fixture scene.

    Every resolution runs with the first depth; the remaining depths run at
    ``depth_resolution``.  Images are used raw and only the virtual-point
    map is pooled, so the timing isolates virtual-point density and the
    sparse stack.  Each time is the best of ``repeats`` runs.
    """
    rng = np.random.default_rng(cfg.seed)
    fcfg = fixtures.FixtureConfig(n_cars=(n_proposals, n_proposals))
    scene = fixtures.make_scene(rng, fcfg, frame_id="bench")
    proposals = [lab.box for lab in scene.labels][:n_proposals]
    weights = fixtures.make_weights(np.random.default_rng(cfg.seed), image_channels=3, feat_channels=3,
                                    n_spconv=max(depths))
    rows = []
    for res in resolutions:
        t, c = _bench_setting(scene, proposals, weights, cfg, res, depths[0], repeats)
        rows.append((tuple(res), depths[0], t, c))
    for depth in depths[1:]:
        t, c = _bench_setting(scene, proposals, weights, cfg, depth_resolution, depth, repeats)
        rows.append((tuple(depth_resolution), depth, t, c))
    return rows


def cmd_bench(args, cfg) -> int:
    rows = bench_rows(cfg, repeats=args.repeats)
    print("nx ny nz points spconv_layers time_ms checksum")
    for res, depth, t, c in rows:
        print(f"{res[0]} {res[1]} {res[2]} {int(np.prod(res))} {depth} {1000.0 * t:.2f} {c}")
    return EXIT_OK


# ----------------------------------------------------------------- fixture


def cmd_fixture(args, cfg) -> int:
    out = Path(args.out)
    ids = fixtures.write_dataset(out, args.frames, cfg.seed)
    weights = fixtures.make_weights(np.random.default_rng(cfg.seed), zero=args.zero_weights)
    (out / "weights.bin").write_bytes(format_weights(weights))
    print(f"wrote {len(ids)} fixture frames and weights.bin to {out}")
    return EXIT_OK


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config")
    common.add_argument("--seed", type=int, help="RNG seed (overrides config)")
    common.add_argument("--jobs", type=int, default=1, help="frame-level worker threads")
    common.add_argument("--data-root", help="dataset root (overrides config and environment)")

    p = _Parser(prog="vpfuse", description="Virtual-point LiDAR/stereo fusion toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", parents=[common], help="validate every artifact of the listed frames")
    s.add_argument("frames", nargs="*")
    s.add_argument("--all", action="store_true", help="every frame under calib/")

    s = sub.add_parser("bank", parents=[common], help="build the cut-and-paste sample bank")
    s.add_argument("frames", nargs="*")
    s.add_argument("--out")

    s = sub.add_parser("augment", parents=[common], help="cut-and-paste (and optional global) augmentation")
    s.add_argument("frames", nargs="*")
    s.add_argument("--bank")
    s.add_argument("--out", required=True)

    s = sub.add_parser("fuse", parents=[common], help="run the fusion pass on one frame")
    s.add_argument("frame")
    s.add_argument("--proposals", help="proposal boxes in label format (default: the frame's labels)")
    s.add_argument("--weights")
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", parents=[common], help="AP40 report")
    s.add_argument("--detections", required=True)
    s.add_argument("--labels")
    s.add_argument("--dump-csv", help="write the moderate 3D PR samples here")

    s = sub.add_parser("bench", parents=[common], help="time the pipeline across virtual-point densities")
    s.add_argument("--repeats", type=int, default=3)

    s = sub.add_parser("fixture", parents=[common], help="write a synthetic dataset and weight bundle")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=4)
    s.add_argument("--zero-weights", action="store_true")
    return p


COMMANDS = {
    "ingest": cmd_ingest,
    "bank": cmd_bank,
    "augment": cmd_augment,
    "fuse": cmd_fuse,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "fixture": cmd_fixture,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.jobs < 1:
        print("--jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config, {"seed": args.seed, "data_root": args.data_root})
        return COMMANDS[args.command](args, cfg)
    except DATA_ERRORS as exc:
        print(f"{args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
