"""Command-line front end.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure. Output directories are built under a temporary name
and renamed into place only when the command succeeds.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import math
import os
import shutil
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import __version__
from .benchmark import (
    DatasetError,
    combine_reconstruction,
    eval_matching,
    eval_reconstruction,
    load_dataset,
    load_sequence,
    read_pair,
)
from .config import ConfigError, RunConfig, dump_toml
from .energy import SparseMatch
from .geometry import GeometryError
from .graph import DeformationGraph
from .losses import GroundTruthSample, sample_losses
from .pipeline import (
    PipelineError,
    align_pair,
    deformation_weights,
    forward_backward_interpolate,
    reconstruct_sequence,
    write_dense_matches,
    write_sequence_result,
)
from .provider import (
    FileProvider,
    HeatmapPrediction,
    ProviderLookupError,
    SyntheticOracle,
    export_predictions,
    peak_and_backproject,
)
from .solver import SolverError
from .tsdf import read_ply

logger = logging.getLogger("nrfusion")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
METRIC_FIELDS = ("mean_2d_error_px", "mean_3d_error_m", "accuracy_2d", "accuracy_3d",
                 "deformation_error_cm", "geometry_error_cm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


@contextlib.contextmanager
def staged_output(out):
    """Yield a temporary sibling directory; move it to ``out`` only on success."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.parent / f".{out.name}.tmp-{os.getpid()}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    tmp.rename(out)


def _add_config_options(p: argparse.ArgumentParser, base: RunConfig) -> None:
    p.add_argument("--config", type=Path, help="TOML file with [section] key = value entries")
    group = p.add_argument_group("config keys (override the file and the defaults)")
    for key, value in base.flat().items():
        group.add_argument(f"--{key}", dest="cfg__" + key, default=None, metavar=type(value).__name__.upper(),
                           help=f"default {value!r}")


def _config(args, base: RunConfig) -> RunConfig:
    cfg = RunConfig.from_file(args.config, base) if getattr(args, "config", None) else base
    overrides = {k[5:]: v for k, v in vars(args).items() if k.startswith("cfg__") and v is not None}
    return cfg.with_overrides(overrides)


def _json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


# -- reconstruct --------------------------------------------------------------


def _provider(cfg: RunConfig, seq_dir: Path):
    if cfg.provider.kind == "file-backed":
        return FileProvider(Path(cfg.provider.directory))
    from .synth import RecordedScene

    if not (seq_dir / "scene.json").exists():
        raise DatasetError(f"{seq_dir}: the synthetic oracle needs ground truth (scene.json, gt/)")
    scene = RecordedScene(seq_dir)
    p = cfg.provider
    return SyntheticOracle(scene.ground_truth_warp(), p.noise_px, p.depth_noise, cfg.seed, p.simulate_occlusion)


def cmd_reconstruct(args) -> int:
    from .plotting import energy_figure, error_histogram

    cfg = _config(args, RunConfig())
    seq = load_sequence(args.sequence)
    frames = seq.load_frames(args.frames)
    if len(frames) < 2:
        raise DatasetError(f"{args.sequence}: need at least 2 frames")
    if frames[0].mask is None:
        raise DatasetError(f"{seq.path / 'mask' / seq.frames[0]}: initial mask is missing")
    provider = _provider(cfg, seq.path) if cfg.weights.lambda_learned > 0 else None
    result = reconstruct_sequence(frames, frames[0].mask, provider, cfg.weights, cfg.reconstruction())
    summary = {
        "frames": result.num_frames,
        "nodes": [g.num_nodes for g in result.graphs],
        "learned_constraints": result.constraint_counts,
        "final_energy": [log[-1].energy if log else 0.0 for log in result.logs],
    }
    anns = [a for a in seq.pairs if max(a.source_frame, a.target_frame) < len(frames) and len(a)]
    with staged_output(args.out) as tmp:
        write_sequence_result(result, tmp)
        (tmp / "config.toml").write_text(dump_toml(cfg))
        energy_figure(result.logs, tmp / "energy.png")
        if anns:
            ev = eval_reconstruction(result, anns, frames, cfg.graph.skin_k)
            summary.update(ev.metrics())
            summary["uncovered_fraction"] = ev.uncovered_fraction
            error_histogram(ev.per_correspondence_cm, tmp / "deformation_error.png", "deformation error (cm)")
        (tmp / "summary.json").write_text(json.dumps(summary, indent=1))
    print(f"reconstructed {result.num_frames} frames -> {args.out}")
    for k in ("deformation_error_cm", "geometry_error_cm"):
        if k in summary:
            print(f"{k}={summary[k]:.4f}")
    return EXIT_OK


# -- align-pair ---------------------------------------------------------------


def _sparse_from_file(path: Path, source, target) -> list[SparseMatch]:
    ann = read_pair(path)
    frames = {ann.source_frame: source, ann.target_frame: target}
    s = ann.source_points(frames)
    t = ann.target_points(frames)
    ok = np.all(np.isfinite(s), axis=1) & np.all(np.isfinite(t), axis=1)
    return [SparseMatch(a, b) for a, b in zip(s[ok], t[ok])]


def cmd_align_pair(args) -> int:
    from .plotting import alignment_figure

    cfg = _config(args, RunConfig.for_alignment())
    seq = load_sequence(args.sequence)
    for f in (args.source, args.target):
        if not 0 <= f < len(seq.frames):
            raise DatasetError(f"{args.sequence}: frame {f} does not exist")
    S, T = seq.load_frame(args.source), seq.load_frame(args.target)
    sparse = []
    if args.sparse is not None:
        if args.sparse.exists():
            sparse = _sparse_from_file(args.sparse, S, T)
        elif cfg.weights.lambda_sparse > 0:
            logger.warning("sparse match file %s not found; sparse term disabled", args.sparse)
    fwd = align_pair(S, T, sparse, cfg.weights, cfg.alignment())
    final = fwd
    if args.both_directions:
        back = [SparseMatch(m.t, m.s) for m in sparse]
        bwd = align_pair(T, S, back, cfg.weights, cfg.alignment())
        final = forward_backward_interpolate(fwd, bwd, cfg.align.cycle_gate)
    weights = None
    if len(sparse) >= 3:
        r = cfg.ransac
        fit = deformation_weights(sparse, r.threshold, r.iterations, cfg.seed, r.floor)
        weights = {"weights": fit.weights.tolist(), "residuals_m": fit.residuals.tolist(),
                   "inliers": int(fit.inliers.sum()), "R": fit.R.tolist(), "t": fit.t.tolist()}
    with staged_output(args.out) as tmp:
        write_dense_matches(tmp / "matches.bin", final)
        if weights is not None:
            (tmp / "sample_weights.json").write_text(json.dumps(weights, indent=1))
        fwd.graph.save(tmp / "graph.json")
        alignment_figure(S, T, final, tmp / "alignment.png")
        (tmp / "config.toml").write_text(dump_toml(cfg))
        (tmp / "summary.json").write_text(json.dumps({
            "source": args.source, "target": args.target, "vertices": int(len(final.valid)),
            "valid": int(final.valid.sum()), "sparse_matches": len(sparse),
            "energy": [e.energy for e in fwd.log],
        }, indent=1))
    print(f"{int(final.valid.sum())}/{len(final.valid)} valid matches -> {args.out}")
    return EXIT_OK


# -- synth ----------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .synth import SceneSpec, SyntheticScene, write_sequence

    overrides = {"seed": args.seed}
    for name in ("frames", "depth_noise", "pairs", "matches_per_pair", "width", "height",
                 "camera_path", "camera_speed"):
        v = getattr(args, name)
        if v is not None:
            overrides[name] = v
    if args.width is not None or args.height is not None:
        # keep the field of view when the resolution changes
        w = args.width or 640
        overrides["fx"] = overrides["fy"] = 525.0 * w / 640.0
    try:
        spec = SceneSpec.preset(args.scene, **overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid scene: {exc}") from exc
    scene = SyntheticScene(spec)
    with staged_output(args.out) as tmp:
        write_sequence(scene, tmp)
        if args.heatmaps:
            _export_annotated(scene, load_sequence(tmp), tmp / "heatmaps", args.heatmap_noise_px,
                              args.seed, args.downsample)
    print(f"wrote {spec.frames} frames of {args.scene} -> {args.out}")
    return EXIT_OK


# -- export-heatmaps ------------------------------------------------------------


def _downsample(preds, factor: int):
    if factor <= 1:
        return preds
    from scipy import ndimage

    out = []
    for p in preds:
        h = np.clip(ndimage.zoom(p.heatmap, 1.0 / factor, order=1), 0.0, None)
        out.append(HeatmapPrediction(h, p.depth, p.visibility, p.query_pixel))
    return out


def _export_annotated(scene, seq, out_dir: Path, noise_px: float, seed: int, factor: int = 1) -> int:
    oracle = SyntheticOracle(scene.ground_truth_warp(), noise_px, 0.0, seed)
    count = 0
    for ann in seq.pairs:
        queries = np.concatenate([ann.source_uv, ann.occlusions]).astype(np.int64)
        if len(queries) == 0:
            continue
        S, T = seq.load_frame(ann.source_frame), seq.load_frame(ann.target_frame)
        preds = _downsample(oracle.predict(S, T, queries), factor)
        export_predictions(out_dir, ann.pair_id, preds)
        count += len(preds)
    return count


def cmd_export_heatmaps(args) -> int:
    from .synth import RecordedScene

    seq = load_sequence(args.sequence)
    if not (seq.path / "scene.json").exists():
        raise DatasetError(f"{seq.path}: heatmap export needs synthetic ground truth (scene.json)")
    scene = RecordedScene(seq.path)
    with staged_output(args.out) as tmp:
        if args.queries is not None:
            data = json.loads(args.queries.read_text())
            oracle = SyntheticOracle(scene.ground_truth_warp(), args.noise_px, 0.0, args.seed)
            count = 0
            for pair_id, queries in sorted(data.items()):
                s, t = (int(x) for x in pair_id.split("_"))
                q = np.asarray(queries, dtype=np.int64).reshape(-1, 2)
                if len(q) == 0:
                    continue
                preds = _downsample(oracle.predict(seq.load_frame(s), seq.load_frame(t), q), args.downsample)
                export_predictions(tmp, pair_id, preds)
                count += len(preds)
            if count == 0:
                (tmp / "manifest.json").write_text(json.dumps({"entries": []}))
        else:
            count = _export_annotated(scene, seq, tmp, args.noise_px, args.seed, args.downsample)
            if count == 0:
                (tmp / "manifest.json").write_text(json.dumps({"entries": []}))
    print(f"exported {count} heatmaps -> {args.out}")
    return EXIT_OK


# -- evaluate -------------------------------------------------------------------


def _predicted_matches(seq, ann, pred_dir: Path):
    """(pred_px, pred_xyz) for an annotation from a match JSON or exported heatmaps."""
    mfile = pred_dir / "matches" / f"{ann.pair_id}.json"
    if mfile.exists():
        data = json.loads(mfile.read_text())
        px = np.asarray(data["pred_uv"], dtype=np.float64).reshape(-1, 2)
        xyz = np.asarray(data["pred_xyz"], dtype=np.float64).reshape(-1, 3)
        if len(px) != len(ann):
            raise DatasetError(f"{mfile}: {len(px)} predictions for {len(ann)} annotated matches")
        return px, xyz
    hdir = pred_dir / "heatmaps"
    if (hdir / "manifest.json").exists():
        provider = FileProvider(hdir)
        S, T = seq.load_frame(ann.source_frame), seq.load_frame(ann.target_frame)
        preds = provider.predict(S, T, np.round(ann.source_uv).astype(np.int64), pair_id=ann.pair_id)
        px, xyz = [], []
        for p in preds:
            peak, point = peak_and_backproject(p, T)
            px.append(peak)
            xyz.append(point if point is not None else np.full(3, np.nan))
        return np.asarray(px, dtype=np.float64), np.asarray(xyz)
    return None


def _load_reconstruction(pred_dir: Path, n_frames: int):
    gdir, mdir = pred_dir / "graphs", pred_dir / "meshes"
    if not gdir.is_dir():
        return None
    graphs, meshes = [], []
    for t in range(n_frames):
        gpath, mpath = gdir / f"{t:06d}.json", mdir / f"{t:06d}.ply"
        if not gpath.exists():
            break
        graphs.append(DeformationGraph.load(gpath))
        if not mpath.exists():
            raise DatasetError(f"missing reconstructed mesh: {mpath}")
        meshes.append(read_ply(mpath))
    return SimpleNamespace(graphs=graphs, warped=meshes) if graphs else None


def cmd_evaluate(args) -> int:
    from .plotting import error_histogram

    index = load_dataset(args.dataset)
    pred_root = Path(args.predictions)
    if not pred_root.is_dir():
        raise DatasetError(f"predictions directory {pred_root} does not exist")
    gt_px, gt_xyz, pr_px, pr_xyz = [], [], [], []
    recon, details = [], {}
    for seq in index.sequences:
        pdir = pred_root / seq.name
        if not pdir.is_dir():
            continue
        for ann in seq.pairs:
            if not len(ann):
                continue
            got = _predicted_matches(seq, ann, pdir)
            if got is None:
                continue
            frames = {ann.target_frame: seq.load_frame(ann.target_frame)}
            gt_px.append(ann.target_uv)
            gt_xyz.append(ann.target_points(frames))
            pr_px.append(got[0])
            pr_xyz.append(got[1])
        rec = _load_reconstruction(pdir, len(seq.frames))
        if rec is not None:
            frames = seq.load_frames(len(rec.graphs))
            anns = [a for a in seq.pairs if len(a) and max(a.source_frame, a.target_frame) < len(rec.graphs)]
            ev = eval_reconstruction(rec, anns, frames)
            recon.append(ev)
            details[seq.name] = {**ev.metrics(), "uncovered_fraction": ev.uncovered_fraction,
                                 "correspondences": ev.correspondences}
    if not gt_px and not recon:
        raise DatasetError(f"no predictions under {pred_root} match the dataset")
    report = {k: float("nan") for k in METRIC_FIELDS}
    with staged_output(args.out) as tmp:
        if gt_px:
            m = eval_matching(np.concatenate(pr_px), np.concatenate(pr_xyz), np.concatenate(gt_px),
                              np.concatenate(gt_xyz))
            report.update(m.metrics())
            e2 = np.linalg.norm(np.concatenate(pr_px) - np.concatenate(gt_px), axis=1)
            error_histogram(e2, tmp / "matching_error_2d.png", "2D error (px)", 20.0)
        if recon:
            c = combine_reconstruction(recon, pooled=args.pooled)
            report.update(c.metrics())
            error_histogram(np.concatenate([r.per_correspondence_cm for r in recon]),
                            tmp / "deformation_error.png", "deformation error (cm)")
        (tmp / "report.json").write_text(json.dumps({k: _json_value(report[k]) for k in METRIC_FIELDS}, indent=1))
        with open(tmp / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_FIELDS)
            w.writerow([repr(report[k]) for k in METRIC_FIELDS])
        (tmp / "details.json").write_text(json.dumps(details, indent=1))
    for k in METRIC_FIELDS:
        print(f"{k}={report[k]}")
    return EXIT_OK


# -- losses eval ----------------------------------------------------------------


def cmd_losses_eval(args) -> int:
    """Training losses of exported heatmaps against the sequence annotations.

    An exported file holds the composed heatmap only; it is read as the
    sigmoid map (after scaling to max 1) and, normalised to sum 1, as the
    softmax distribution.
    """
    seq = load_sequence(args.sequence)
    provider = FileProvider(args.heatmaps)
    rows = []
    for ann in seq.pairs:
        if not len(ann):
            continue
        T = seq.load_frame(ann.target_frame)
        S = seq.load_frame(ann.source_frame)
        tgt = ann.target_points({ann.target_frame: T})
        queries = np.round(ann.source_uv).astype(np.int64)
        try:
            preds = provider.predict(S, T, queries, pair_id=ann.pair_id)
        except ProviderLookupError:
            logger.warning("no exported heatmaps for pair %s", ann.pair_id)
            continue
        h, w = T.intrinsics.shape
        for pred, uv, xyz in zip(preds, ann.target_uv, tgt):
            if not (0 <= uv[0] <= w - 1 and 0 <= uv[1] <= h - 1) or not np.isfinite(xyz).all():
                continue
            heat = pred.heatmap
            total = heat.sum()
            if not total > 0:
                continue
            sample = GroundTruthSample((float(uv[0]), float(uv[1])), float(xyz[2]), True)
            rows.append(sample_losses(heat / heat.max(), heat / total, pred.depth, pred.visibility, sample))
    if not rows:
        raise DatasetError("no exported heatmap matches an annotated correspondence")
    summary = {k: float(np.mean([r[k] for r in rows])) for k in ("L_H", "L_D", "L_V", "L")}
    summary["count"] = len(rows)
    text = json.dumps(summary, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nrfusion", description="Non-rigid RGB-D tracking, fusion, alignment and evaluation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    r = sub.add_parser("reconstruct", help="track and fuse a sequence")
    r.add_argument("--sequence", type=Path, required=True)
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--frames", type=int, default=None, help="process only the first N frames")
    _add_config_options(r, RunConfig())
    r.set_defaults(func=cmd_reconstruct)

    a = sub.add_parser("align-pair", help="dense non-rigid alignment of two frames")
    a.add_argument("--sequence", type=Path, required=True)
    a.add_argument("--source", type=int, required=True)
    a.add_argument("--target", type=int, required=True)
    a.add_argument("--sparse", type=Path, default=None, help="pair annotation JSON with sparse matches")
    a.add_argument("--both-directions", action="store_true", help="forward-backward interpolation")
    a.add_argument("--out", type=Path, required=True)
    _add_config_options(a, RunConfig.for_alignment())
    a.set_defaults(func=cmd_align_pair)

    s = sub.add_parser("synth", help="generate a synthetic sequence")
    s.add_argument("--scene", default="bending-cylinder",
                   help="bending-cylinder, two-segment-arm, waving-sheet (append -fast for the fast variant)")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--frames", type=int)
    s.add_argument("--width", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--depth-noise", type=float)
    s.add_argument("--camera-path", choices=("static", "pan"))
    s.add_argument("--camera-speed", type=float)
    s.add_argument("--pairs", type=int)
    s.add_argument("--matches-per-pair", type=int)
    s.add_argument("--heatmaps", action="store_true", help="also export oracle heatmaps for annotated pairs")
    s.add_argument("--heatmap-noise-px", type=float, default=0.0)
    s.add_argument("--downsample", type=int, default=1, help="store heatmaps at 1/N resolution")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("evaluate", help="matching and reconstruction metrics")
    e.add_argument("--dataset", type=Path, required=True)
    e.add_argument("--predictions", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--pooled", action="store_true", help="pool correspondences instead of per-sequence means")
    e.set_defaults(func=cmd_evaluate)

    lo = sub.add_parser("losses", help="training-loss utilities")
    lsub = lo.add_subparsers(dest="losses_command", parser_class=_Parser, required=True)
    le = lsub.add_parser("eval", help="losses of exported heatmaps against annotations")
    le.add_argument("--heatmaps", type=Path, required=True)
    le.add_argument("--sequence", type=Path, required=True)
    le.add_argument("--out", type=Path)
    le.set_defaults(func=cmd_losses_eval)

    x = sub.add_parser("export-heatmaps", help="write synthetic-oracle heatmaps in the file-backed format")
    x.add_argument("--sequence", type=Path, required=True)
    x.add_argument("--out", type=Path, required=True)
    x.add_argument("--queries", type=Path, help="queries.json written by reconstruct")
    x.add_argument("--noise-px", type=float, default=0.0)
    x.add_argument("--downsample", type=int, default=1)
    x.add_argument("--seed", type=int, default=0)
    x.set_defaults(func=cmd_export_heatmaps)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"nrfusion: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"nrfusion: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PipelineError as exc:
        numeric = isinstance(exc.__cause__, SolverError)
        print(f"nrfusion: {'numerical failure' if numeric else 'data error'}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if numeric else EXIT_DATA
    except (DatasetError, GeometryError, ProviderLookupError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"nrfusion: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
