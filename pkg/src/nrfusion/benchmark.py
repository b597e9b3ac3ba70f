"""Dataset index and the matching / reconstruction metrics.

Dataset layout::

    root/{train,val,test}/<sequence>/
        intrinsics.txt
        color/NNNNNN.png  depth/NNNNNN.png  mask/NNNNNN.png
        pairs/<pair>.json   {source_frame, target_frame, matches: [...], occlusions: [...]}

A match entry carries ``source_uv`` and ``target_uv`` (pixels) and optionally
``source_xyz`` / ``target_xyz`` (metres, camera space of their frame).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, RgbdFrame, backproject
from .graph import DeformationGraph, invert_warp, skinning, warp_points
from .render import rasterize

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
ACCURACY_PX = 20.0
ACCURACY_M = 0.05


class DatasetError(ValueError):
    """Malformed or inconsistent dataset content; the message names the file."""


# -- matching -------------------------------------------------------------------


@dataclass
class MatchingEval:
    mean_2d_error_px: float
    mean_3d_error_m: float
    accuracy_2d: float
    accuracy_3d: float
    count: int = 0

    def metrics(self) -> dict:
        d = asdict(self)
        d.pop("count")
        return d


def eval_matching(pred_px, pred_xyz, gt_px, gt_xyz, px_threshold: float = ACCURACY_PX,
                  m_threshold: float = ACCURACY_M) -> MatchingEval:
    """Mean 2D / 3D endpoint errors and inclusive-threshold accuracies.

    A non-finite predicted point (a peak on a depth hole) is a 3D miss and is
    left out of the mean 3D error. Rows without a ground-truth point are left
    out of both 3D metrics.
    """
    pred_px = np.asarray(pred_px, dtype=np.float64).reshape(-1, 2)
    gt_px = np.asarray(gt_px, dtype=np.float64).reshape(-1, 2)
    pred_xyz = np.asarray(pred_xyz, dtype=np.float64).reshape(-1, 3)
    gt_xyz = np.asarray(gt_xyz, dtype=np.float64).reshape(-1, 3)
    n = len(gt_px)
    if not (len(pred_px) == len(pred_xyz) == n == len(gt_xyz)):
        raise ValueError("prediction and ground-truth lengths differ")
    if n == 0:
        raise ValueError("no matches to evaluate")
    e2 = np.linalg.norm(pred_px - gt_px, axis=1)
    e3 = np.linalg.norm(pred_xyz - gt_xyz, axis=1)
    known = np.all(np.isfinite(gt_xyz), axis=1)
    hit = known & np.isfinite(e3)
    mean3 = float(e3[hit].mean()) if hit.any() else float("nan")
    acc3 = float(np.sum(e3[hit] <= m_threshold) / known.sum()) if known.any() else float("nan")
    return MatchingEval(float(e2.mean()), mean3, float(np.mean(e2 <= px_threshold)), acc3, n)


# -- reconstruction -----------------------------------------------------------


@dataclass
class ReconEval:
    deformation_error_cm: float
    geometry_error_cm: float
    uncovered_fraction: float = 0.0
    correspondences: int = 0
    pixels: int = 0
    uncovered_pixels: int = 0
    per_correspondence_cm: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    def metrics(self) -> dict:
        return {"deformation_error_cm": self.deformation_error_cm, "geometry_error_cm": self.geometry_error_cm}


@dataclass
class PairAnnotation:
    pair_id: str
    source_frame: int
    target_frame: int
    source_uv: np.ndarray            # (N, 2)
    target_uv: np.ndarray            # (N, 2)
    source_xyz: np.ndarray | None    # (N, 3) or None
    target_xyz: np.ndarray | None
    occlusions: np.ndarray           # (M, 2) source pixels without a visible target
    path: Path | None = None

    def __len__(self) -> int:
        return len(self.source_uv)

    def source_points(self, frames) -> np.ndarray:
        if self.source_xyz is not None:
            return self.source_xyz
        return _backproject_many(frames[self.source_frame], self.source_uv)

    def target_points(self, frames) -> np.ndarray:
        if self.target_xyz is not None:
            return self.target_xyz
        return _backproject_many(frames[self.target_frame], self.target_uv)


def _backproject_many(frame: RgbdFrame, uv: np.ndarray) -> np.ndarray:
    px = np.round(uv).astype(np.int64)
    out = np.full((len(px), 3), np.nan)
    for i, (u, v) in enumerate(px):
        d = frame.depth[v, u]
        if d > 0:
            out[i] = backproject((u, v), d, frame.intrinsics)
    return out


def tracked_positions(graphs: list[DeformationGraph], ann: PairAnnotation, frames, skin_k: int = 4) -> np.ndarray:
    """Carry annotated source points through the solved warps into the target frame."""
    src = ann.source_points(frames)
    gs, gt = graphs[ann.source_frame], graphs[ann.target_frame]
    canonical = src if ann.source_frame == 0 else invert_warp(gs, src, skin_k)
    return warp_points(gt, skinning(gt, canonical, skin_k), canonical)


def geometry_errors(model_vertices, model_triangles, frame: RgbdFrame):
    """|input depth - rendered model depth| over masked pixels the model covers.

    Returns (errors in metres, number of masked pixels not covered).
    """
    if frame.mask is None:
        raise ValueError("geometry error needs an object mask")
    region = frame.mask & (frame.depth > 0)
    if len(model_triangles) == 0:
        return np.zeros(0), int(region.sum())
    rendered = rasterize(model_vertices, model_triangles, frame.intrinsics).depth
    covered = region & (rendered > 0)
    return np.abs(frame.depth[covered] - rendered[covered]), int(region.sum() - covered.sum())


def eval_reconstruction(result, annotations, frames, skin_k: int = 4) -> ReconEval:
    """Deformation and geometry error (cm) of one reconstructed sequence.

    ``result`` needs ``graphs`` (one per frame) and ``warped`` meshes.
    Geometry error pools every masked pixel of every frame that has a mask.
    """
    annotations = [a for a in annotations if len(a)]
    if not annotations:
        raise ValueError("no annotated correspondences")
    errs = []
    for ann in annotations:
        if max(ann.source_frame, ann.target_frame) >= len(result.graphs):
            raise ValueError(f"annotation {ann.pair_id} references an unprocessed frame")
        tracked = tracked_positions(result.graphs, ann, frames, skin_k)
        target = ann.target_points(frames)
        ok = np.all(np.isfinite(target), axis=1)
        errs.append(np.linalg.norm(tracked[ok] - target[ok], axis=1))
    e = np.concatenate(errs) * 100.0
    if len(e) == 0:
        raise ValueError("no annotated correspondence has a valid target")
    geo, uncovered, total = [], 0, 0
    for t, frame in enumerate(frames[:len(result.warped)]):
        if frame.mask is None:
            continue
        m = result.warped[t]
        g, miss = geometry_errors(m.vertices, m.triangles, frame)
        geo.append(g)
        uncovered += miss
        total += miss + len(g)
    g = np.concatenate(geo) * 100.0 if geo else np.zeros(0)
    return ReconEval(float(e.mean()), float(g.mean()) if len(g) else float("nan"),
                     uncovered / total if total else 0.0, len(e), len(g), uncovered, e)


def combine_reconstruction(evals: list[ReconEval], pooled: bool = False) -> ReconEval:
    """Average per-sequence means (default) or pool every correspondence."""
    if not evals:
        raise ValueError("nothing to combine")
    if pooled:
        e = np.concatenate([x.per_correspondence_cm for x in evals])
        d = float(e.mean())
    else:
        d = float(np.mean([x.deformation_error_cm for x in evals]))
    geo = [x.geometry_error_cm for x in evals if np.isfinite(x.geometry_error_cm)]
    pix = sum(x.pixels for x in evals)
    unc = sum(x.uncovered_pixels for x in evals)
    return ReconEval(d, float(np.mean(geo)) if geo else float("nan"),
                     unc / (unc + pix) if unc + pix else 0.0,
                     sum(x.correspondences for x in evals), pix, uncovered_pixels=unc)


# -- dataset index ------------------------------------------------------------------


@dataclass
class SequenceEntry:
    name: str
    split: str
    path: Path
    intrinsics: CameraIntrinsics
    frames: list[str]                       # depth PNG names, sorted
    pairs: list[PairAnnotation] = field(default_factory=list)

    def load_frame(self, index: int, with_mask: bool = True) -> RgbdFrame:
        from .geometry import read_color_png, read_depth_png, read_mask_png

        name = self.frames[index]
        color_path = self.path / "color" / name
        color = read_color_png(color_path) if color_path.exists() else None
        mpath = self.path / "mask" / name
        mask = read_mask_png(mpath) if with_mask and mpath.exists() else None
        return RgbdFrame(color, read_depth_png(self.path / "depth" / name), self.intrinsics, mask, index)

    def load_frames(self, count: int | None = None) -> list[RgbdFrame]:
        n = len(self.frames) if count is None else min(count, len(self.frames))
        return [self.load_frame(i) for i in range(n)]


@dataclass
class DatasetIndex:
    root: Path
    sequences: list[SequenceEntry] = field(default_factory=list)

    def split(self, name: str) -> list[SequenceEntry]:
        return [s for s in self.sequences if s.split == name]

    @property
    def pairs(self) -> list[PairAnnotation]:
        return [p for s in self.sequences for p in s.pairs]

    def find(self, name: str) -> SequenceEntry:
        for s in self.sequences:
            if s.name == name:
                return s
        raise KeyError(name)


def _as_array(entries, key, width):
    vals = [e.get(key) for e in entries]
    if not vals:
        return np.zeros((0, width))
    if any(v is None for v in vals):
        return None
    return np.asarray(vals, dtype=np.float64).reshape(-1, width)


def read_pair(path: Path, seq: SequenceEntry | None = None) -> PairAnnotation:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc})") from exc
    for key in ("source_frame", "target_frame", "matches"):
        if key not in data:
            raise DatasetError(f"{path}: missing field {key!r}")
    matches = data["matches"]
    for m in matches:
        if "source_uv" not in m or "target_uv" not in m:
            raise DatasetError(f"{path}: match without source_uv/target_uv")
    occ = data.get("occlusions", [])
    ann = PairAnnotation(
        str(data.get("pair_id", Path(path).stem)),
        int(data["source_frame"]), int(data["target_frame"]),
        _as_array(matches, "source_uv", 2), _as_array(matches, "target_uv", 2),
        _as_array(matches, "source_xyz", 3) if matches else None,
        _as_array(matches, "target_xyz", 3) if matches else None,
        np.asarray([o["source_uv"] for o in occ], dtype=np.float64).reshape(-1, 2),
        Path(path),
    )
    if seq is not None:
        for f in (ann.source_frame, ann.target_frame):
            if not 0 <= f < len(seq.frames):
                raise DatasetError(f"{path}: frame {f} not in sequence {seq.name}")
        for key in ("source_mask", "target_mask"):
            if key in data and not (seq.path / data[key]).exists():
                raise DatasetError(f"{path}: referenced mask {seq.path / data[key]} does not exist")
    return ann


def load_sequence(path, name: str | None = None, split: str = "") -> SequenceEntry:
    path = Path(path)
    kpath = path / "intrinsics.txt"
    if not kpath.exists():
        raise DatasetError(f"missing intrinsics file: {kpath}")
    try:
        K = CameraIntrinsics.load(kpath)
    except (ValueError, OSError) as exc:
        raise DatasetError(f"{kpath}: {exc}") from exc
    frames = sorted(p.name for p in (path / "depth").glob("*.png"))
    for name_ in frames:
        cpath = path / "color" / name_
        if not cpath.exists():
            raise DatasetError(f"missing color image: {cpath}")
    seq = SequenceEntry(name or path.name, split, path, K, frames)
    ids = set()
    for pfile in sorted((path / "pairs").glob("*.json")):
        ann = read_pair(pfile, seq)
        if ann.pair_id in ids:
            raise DatasetError(f"{pfile}: duplicate pair id {ann.pair_id!r}")
        ids.add(ann.pair_id)
        seq.pairs.append(ann)
    return seq


def load_dataset(root) -> DatasetIndex:
    """Index every sequence of every split; raise DatasetError on the first problem."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    index = DatasetIndex(root)
    seen: dict[str, str] = {}
    pair_ids: dict[str, Path] = {}
    for split in SPLITS:
        sdir = root / split
        if not sdir.is_dir():
            continue
        for seq_dir in sorted(p for p in sdir.iterdir() if p.is_dir()):
            if seq_dir.name in seen:
                raise DatasetError(f"{seq_dir}: sequence also listed in split {seen[seq_dir.name]!r}")
            seen[seq_dir.name] = split
            seq = load_sequence(seq_dir, seq_dir.name, split)
            for ann in seq.pairs:
                key = f"{seq.name}/{ann.pair_id}"
                if key in pair_ids:
                    raise DatasetError(f"{ann.path}: duplicate pair id {key!r}")
                pair_ids[key] = ann.path
            index.sequences.append(seq)
    return index
