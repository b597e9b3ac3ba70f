"""Correspondence providers: per-query heatmap, depth and visibility predictions.

Two implementations share one interface. :class:`SyntheticOracle` renders
ideal predictions from a known ground-truth warp, and :class:`FileProvider`
serves heatmaps previously exported to disk.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
from scipy import ndimage

from .geometry import RgbdFrame, backproject

HEATMAP_SIGMA_PX = 7.0
OCCLUDED_VISIBILITY = 0.1

_MAGIC = b"DDHM"
_HEADER = struct.Struct("<4sIIffII")


class ProviderLookupError(KeyError):
    """A file-backed provider has no prediction for a requested query."""


@dataclass
class HeatmapPrediction:
    heatmap: np.ndarray
    depth: float
    visibility: float
    query_pixel: tuple[int, int]

    def __post_init__(self):
        self.heatmap = np.asarray(self.heatmap)
        if not np.all(np.isfinite(self.heatmap)) or np.any(self.heatmap < 0):
            raise ValueError("heatmap values must be finite and non-negative")
        if not 0.0 <= self.visibility <= 1.0:
            raise ValueError("visibility must lie in [0, 1]")
        if not self.depth > 0:
            raise ValueError("predicted depth must be positive")


@dataclass
class ProviderSpec:
    kind: str = "synthetic-oracle"
    noise_px: float = 0.0
    depth_noise: float = 0.0
    simulate_occlusion: bool = True
    directory: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("synthetic-oracle", "file-backed"):
            raise ValueError(f"unknown provider kind {self.kind!r}")
        if self.noise_px < 0 or self.depth_noise < 0:
            raise ValueError("noise levels must be non-negative")
        if self.kind == "file-backed" and not self.directory:
            raise ValueError("file-backed provider needs a directory")


class CorrespondenceProvider(Protocol):
    def predict(self, source: RgbdFrame, target: RgbdFrame, queries, pair_id: str | None = None
                ) -> list[HeatmapPrediction]: ...


def compose_heatmap(h_sg: np.ndarray, h_sm: np.ndarray) -> np.ndarray:
    """Element-wise product of the sigmoid and softmax heatmaps."""
    h_sg = np.asarray(h_sg, dtype=np.float64)
    h_sm = np.asarray(h_sm, dtype=np.float64)
    if h_sg.shape != h_sm.shape:
        raise ValueError(f"heatmap shapes differ: {h_sg.shape} vs {h_sm.shape}")
    return h_sg * h_sm


def normalize_to_max_one(heatmap: np.ndarray) -> np.ndarray:
    heatmap = np.asarray(heatmap, dtype=np.float64)
    peak = heatmap.max()
    if not peak > 0:
        raise ValueError("cannot normalise a heatmap without positive values")
    return heatmap / peak


def peak_and_backproject(pred: HeatmapPrediction, target: RgbdFrame):
    """Arg-max pixel (u, v) of the heatmap and its back-projected target point.

    Ties resolve to the smallest row-major index. The point is None when the
    target has no depth at the peak.
    """
    flat = int(np.argmax(pred.heatmap))
    row, col = np.unravel_index(flat, pred.heatmap.shape)
    d = target.depth[row, col]
    if not d > 0:
        return (int(col), int(row)), None
    return (int(col), int(row)), backproject((col, row), d, target.intrinsics)


def gaussian_heatmap(center, shape, sigma: float = HEATMAP_SIGMA_PX) -> np.ndarray:
    h, w = shape
    u = np.arange(w) - center[0]
    v = np.arange(h) - center[1]
    # separable evaluation, same values as the 2D formula
    return np.exp(-(v[:, None] ** 2) / (2 * sigma**2)) * np.exp(-(u[None, :] ** 2) / (2 * sigma**2))


# ground truth: (source_id, target_id, pixels (N, 2)) -> target-camera points (N, 3), NaN if unknown
GroundTruthWarp = Callable[[int, int, np.ndarray], np.ndarray]


@dataclass
class SyntheticOracle:
    """Ideal predictions from a known warp, with optional pixel/depth noise.

    Noise draws are seeded per (seed, source id, target id) so results do not
    depend on call order.
    """

    ground_truth: GroundTruthWarp
    noise_px: float = 0.0
    depth_noise: float = 0.0
    seed: int = 0
    simulate_occlusion: bool = True
    occlusion_tolerance: float = 0.03

    def predict(self, source: RgbdFrame, target: RgbdFrame, queries, pair_id=None):
        queries = np.asarray(queries, dtype=np.int64).reshape(-1, 2)
        sid = -1 if source.frame_id is None else source.frame_id
        tid = -1 if target.frame_id is None else target.frame_id
        rng = np.random.default_rng([self.seed, sid + 1, tid + 1])
        offsets = rng.normal(0.0, 1.0, size=(len(queries), 2)) * self.noise_px
        dnoise = rng.normal(0.0, 1.0, size=len(queries)) * self.depth_noise
        pts = np.asarray(self.ground_truth(sid, tid, queries), dtype=np.float64).reshape(-1, 3)
        K = target.intrinsics
        h, w = K.shape
        out = []
        for i, (q, p) in enumerate(zip(queries, pts)):
            known = np.all(np.isfinite(p)) and p[2] > 0
            if not known:
                heat = np.full((h, w), 1e-6)
                out.append(HeatmapPrediction(heat, 1.0, 0.0, (int(q[0]), int(q[1]))))
                continue
            uv = np.array([K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy])
            center = uv + offsets[i]
            visible = True
            if self.simulate_occlusion:
                pu, pv = np.round(uv).astype(int)
                inside = 0 <= pu < w and 0 <= pv < h
                d = target.depth[pv, pu] if inside else 0.0
                visible = inside and d > 0 and abs(d - p[2]) <= self.occlusion_tolerance
            heat = gaussian_heatmap(center, (h, w))
            if heat.max() <= 0:
                heat = np.full((h, w), 1e-6)
            out.append(HeatmapPrediction(
                heat, float(max(p[2] + dnoise[i], 1e-3)), 1.0 if visible else OCCLUDED_VISIBILITY,
                (int(q[0]), int(q[1])),
            ))
        return out


def synthetic_oracle(ground_truth_warp: GroundTruthWarp, noise_px: float = 0.0, seed: int = 0,
                     **kwargs) -> SyntheticOracle:
    return SyntheticOracle(ground_truth_warp, noise_px=noise_px, seed=seed, **kwargs)


# -- heatmap files ----------------------------------------------------------


def write_heatmap(path, pred: HeatmapPrediction) -> None:
    heat = np.ascontiguousarray(pred.heatmap, dtype="<f4")
    h, w = heat.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, h, w, pred.depth, pred.visibility, *pred.query_pixel))
        fh.write(heat.tobytes())


def read_heatmap(path, shape: tuple[int, int] | None = None) -> HeatmapPrediction:
    """Read a heatmap file; resample bilinearly when ``shape`` differs from the file."""
    data = Path(path).read_bytes()
    magic, h, w, depth, vis, qu, qv = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise ValueError(f"{path}: bad heatmap magic {magic!r}")
    heat = np.frombuffer(data, "<f4", h * w, _HEADER.size).reshape(h, w)
    if shape is not None and tuple(shape) != (h, w):
        zoom = (shape[0] / h, shape[1] / w)
        heat = np.clip(ndimage.zoom(heat.astype(np.float64), zoom, order=1), 0.0, None)
    else:
        heat = heat.copy()
    return HeatmapPrediction(heat, float(depth), float(vis), (int(qu), int(qv)))


@dataclass
class FileProvider:
    """Serves predictions listed in ``manifest.json`` of a heatmap directory.

    Manifest entries: ``{"pair_id", "query_index", "query_uv", "file"}``.
    """

    directory: Path
    entries: dict = field(default_factory=dict)

    def __post_init__(self):
        self.directory = Path(self.directory)
        manifest = json.loads((self.directory / "manifest.json").read_text())
        for e in manifest["entries"]:
            key = (str(e["pair_id"]), int(e["query_uv"][0]), int(e["query_uv"][1]))
            self.entries[key] = e

    def predict(self, source, target, queries, pair_id=None):
        if pair_id is None:
            pair_id = f"{source.frame_id}_{target.frame_id}"
        out = []
        for q in np.asarray(queries, dtype=np.int64).reshape(-1, 2):
            key = (str(pair_id), int(q[0]), int(q[1]))
            if key not in self.entries:
                raise ProviderLookupError(f"no heatmap for pair {pair_id!r}, query {tuple(int(x) for x in q)}")
            out.append(read_heatmap(self.directory / self.entries[key]["file"], target.intrinsics.shape))
        return out


def export_predictions(directory, pair_id: str, predictions, append: bool = True) -> Path:
    """Write predictions as heatmap files and register them in the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest_path = directory / "manifest.json"
    entries = []
    if append and manifest_path.exists():
        entries = json.loads(manifest_path.read_text())["entries"]
    safe = str(pair_id).replace("/", "__")
    for i, pred in enumerate(predictions):
        name = f"{safe}_{i:04d}.ddhm"
        write_heatmap(directory / name, pred)
        entries.append({"pair_id": str(pair_id), "query_index": i,
                        "query_uv": list(pred.query_pixel), "file": name})
    manifest_path.write_text(json.dumps({"entries": entries}, indent=1))
    return manifest_path


def make_provider(spec: ProviderSpec, ground_truth: GroundTruthWarp | None = None):
    if spec.kind == "file-backed":
        return FileProvider(Path(spec.directory))
    if ground_truth is None:
        raise ValueError("the synthetic oracle needs a ground-truth warp")
    return SyntheticOracle(ground_truth, spec.noise_px, spec.depth_noise, spec.seed, spec.simulate_occlusion)
