"""Synthetic deforming RGB-D sequences with exact ground-truth correspondences.

A template triangle mesh is deformed per frame and rendered with the z-buffer
rasteriser. Every rendered pixel knows its triangle and barycentrics, so its
position in any other frame is the same barycentric combination of that
frame's vertices.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    CameraIntrinsics,
    RgbdFrame,
    read_color_png,
    read_depth_png,
    read_mask_png,
    write_color_png,
    write_depth_png,
    write_mask_png,
)
from .render import RenderBuffers, rasterize

logger = logging.getLogger(__name__)

SCENE_KINDS = ("bending-cylinder", "two-segment-arm", "waving-sheet")
CAMERA_PATHS = ("static", "pan")


@dataclass
class SceneSpec:
    kind: str = "bending-cylinder"
    frames: int = 30
    width: int = 640
    height: int = 480
    fx: float = 525.0
    fy: float = 525.0
    radius: float = 0.06
    length: float = 0.4
    distance: float = 0.9
    bend_deg: float = 60.0
    twist_deg: float = 45.0
    camera_path: str = "static"
    camera_speed: float = 0.0   # metres per frame along x for the pan path
    depth_noise: float = 0.0    # metres, Gaussian
    pairs: int = 6
    matches_per_pair: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}; expected one of {SCENE_KINDS}")
        if self.camera_path not in CAMERA_PATHS:
            raise ValueError(f"unknown camera path {self.camera_path!r}")
        if self.frames < 2:
            raise ValueError("a sequence needs at least 2 frames")
        if self.width < 8 or self.height < 8:
            raise ValueError("image too small")
        if min(self.radius, self.length, self.distance, self.fx, self.fy) <= 0:
            raise ValueError("geometry and focal parameters must be positive")
        if self.depth_noise < 0 or self.pairs < 0 or self.matches_per_pair < 0:
            raise ValueError("noise and pair counts must be non-negative")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, (self.width - 1) / 2.0, (self.height - 1) / 2.0,
                                self.width, self.height)

    @classmethod
    def preset(cls, name: str, **overrides) -> "SceneSpec":
        """Named scenes; ``*-fast`` variants cover the same motion in a third of the frames."""
        base = name[:-5] if name.endswith("-fast") else name
        kw = {"kind": base}
        if name.endswith("-fast"):
            kw["frames"] = 10
        if base == "waving-sheet":
            kw.update(length=0.4, bend_deg=0.0, twist_deg=0.0)
        kw.update(overrides)
        return cls(**kw)


# -- templates ---------------------------------------------------------------


@dataclass
class Template:
    rest: np.ndarray        # (V, 3) intrinsic coordinates (meaning depends on the scene)
    triangles: np.ndarray   # (F, 3)
    texcoord: np.ndarray    # (V, 2) metres along the surface


def _grid_triangles(rows: int, cols: int) -> np.ndarray:
    i = np.arange(rows - 1)[:, None] * cols + np.arange(cols - 1)[None, :]
    i = i.ravel()
    return np.concatenate([np.stack([i, i + cols, i + 1], 1), np.stack([i + 1, i + cols, i + cols + 1], 1)])


def tube_template(radius: float, length: float, n_around: int = 96, n_along: int = 64) -> Template:
    # the seam sits at the back (angle pi) and is duplicated so texture coordinates stay continuous
    ang = np.linspace(-np.pi, np.pi, n_around + 1)
    s = np.linspace(0.0, length, n_along)
    S, A = np.meshgrid(s, ang, indexing="ij")
    rest = np.stack([A.ravel(), S.ravel(), np.full(S.size, radius)], axis=1)
    tex = np.stack([radius * A.ravel(), S.ravel()], axis=1)
    return Template(rest, _grid_triangles(n_along, n_around + 1), tex)


def sheet_template(width: float, height: float, nx: int = 80, ny: int = 64) -> Template:
    x = np.linspace(-width / 2, width / 2, nx)
    y = np.linspace(-height / 2, height / 2, ny)
    Y, X = np.meshgrid(y, x, indexing="ij")
    rest = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], axis=1)
    return Template(rest, _grid_triangles(ny, nx), rest[:, :2].copy())


def texture(tc: np.ndarray) -> np.ndarray:
    """Smooth procedural RGB texture in [0.2, 0.8] from surface coordinates (metres)."""
    u, v = tc[..., 0], tc[..., 1]
    r = 0.5 + 0.3 * np.sin(2 * np.pi * u / 0.05) * np.sin(2 * np.pi * v / 0.07)
    g = 0.5 + 0.3 * np.sin(2 * np.pi * (u + v) / 0.045)
    b = 0.5 + 0.3 * np.cos(2 * np.pi * (u - 2 * v) / 0.09)
    return np.stack([r, g, b], axis=-1)


# -- deformations ------------------------------------------------------------


def _motion_phase(frame: int, frames: int) -> float:
    """0 -> 1 -> back towards 0.5 over the sequence, smooth at the ends."""
    x = frame / max(frames - 1, 1)
    return float(np.sin(0.75 * np.pi * x) ** 2) if x <= 2 / 3 else float(1.0 - 0.5 * np.sin(1.5 * np.pi * (x - 2 / 3)) ** 2)


def _bent_tube(rest: np.ndarray, spec: SceneSpec, bend: float, twist: float) -> np.ndarray:
    ang, s, r = rest[:, 0], rest[:, 1], rest[:, 2]
    L = spec.length
    a = ang + twist * (s / L)
    # cross-section offsets: along the bending normal, and along z (towards the camera is -z)
    off_n = r * np.sin(a)
    off_z = -r * np.cos(a)
    kappa = bend / L
    x = kappa * s
    # (1 - cos(kappa s)) / kappa and sin(kappa s) / kappa written stably for small kappa
    c1 = s * np.where(np.abs(x) > 1e-8, (1 - np.cos(x)) / np.where(np.abs(x) > 1e-8, x, 1.0), x / 2)
    c2 = s * np.sinc(x / np.pi)
    base = np.array([0.0, L / 2, spec.distance])
    px = base[0] + c1 + off_n * np.cos(x)
    py = base[1] - c2 + off_n * np.sin(x)
    pz = base[2] + off_z
    return np.stack([px, py, pz], axis=1)


def _arm(rest: np.ndarray, spec: SceneSpec, bend: float, twist: float) -> np.ndarray:
    straight = _bent_tube(rest, spec, 0.0, 0.0)
    s = rest[:, 1]
    L = spec.length
    w = 0.03
    t = np.clip((s - (L / 2 - w)) / (2 * w), 0.0, 1.0)
    blend = t * t * (3 - 2 * t)
    elbow = np.array([0.0, 0.0, spec.distance])
    ang = bend * blend
    c, sn = np.cos(ang), np.sin(ang)
    d = straight - elbow
    # rotate in the image plane about the elbow; positive bend swings the forearm towards +x
    x = c * d[:, 0] - sn * d[:, 1]
    y = sn * d[:, 0] + c * d[:, 1]
    return np.stack([x, y, d[:, 2]], axis=1) + elbow


def _sheet(rest: np.ndarray, spec: SceneSpec, phase: float, frame: int) -> np.ndarray:
    x, y = rest[:, 0], rest[:, 1]
    w = spec.length
    amp = 0.06 * phase * (x + w / 2) / w
    z = spec.distance - amp * np.sin(2 * np.pi * (x / 0.3) - 0.4 * frame)
    return np.stack([x, y, z], axis=1)


@dataclass
class SyntheticScene:
    spec: SceneSpec
    template: Template = field(init=False)

    def __post_init__(self):
        if self.spec.kind == "waving-sheet":
            self.template = sheet_template(self.spec.length, 0.8 * self.spec.length)
        else:
            self.template = tube_template(self.spec.radius, self.spec.length)
        self._cache: dict[int, tuple[np.ndarray, RenderBuffers]] = {}

    def camera_offset(self, frame: int) -> np.ndarray:
        if self.spec.camera_path == "pan":
            return np.array([self.spec.camera_speed * frame, 0.0, 0.0])
        return np.zeros(3)

    def vertices(self, frame: int) -> np.ndarray:
        """Camera-space vertex positions of ``frame``."""
        spec = self.spec
        phase = _motion_phase(frame, spec.frames)
        bend = np.deg2rad(spec.bend_deg) * phase
        twist = np.deg2rad(spec.twist_deg) * phase
        if spec.kind == "bending-cylinder":
            v = _bent_tube(self.template.rest, spec, bend, twist)
        elif spec.kind == "two-segment-arm":
            v = _arm(self.template.rest, spec, bend, twist)
        else:
            v = _sheet(self.template.rest, spec, phase, frame)
        return v - self.camera_offset(frame)

    def render(self, frame: int) -> tuple[np.ndarray, RenderBuffers]:
        if frame not in self._cache:
            v = self.vertices(frame)
            self._cache[frame] = (v, rasterize(v, self.template.triangles, self.spec.intrinsics))
        return self._cache[frame]

    def frame(self, index: int) -> RgbdFrame:
        """Noise-free frame straight from the renderer (depth not quantised)."""
        _, buf = self.render(index)
        color = self._shade(buf)
        return RgbdFrame(color, buf.depth, self.spec.intrinsics, buf.mask, frame_id=index)

    def _shade(self, buf: RenderBuffers) -> np.ndarray:
        h, w = buf.mask.shape
        color = np.zeros((h, w, 3))
        m = buf.mask
        tri = self.template.triangles[buf.triangle[m]]
        tc = np.einsum("nk,nkc->nc", buf.bary[m], self.template.texcoord[tri])
        color[m] = texture(tc)
        return color

    def correspond(self, source: int, target: int, pixels: np.ndarray) -> np.ndarray:
        """Target-camera positions of the surface points seen at ``pixels`` in ``source``."""
        pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
        _, buf = self.render(source)
        vt = self.vertices(target)
        out = np.full((len(pixels), 3), np.nan)
        h, w = buf.mask.shape
        ok = (pixels[:, 0] >= 0) & (pixels[:, 0] < w) & (pixels[:, 1] >= 0) & (pixels[:, 1] < h)
        idx = np.nonzero(ok)[0]
        tri = buf.triangle[pixels[idx, 1], pixels[idx, 0]]
        hit = tri >= 0
        idx, tri = idx[hit], tri[hit]
        bary = buf.bary[pixels[idx, 1], pixels[idx, 0]]
        out[idx] = np.einsum("nk,nkc->nc", bary, vt[self.template.triangles[tri]])
        return out

    def correspond_points(self, source: int, target: int, points: np.ndarray) -> np.ndarray:
        """Carry arbitrary source-camera points on (or near) the surface to ``target``.

        Points are attached to the nearest template vertex in the source frame.
        Used for dense (per-vertex) ground truth where pixel lookups are too coarse.
        """
        from scipy.spatial import cKDTree

        vs = self.vertices(source)
        vt = self.vertices(target)
        _, nn = cKDTree(vs).query(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        # carry the small offset to the vertex along rigidly with the local translation
        return vt[nn] + (np.asarray(points).reshape(-1, 3) - vs[nn])

    def visible_in(self, target: int, points: np.ndarray, tolerance: float = 0.01) -> np.ndarray:
        """z-buffer visibility of target-camera points."""
        _, buf = self.render(target)
        K = self.spec.intrinsics
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.zeros(len(pts), dtype=bool)
        good = np.all(np.isfinite(pts), axis=1) & (pts[:, 2] > 0)
        z = np.where(good, pts[:, 2], 1.0)
        u = np.round(K.fx * pts[:, 0] / z + K.cx).astype(np.int64)
        v = np.round(K.fy * pts[:, 1] / z + K.cy).astype(np.int64)
        good &= (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
        d = buf.depth[v[good], u[good]]
        out[good] = (d > 0) & (np.abs(d - pts[good, 2]) <= tolerance)
        return out

    def ground_truth_warp(self):
        """Callable usable by :class:`~nrfusion.provider.SyntheticOracle`."""
        return lambda s, t, px: self.correspond(int(s), int(t), px)


# -- disk layout --------------------------------------------------------------


def _pair_annotation(scene: SyntheticScene, source: int, target: int, n: int, rng) -> dict:
    _, buf = scene.render(source)
    K = scene.spec.intrinsics
    vs, us = np.nonzero(buf.mask)
    pick = rng.choice(len(us), size=min(4 * n, len(us)), replace=False) if len(us) else np.zeros(0, int)
    px = np.stack([us[pick], vs[pick]], axis=1)
    tgt = scene.correspond(source, target, px)
    src = scene.correspond(source, source, px)
    vis = scene.visible_in(target, tgt)
    matches, occl = [], []
    for p, a, b, ok in zip(px, src, tgt, vis):
        if ok and len(matches) < n:
            uv = [float(K.fx * b[0] / b[2] + K.cx), float(K.fy * b[1] / b[2] + K.cy)]
            matches.append({"source_uv": [int(p[0]), int(p[1])], "target_uv": uv,
                            "source_xyz": [float(x) for x in a], "target_xyz": [float(x) for x in b]})
        elif not ok and len(occl) < n:
            occl.append({"source_uv": [int(p[0]), int(p[1])]})
    return {"source_frame": source, "target_frame": target, "matches": matches, "occlusions": occl}


def annotation_pairs(frames: int, count: int) -> list[tuple[int, int]]:
    """Evenly spread (0, t) pairs, always ending at the last frame."""
    if count <= 0:
        return []
    # spaced down from the last frame so a single pair still ends there
    targets = np.unique(np.round(np.linspace(frames - 1, 1, min(count, frames - 1))).astype(int))
    return [(0, int(t)) for t in targets]


def write_sequence(scene: SyntheticScene, out_dir) -> Path:
    """Write a dataset-layout sequence directory and return its path."""
    out = Path(out_dir)
    spec = scene.spec
    for sub in ("color", "depth", "mask", "gt", "pairs"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    spec.intrinsics.save(out / "intrinsics.txt")
    rng = np.random.default_rng(spec.seed)
    np.save(out / "gt" / "triangles.npy", scene.template.triangles)
    for f in range(spec.frames):
        v, buf = scene.render(f)
        depth = buf.depth
        if spec.depth_noise > 0:
            depth = np.where(buf.mask, depth + rng.normal(0.0, spec.depth_noise, depth.shape), 0.0)
        write_depth_png(out / "depth" / f"{f:06d}.png", depth)
        write_color_png(out / "color" / f"{f:06d}.png", scene._shade(buf))
        write_mask_png(out / "mask" / f"{f:06d}.png", buf.mask)
        np.save(out / "gt" / f"vertices_{f:06d}.npy", v)
    for s, t in annotation_pairs(spec.frames, spec.pairs):
        ann = _pair_annotation(scene, s, t, spec.matches_per_pair, rng)
        (out / "pairs" / f"{s:06d}_{t:06d}.json").write_text(json.dumps(ann, indent=1))
    (out / "scene.json").write_text(json.dumps(asdict(spec), indent=1))
    logger.info("wrote %d frames to %s", spec.frames, out)
    return out


class RecordedScene(SyntheticScene):
    """A synthetic scene restored from the ground-truth files of a sequence directory."""

    def __init__(self, directory):
        self.directory = Path(directory)
        spec = SceneSpec(**json.loads((self.directory / "scene.json").read_text()))
        super().__init__(spec)
        self.template.triangles = np.load(self.directory / "gt" / "triangles.npy")

    def vertices(self, frame: int) -> np.ndarray:
        path = self.directory / "gt" / f"vertices_{frame:06d}.npy"
        if not path.exists():
            raise FileNotFoundError(f"missing ground-truth vertices: {path}")
        return np.load(path)


def load_frames(seq_dir, frames=None) -> list[RgbdFrame]:
    """Read the color/depth/mask PNGs of a sequence directory."""
    seq_dir = Path(seq_dir)
    K = CameraIntrinsics.load(seq_dir / "intrinsics.txt")
    names = sorted(p.name for p in (seq_dir / "depth").glob("*.png"))
    if frames is not None:
        names = names[:frames]
    out = []
    for i, name in enumerate(names):
        color = read_color_png(seq_dir / "color" / name)
        depth = read_depth_png(seq_dir / "depth" / name)
        mpath = seq_dir / "mask" / name
        mask = read_mask_png(mpath) if mpath.exists() else None
        out.append(RgbdFrame(color, depth, K, mask, frame_id=int(Path(name).stem) if name[:-4].isdigit() else i))
    return out
