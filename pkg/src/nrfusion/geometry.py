"""Camera model, RGB-D containers and image-space helpers.

Conventions used everywhere in the package: right-handed camera space with
+z pointing into the scene, pixel (0, 0) at the top-left, and integer pixel
coordinates addressing pixel centres. Depth is stored in metres and 0 marks
an invalid measurement.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class GeometryError(ValueError):
    """Raised for invalid geometric input (bad depth, empty masks, ...)."""


class BoundaryError(GeometryError):
    """Raised when a continuous sample position falls outside an image."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def load(cls, path) -> "CameraIntrinsics":
        """Read a one-line ``fx fy cx cy width height`` text file."""
        tokens = Path(path).read_text().split()
        if len(tokens) != 6:
            raise GeometryError(f"{path}: expected 6 values, found {len(tokens)}")
        fx, fy, cx, cy = (float(t) for t in tokens[:4])
        return cls(fx, fy, cx, cy, int(float(tokens[4])), int(float(tokens[5])))

    def save(self, path) -> None:
        Path(path).write_text(
            f"{self.fx!r} {self.fy!r} {self.cx!r} {self.cy!r} {self.width} {self.height}\n"
        )


@dataclass(frozen=True)
class RgbdFrame:
    """Pre-registered colour + metric depth pair.

    ``frame_id`` is optional bookkeeping used by providers that need to know
    which frame of a sequence they are looking at.
    """

    color: np.ndarray
    depth: np.ndarray
    intrinsics: CameraIntrinsics
    mask: np.ndarray | None = None
    frame_id: int | None = None

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        if depth.shape != self.intrinsics.shape:
            raise GeometryError(f"depth shape {depth.shape} != intrinsics {self.intrinsics.shape}")
        if not np.all(np.isfinite(depth)) or np.any(depth < 0):
            raise GeometryError("depth values must be finite and non-negative")
        object.__setattr__(self, "depth", depth)
        if self.color is not None:
            color = np.asarray(self.color, dtype=np.float64)
            if color.shape[:2] != depth.shape:
                raise GeometryError("color and depth sizes differ")
            object.__setattr__(self, "color", color)
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != depth.shape:
                raise GeometryError("mask and depth sizes differ")
            object.__setattr__(self, "mask", mask)

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0

    def masked_valid(self) -> np.ndarray:
        valid = self.valid
        if self.mask is not None:
            valid = valid & self.mask
        return valid

    def intensity(self) -> np.ndarray:
        return to_grayscale(self.color)

    def with_mask(self, mask) -> "RgbdFrame":
        return RgbdFrame(self.color, self.depth, self.intrinsics, mask, self.frame_id)


@dataclass
class SurfaceMesh:
    vertices: np.ndarray
    normals: np.ndarray
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    source_pixel: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.source_pixel is not None:
            self.source_pixel = np.asarray(self.source_pixel, dtype=np.int64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) == 0

    @classmethod
    def empty(cls) -> "SurfaceMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)))


@dataclass(frozen=True)
class DistanceMap:
    values: np.ndarray


# -- projection -------------------------------------------------------------


def project(p, K: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of one point or an (N, 3) array to continuous pixels."""
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise GeometryError("cannot project a point with non-positive depth")
    u = K.fx * p[..., 0] / z + K.cx
    v = K.fy * p[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1)


def project_points(points: np.ndarray, K: CameraIntrinsics):
    """Vectorised projection that flags instead of raising.

    Returns ``(uv, in_front)``; entries with z <= 0 get NaN coordinates.
    """
    points = np.asarray(points, dtype=np.float64)
    z = points[:, 2]
    in_front = z > 1e-9
    safe_z = np.where(in_front, z, 1.0)
    uv = np.stack([K.fx * points[:, 0] / safe_z + K.cx, K.fy * points[:, 1] / safe_z + K.cy], axis=1)
    uv[~in_front] = np.nan
    return uv, in_front


def projection_jacobian(points: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """d(u, v)/d(x, y, z) for each point, shape (N, 2, 3)."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    iz = 1.0 / z
    J = np.zeros((len(points), 2, 3))
    J[:, 0, 0] = K.fx * iz
    J[:, 0, 2] = -K.fx * x * iz * iz
    J[:, 1, 1] = K.fy * iz
    J[:, 1, 2] = -K.fy * y * iz * iz
    return J


def backproject(pixel, d, K: CameraIntrinsics) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise GeometryError("back-projection needs positive depth")
    pixel = np.asarray(pixel, dtype=np.float64)
    x = (pixel[..., 0] - K.cx) * d / K.fx
    y = (pixel[..., 1] - K.cy) * d / K.fy
    return np.stack([x, y, d * np.ones_like(x)], axis=-1)


def point_map(depth: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Back-project a whole depth image to an (H, W, 3) array (zeros where invalid)."""
    h, w = depth.shape
    u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    pts = np.empty((h, w, 3))
    pts[..., 0] = (u - K.cx) * depth / K.fx
    pts[..., 1] = (v - K.cy) * depth / K.fy
    pts[..., 2] = depth
    return pts


def normal_map(depth: np.ndarray, K: CameraIntrinsics, max_jump: float = 0.05) -> np.ndarray:
    """Camera-facing unit normals from central differences; NaN where undefined."""
    pts = point_map(depth, K)
    valid = depth > 0
    normals = np.full(pts.shape, np.nan)
    du = pts[1:-1, 2:] - pts[1:-1, :-2]
    dv = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(dv, du)
    length = np.linalg.norm(n, axis=-1)
    ok = (
        valid[1:-1, 2:] & valid[1:-1, :-2] & valid[2:, 1:-1] & valid[:-2, 1:-1] & valid[1:-1, 1:-1]
        & (np.abs(du[..., 2]) < 2 * max_jump) & (np.abs(dv[..., 2]) < 2 * max_jump) & (length > 0)
    )
    inner = np.full(n.shape, np.nan)
    inner[ok] = n[ok] / length[ok, None]
    normals[1:-1, 1:-1] = inner
    return normals


# -- meshes -----------------------------------------------------------------


def frame_to_mesh(frame: RgbdFrame, max_edge: float = 0.05) -> SurfaceMesh:
    """Triangulate the valid (and masked) pixels of a frame on the pixel grid.

    A 2x2 pixel quad yields two triangles when all four pixels are usable and
    every edge of both triangles is shorter than ``max_edge`` metres.
    """
    usable = frame.masked_valid()
    if not usable.any():
        raise GeometryError("frame has no valid pixels to triangulate")
    K = frame.intrinsics
    h, w = usable.shape
    pts = point_map(frame.depth, K)

    index = np.full((h, w), -1, dtype=np.int64)
    rows, cols = np.nonzero(usable)
    index[rows, cols] = np.arange(len(rows))
    vertices = pts[rows, cols]

    p00, p01 = pts[:-1, :-1], pts[:-1, 1:]
    p10, p11 = pts[1:, :-1], pts[1:, 1:]
    quad = usable[:-1, :-1] & usable[:-1, 1:] & usable[1:, :-1] & usable[1:, 1:]
    for a, b in ((p00, p01), (p00, p10), (p01, p10), (p01, p11), (p10, p11)):
        quad &= np.linalg.norm(a - b, axis=-1) < max_edge
    qr, qc = np.nonzero(quad)
    i00, i01 = index[qr, qc], index[qr, qc + 1]
    i10, i11 = index[qr + 1, qc], index[qr + 1, qc + 1]
    # winding chosen so that fronto-parallel surfaces get normals towards the camera
    triangles = np.concatenate(
        [np.stack([i00, i10, i01], axis=1), np.stack([i01, i10, i11], axis=1)]
    )
    normals = vertex_normals(vertices, triangles)
    return SurfaceMesh(vertices, normals, triangles, np.stack([cols, rows], axis=1))


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals; isolated vertices face the camera origin."""
    acc = np.zeros_like(vertices)
    if len(triangles):
        a, b, c = (vertices[triangles[:, i]] for i in range(3))
        face = np.cross(b - a, c - a)
        for i in range(3):
            np.add.at(acc, triangles[:, i], face)
    length = np.linalg.norm(acc, axis=1)
    lonely = length < 1e-15
    if lonely.any():
        towards_cam = -vertices[lonely]
        nrm = np.linalg.norm(towards_cam, axis=1, keepdims=True)
        towards_cam = np.where(nrm > 0, towards_cam / np.where(nrm > 0, nrm, 1), [0.0, 0.0, -1.0])
        acc[lonely] = towards_cam
        length[lonely] = 1.0
    return acc / length[:, None]


# -- image helpers ----------------------------------------------------------


def distance_map(mask) -> DistanceMap:
    """Exact Euclidean pixel distance to the nearest mask pixel (0 inside)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise GeometryError("distance map needs a non-empty mask")
    return DistanceMap(ndimage.distance_transform_edt(~mask))


def to_grayscale(color: np.ndarray) -> np.ndarray:
    color = np.asarray(color, dtype=np.float64)
    if color.ndim == 2:
        return color
    return color[..., :3] @ LUMA_WEIGHTS


def image_gradient(img: np.ndarray) -> np.ndarray:
    """(H, W, 2) gradient (d/du, d/dv): central inside, one-sided at the border."""
    img = np.asarray(img, dtype=np.float64)
    dv, du = np.gradient(img, edge_order=1)
    return np.stack([du, dv], axis=-1)


def _bilinear_setup(shape, uv):
    h, w = shape
    u = uv[:, 0]
    v = uv[:, 1]
    inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1) & np.isfinite(u) & np.isfinite(v)
    uc = np.where(inside, u, 0.0)
    vc = np.where(inside, v, 0.0)
    u0 = np.clip(np.floor(uc).astype(np.int64), 0, max(w - 2, 0))
    v0 = np.clip(np.floor(vc).astype(np.int64), 0, max(h - 2, 0))
    return inside, u0, v0, uc - u0, vc - v0


def bilinear_sample_many(img: np.ndarray, uv: np.ndarray, clamp: bool = False):
    """Sample ``img`` (H, W) or (H, W, C) at continuous pixels ``uv`` (N, 2).

    Returns ``(values, d_du, d_dv, inside)``. With ``clamp`` the positions are
    first clamped to the image, so outside samples read the nearest border value
    and have zero derivative along the clamped axis.
    """
    img = np.asarray(img, dtype=np.float64)
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    h, w = img.shape[:2]
    if clamp:
        u = uv[:, 0]
        v = uv[:, 1]
        cu = np.clip(u, 0, w - 1)
        cv = np.clip(v, 0, h - 1)
        free_u = (u > 0) & (u < w - 1)
        free_v = (v > 0) & (v < h - 1)
        vals, du, dv, inside = bilinear_sample_many(img, np.stack([cu, cv], axis=1))
        mu = free_u.reshape((-1,) + (1,) * (du.ndim - 1))
        mv = free_v.reshape((-1,) + (1,) * (dv.ndim - 1))
        return vals, np.where(mu, du, 0.0), np.where(mv, dv, 0.0), inside
    inside, u0, v0, a, b = _bilinear_setup((h, w), uv)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    f00, f01 = img[v0, u0], img[v0, u1]
    f10, f11 = img[v1, u0], img[v1, u1]
    if img.ndim == 3:
        a = a[:, None]
        b = b[:, None]
    vals = (1 - a) * (1 - b) * f00 + a * (1 - b) * f01 + (1 - a) * b * f10 + a * b * f11
    du = (1 - b) * (f01 - f00) + b * (f11 - f10)
    dv = (1 - a) * (f10 - f00) + a * (f11 - f01)
    return vals, du, dv, inside


def bilinear_sample(img: np.ndarray, p) -> tuple[float, np.ndarray]:
    """Bilinear value and (d/du, d/dv) derivative at one continuous pixel."""
    vals, du, dv, inside = bilinear_sample_many(img, np.asarray(p, dtype=np.float64)[None])
    if not inside[0]:
        raise BoundaryError(f"sample position {tuple(p)} is outside the image")
    return vals[0], np.array([du[0], dv[0]])


# -- file IO ----------------------------------------------------------------


def read_depth_png(path) -> np.ndarray:
    """16-bit millimetre PNG -> float metres."""
    raw = np.array(Image.open(path))
    return raw.astype(np.float64) / 1000.0


def write_depth_png(path, depth: np.ndarray) -> None:
    mm = np.round(np.asarray(depth) * 1000.0)
    if mm.max(initial=0) > 65535:
        raise GeometryError("depth exceeds the 16-bit millimetre range")
    Image.fromarray(mm.astype(np.uint16)).save(path)


def read_color_png(path) -> np.ndarray:
    return np.array(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def write_color_png(path, color: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(color) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path)


def read_mask_png(path) -> np.ndarray:
    return np.array(Image.open(path).convert("L")) > 0


def write_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255).save(path)


def load_frame(color_path, depth_path, intrinsics: CameraIntrinsics, mask_path=None,
               frame_id: int | None = None) -> RgbdFrame:
    depth = read_depth_png(depth_path)
    color = read_color_png(color_path) if color_path is not None else np.zeros(depth.shape + (3,))
    mask = read_mask_png(mask_path) if mask_path is not None else None
    return RgbdFrame(color, depth, intrinsics, mask, frame_id)
