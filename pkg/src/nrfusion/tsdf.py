"""Canonical-space TSDF volume with warped running-average fusion."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage import measure

from .geometry import RgbdFrame, SurfaceMesh, vertex_normals
from .graph import DeformationGraph, SkinningWeights, rotation_exp, skinning, warp_normals, warp_points

W_MAX = 64.0
_MAGIC = b"TSDF"
_HEADER = struct.Struct("<4s3dd3Id")


@dataclass
class TsdfVolume:
    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]
    truncation: float
    tsdf: np.ndarray = None
    weight: np.ndarray = None
    _skin: SkinningWeights | None = field(default=None, init=False, repr=False)
    _skin_key: int = field(default=-1, init=False, repr=False)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.dims = tuple(int(d) for d in self.dims)
        if self.tsdf is None:
            self.tsdf = np.ones(self.dims)
        if self.weight is None:
            self.weight = np.zeros(self.dims)
        self.tsdf = np.asarray(self.tsdf, dtype=np.float64).reshape(self.dims)
        self.weight = np.asarray(self.weight, dtype=np.float64).reshape(self.dims)

    @classmethod
    def around(cls, points: np.ndarray, voxel_size: float = 0.01, margin: float = 0.1,
               truncation_voxels: float = 4.0) -> "TsdfVolume":
        """Allocate a volume covering the bounding box of ``points`` plus a margin."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        lo = pts.min(axis=0) - margin
        hi = pts.max(axis=0) + margin
        dims = np.ceil((hi - lo) / voxel_size).astype(int) + 1
        return cls(lo, voxel_size, tuple(dims), truncation_voxels * voxel_size)

    @property
    def num_voxels(self) -> int:
        return int(np.prod(self.dims))

    def voxel_centers(self) -> np.ndarray:
        axes = [np.arange(d) * self.voxel_size + o for d, o in zip(self.dims, self.origin)]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=1)

    def skin_for(self, graph: DeformationGraph, k: int = 4) -> SkinningWeights:
        # node positions only change when the graph grows
        key = graph.num_nodes
        if self._skin is None or self._skin_key != key:
            self._skin = skinning(graph, self.voxel_centers(), k)
            self._skin_key = key
        return self._skin

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(_MAGIC, *self.origin, self.voxel_size, *self.dims, self.truncation))
            fh.write(self.tsdf.astype("<f4").tobytes())
            fh.write(self.weight.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "TsdfVolume":
        data = Path(path).read_bytes()
        magic, ox, oy, oz, vs, nx, ny, nz, trunc = _HEADER.unpack_from(data)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a TSDF checkpoint")
        n = nx * ny * nz
        off = _HEADER.size
        tsdf = np.frombuffer(data, "<f4", n, off).astype(np.float64)
        weight = np.frombuffer(data, "<f4", n, off + 4 * n).astype(np.float64)
        return cls((ox, oy, oz), vs, (nx, ny, nz), trunc, tsdf, weight)


def integrate(volume: TsdfVolume, frame: RgbdFrame, graph: DeformationGraph | None = None,
              w_max: float = W_MAX, use_mask: bool = True, skin_k: int = 4) -> TsdfVolume:
    """Fuse one frame into the volume in place (and return it).

    Voxel centres are carried into the live frame by the graph (identity when
    ``graph`` is None), projected, and compared with the observed depth along z.
    """
    centers = volume.voxel_centers()
    if graph is not None and graph.num_nodes:
        live = warp_points(graph, volume.skin_for(graph, skin_k), centers)
    else:
        live = centers
    K = frame.intrinsics
    depth = frame.depth
    if use_mask and frame.mask is not None:
        depth = np.where(frame.mask, depth, 0.0)
    z = live[:, 2]
    front = z > 1e-6
    safe = np.where(front, z, 1.0)
    u = np.round(K.fx * live[:, 0] / safe + K.cx).astype(np.int64)
    v = np.round(K.fy * live[:, 1] / safe + K.cy).astype(np.int64)
    ok = front & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    idx = np.nonzero(ok)[0]
    d = depth[v[idx], u[idx]]
    sdf = d - z[idx]
    keep = (d > 0) & (sdf >= -volume.truncation)
    idx, sdf = idx[keep], sdf[keep]
    obs = np.minimum(sdf / volume.truncation, 1.0)

    tsdf = volume.tsdf.reshape(-1)
    weight = volume.weight.reshape(-1)
    alpha = 1.0 / (np.minimum(weight[idx], w_max) + 1.0)
    tsdf[idx] = (1.0 - alpha) * tsdf[idx] + alpha * obs
    weight[idx] = np.minimum(weight[idx] + 1.0, w_max)
    return volume


def _trilinear_gradient(volume: TsdfVolume, points: np.ndarray) -> np.ndarray:
    grad = np.stack(np.gradient(volume.tsdf, volume.voxel_size), axis=-1)
    rel = (points - volume.origin) / volume.voxel_size
    hi = np.array(volume.dims) - 1
    i0 = np.clip(np.floor(rel).astype(np.int64), 0, np.maximum(hi - 1, 0))
    f = np.clip(rel - i0, 0.0, 1.0)
    out = np.zeros((len(points), 3))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                wgt = (f[:, 0] if dx else 1 - f[:, 0]) * (f[:, 1] if dy else 1 - f[:, 1]) * \
                      (f[:, 2] if dz else 1 - f[:, 2])
                ii = np.minimum(i0 + [dx, dy, dz], hi)
                out += wgt[:, None] * grad[ii[:, 0], ii[:, 1], ii[:, 2]]
    return out


def extract_mesh(volume: TsdfVolume) -> SurfaceMesh:
    """Marching cubes on the zero level set, restricted to observed voxels.

    Normals are area-weighted face normals oriented along increasing signed
    distance, i.e. out of the surface towards free space.
    """
    observed = volume.weight > 0
    if not observed.any():
        return SurfaceMesh.empty()
    vals = volume.tsdf[observed]
    if vals.min() > 0 or vals.max() < 0 or min(volume.dims) < 2:
        return SurfaceMesh.empty()
    field_ = np.where(observed, volume.tsdf, 1.0)
    try:
        verts, faces, _, _ = measure.marching_cubes(
            field_, level=0.0, spacing=(volume.voxel_size,) * 3, mask=observed
        )
    except (ValueError, RuntimeError):
        return SurfaceMesh.empty()
    if len(verts) == 0:
        return SurfaceMesh.empty()
    verts = verts + volume.origin
    # orient faces so the right-hand rule agrees with the field gradient
    grad = _trilinear_gradient(volume, verts)
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    fn = np.cross(b - a, c - a)
    vote = np.einsum("na,na->n", fn, grad[faces].mean(axis=1))
    if np.sum(vote) < 0:
        faces = faces[:, ::-1]
    faces = faces.astype(np.int64)
    # the surface passing exactly through voxel centres yields zero-area faces; drop them
    # together with vertices no other face uses
    area2 = np.linalg.norm(fn, axis=1)
    faces = faces[area2 > 1e-12 * volume.voxel_size**2]
    if len(faces) == 0:
        return SurfaceMesh.empty()
    used, inverse = np.unique(faces, return_inverse=True)
    verts = verts[used]
    faces = inverse.reshape(-1, 3)
    return SurfaceMesh(verts, vertex_normals(verts, faces), faces)


def warp_mesh(mesh: SurfaceMesh, graph: DeformationGraph, skin_k: int = 4,
              skin: SkinningWeights | None = None) -> SurfaceMesh:
    if mesh.is_empty:
        return SurfaceMesh.empty()
    skin = skinning(graph, mesh.vertices, skin_k) if skin is None else skin
    R = rotation_exp(graph.rotations)
    verts = warp_points(graph, skin, mesh.vertices, rotations=R)
    normals = warp_normals(graph, skin, mesh.normals, rotations=R)
    return SurfaceMesh(verts, normals, mesh.triangles.copy(), mesh.source_pixel)


# -- PLY --------------------------------------------------------------------


def write_ply(path, mesh: SurfaceMesh, binary: bool = True) -> None:
    n, f = len(mesh.vertices), len(mesh.triangles)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float nx\nproperty float ny\nproperty float nz\n"
        f"element face {f}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            vdata = np.hstack([mesh.vertices, mesh.normals]).astype("<f4")
            fh.write(vdata.tobytes())
            fdt = np.dtype([("n", "u1"), ("i", "<i4", (3,))])
            faces = np.empty(f, dtype=fdt)
            faces["n"] = 3
            faces["i"] = mesh.triangles
            fh.write(faces.tobytes())
        else:
            lines = [" ".join(f"{x:.7g}" for x in row) for row in np.hstack([mesh.vertices, mesh.normals])]
            lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
            fh.write(("\n".join(lines) + "\n").encode("ascii"))


def read_ply(path) -> SurfaceMesh:
    """Read the PLY layout written by :func:`write_ply`."""
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    binary = any("binary_little_endian" in line for line in header)
    n = f = 0
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        elif line.startswith("element face"):
            f = int(line.split()[-1])
    body = data[end:]
    if binary:
        vdata = np.frombuffer(body, "<f4", n * 6).reshape(n, 6).astype(np.float64)
        fdt = np.dtype([("n", "u1"), ("i", "<i4", (3,))])
        faces = np.frombuffer(body, fdt, f, n * 24)["i"].astype(np.int64)
    else:
        rows = body.decode("ascii").split("\n")
        vdata = np.array([[float(x) for x in r.split()] for r in rows[:n]]).reshape(n, 6)
        faces = np.array([[int(x) for x in r.split()[1:4]] for r in rows[n:n + f]], dtype=np.int64).reshape(f, 3)
    return SurfaceMesh(vdata[:, :3], vdata[:, 3:], faces)
