"""Residual terms of the tracking and alignment energies.

Each term produces residual blocks together with a sparse Jacobian w.r.t. the
flat 6K graph parameter vector. Terms that re-associate data (projective ICP,
in-bounds tests for image samples) do so in :meth:`update`; :meth:`evaluate`
keeps that association fixed so the Jacobian is exact for the current
linearisation.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields

import numpy as np
from scipy import sparse

from .geometry import (
    CameraIntrinsics,
    DistanceMap,
    RgbdFrame,
    SurfaceMesh,
    bilinear_sample_many,
    distance_map,
    image_gradient,
    normal_map,
    point_map,
    project_points,
    projection_jacobian,
    to_grayscale,
)
from .graph import DeformationGraph, SkinningWeights, rotation_exp, skinning, warp_normals, warp_points

# residual stacking order
TERM_ORDER = ("icp_plane", "icp_point", "photometric", "silhouette", "sparse",
              "learned_heatmap", "learned_point", "arap")

VISIBILITY_THRESHOLD = 0.5
DEPTH_GAP_THRESHOLD = 0.15
# absorbs float32 depth storage noise at the depth gate
_GATE_SLACK = 1e-6


@dataclass
class EnergyWeights:
    lambda_learned: float = 1.0
    lambda_reg: float = 1.0
    lambda_point: float = 10.0
    lambda_photo: float = 0.0
    lambda_silh: float = 0.0
    lambda_sparse: float = 0.0
    lambda_data: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")

    @classmethod
    def reconstruction(cls) -> "EnergyWeights":
        return cls(lambda_learned=1.0, lambda_reg=1.0, lambda_point=10.0)

    @classmethod
    def alignment(cls) -> "EnergyWeights":
        return cls(lambda_learned=0.0, lambda_reg=10.0, lambda_photo=0.001,
                   lambda_silh=0.0001, lambda_sparse=100.0)


@dataclass(frozen=True)
class SparseMatch:
    s: np.ndarray
    t: np.ndarray


@dataclass
class LearnedConstraint:
    node_index: int
    heatmap: np.ndarray
    p: np.ndarray | None
    visibility: float
    predicted_depth: float
    peak_pixel: tuple[int, int] | None = None


@dataclass
class ResidualBlocks:
    """Residuals of one term kind: ``residuals`` is (n_blocks, dim)."""

    kind: str
    dim: int
    residuals: np.ndarray
    jacobian: sparse.csr_matrix | None
    sources: np.ndarray
    weight: float

    @property
    def energy(self) -> float:
        return float(np.sum(self.residuals**2))

    @property
    def flat(self) -> np.ndarray:
        return self.residuals.reshape(-1)


def _warp_jacobian(dr_dW: np.ndarray, skin: SkinningWeights, dtheta: np.ndarray, n_params: int,
                   scale: float = 1.0) -> sparse.csr_matrix:
    """Chain dr/dW (N, m, 3) through the blended warp into a (N*m, 6K) matrix."""
    n, m, _ = dr_dW.shape
    k = skin.indices.shape[1]
    if n == 0:
        return sparse.csr_matrix((0, n_params))
    jt = np.einsum("nab,nkbc->nkac", dr_dW, dtheta) * scale
    jtr = dr_dW[:, None, :, :] * skin.weights[:, :, None, None] * scale
    rows = np.broadcast_to(
        (np.arange(n)[:, None, None, None] * m + np.arange(m)[None, None, :, None]), (n, k, m, 3)
    )
    base = 6 * skin.indices[:, :, None, None] + np.arange(3)[None, None, None, :]
    cols_theta = np.broadcast_to(base, (n, k, m, 3))
    data = np.concatenate([jt.ravel(), jtr.ravel()])
    r = np.concatenate([rows.ravel(), rows.ravel()])
    c = np.concatenate([cols_theta.ravel(), (cols_theta + 3).ravel()])
    return sparse.csr_matrix((data, (r, c)), shape=(n * m, n_params))


class ResidualTerm:
    """Base class; subclasses set ``kinds`` and ``weight_key``."""

    weight_key = "lambda_data"
    weight = 1.0

    def with_weights(self, weights: EnergyWeights) -> "ResidualTerm":
        out = copy.copy(self)
        out.weight = getattr(weights, self.weight_key)
        return out

    def update(self, graph: DeformationGraph) -> None:
        pass

    def evaluate(self, graph: DeformationGraph, jacobian: bool = True) -> list[ResidualBlocks]:
        raise NotImplementedError

    def _blocks(self, kind, dim, residuals, jac, sources, weight) -> ResidualBlocks:
        return ResidualBlocks(kind, dim, np.asarray(residuals).reshape(-1, dim), jac,
                              np.asarray(sources, dtype=np.int64), weight)


class ArapTerm(ResidualTerm):
    """As-rigid-as-possible regulariser over every directed graph edge."""

    weight_key = "lambda_reg"

    def __init__(self, graph: DeformationGraph, weight: float = 1.0):
        e = graph.edges
        self.directed = np.concatenate([e, e[:, ::-1]]) if len(e) else np.zeros((0, 2), int)
        order = np.lexsort((self.directed[:, 1], self.directed[:, 0]))
        self.directed = self.directed[order]
        self.weight = weight

    def evaluate(self, graph, jacobian=True):
        i, j = self.directed[:, 0], self.directed[:, 1]
        s = np.sqrt(self.weight)
        g = graph.positions
        if jacobian:
            R, dR = rotation_exp(graph.rotations, derivative=True)
        else:
            R = rotation_exp(graph.rotations)
        d = g[j] - g[i]
        # R d - d rather than R d + g_i - g_j: exactly zero at the identity
        r = (np.einsum("nab,nb->na", R[i], d) - d) + (graph.translations[i] - graph.translations[j])
        r *= s
        jac = None
        if jacobian:
            n = len(i)
            rows = np.arange(n)[:, None, None] * 3 + np.arange(3)[None, :, None]
            rows = np.broadcast_to(rows, (n, 3, 3))
            cols = np.arange(3)[None, None, :]
            jth = np.einsum("nabc,nb->nac", dR[i], d) * s
            eye = np.broadcast_to(np.eye(3) * s, (n, 3, 3))
            data = np.concatenate([jth.ravel(), eye.ravel(), -eye.ravel()])
            rr = np.concatenate([rows.ravel()] * 3)
            cc = np.concatenate([
                np.broadcast_to(6 * i[:, None, None] + cols, (n, 3, 3)).ravel(),
                np.broadcast_to(6 * i[:, None, None] + 3 + cols, (n, 3, 3)).ravel(),
                np.broadcast_to(6 * j[:, None, None] + 3 + cols, (n, 3, 3)).ravel(),
            ])
            jac = sparse.csr_matrix((data, (rr, cc)), shape=(3 * n, graph.num_params))
        return [self._blocks("arap", 3, r, jac, np.arange(len(i)), s)]


class SparseTerm(ResidualTerm):
    """Annotated point matches pulled together through the blended warp."""

    weight_key = "lambda_sparse"

    def __init__(self, graph: DeformationGraph, matches, skin_k: int = 4, weight: float = 1.0):
        if len(matches):
            self.source = np.array([m.s for m in matches], dtype=np.float64).reshape(-1, 3)
            self.target = np.array([m.t for m in matches], dtype=np.float64).reshape(-1, 3)
        else:
            self.source = np.zeros((0, 3))
            self.target = np.zeros((0, 3))
        if not (np.all(np.isfinite(self.source)) and np.all(np.isfinite(self.target))):
            raise ValueError("sparse matches must be finite")
        self.skin = skinning(graph, self.source, skin_k) if len(self.source) else None
        self.weight = weight

    def evaluate(self, graph, jacobian=True):
        s = np.sqrt(self.weight)
        n = len(self.source)
        if n == 0:
            jac = sparse.csr_matrix((0, graph.num_params)) if jacobian else None
            return [self._blocks("sparse", 3, np.zeros((0, 3)), jac, [], s)]
        if jacobian:
            w, dth = warp_points(graph, self.skin, self.source, jacobian=True)
            dr = np.broadcast_to(np.eye(3), (n, 3, 3))
            jac = _warp_jacobian(dr, self.skin, dth, graph.num_params, s)
        else:
            w = warp_points(graph, self.skin, self.source)
            jac = None
        return [self._blocks("sparse", 3, s * (w - self.target), jac, np.arange(n), s)]


class LearnedTerm(ResidualTerm):
    """Heatmap + back-projected point constraints on individual graph nodes.

    Each surviving constraint i contributes ``1 - H_i(pi(g_i + t_i))`` and
    ``sqrt(lambda_point) * (g_i + t_i - p_i)``, both scaled by
    ``sqrt(lambda_learned)``. Only the node's own translation enters.
    """

    weight_key = "lambda_learned"

    def __init__(self, constraints, intrinsics: CameraIntrinsics, point_weight: float = 10.0,
                 weight: float = 1.0):
        self.constraints = [c for c in constraints if c.p is not None]
        self.K = intrinsics
        self.point_weight = point_weight
        self.weight = weight

    def with_weights(self, weights):
        out = super().with_weights(weights)
        out.point_weight = weights.lambda_point
        return out

    def evaluate(self, graph, jacobian=True):
        s = np.sqrt(self.weight)
        sp = np.sqrt(self.weight * self.point_weight)
        n = len(self.constraints)
        P = graph.num_params
        if n == 0:
            empty = sparse.csr_matrix((0, P)) if jacobian else None
            return [self._blocks("learned_heatmap", 1, np.zeros((0, 1)), empty, [], s),
                    self._blocks("learned_point", 3, np.zeros((0, 3)), empty, [], sp)]
        nodes = np.array([c.node_index for c in self.constraints])
        pos = graph.positions[nodes] + graph.translations[nodes]
        uv, front = project_points(pos, self.K)
        Jp = np.zeros((n, 2, 3))
        if front.any():
            Jp[front] = projection_jacobian(pos[front], self.K)
        # outside the image (or behind the camera) the heatmap reads 0: residual 1, no gradient
        heat = np.zeros(n)
        dheat = np.zeros((n, 3))
        for a, c in enumerate(self.constraints):
            if not front[a]:
                continue
            val, du, dv, inside = bilinear_sample_many(c.heatmap, uv[a][None])
            if inside[0]:
                heat[a] = val[0]
                dheat[a] = np.array([du[0], dv[0]]) @ Jp[a]
        r_heat = s * (1.0 - heat)
        r_point = sp * (pos - np.array([c.p for c in self.constraints]))
        jac_h = jac_p = None
        if jacobian:
            cols = 6 * nodes[:, None] + 3 + np.arange(3)[None, :]
            rows = np.broadcast_to(np.arange(n)[:, None], (n, 3))
            jac_h = sparse.csr_matrix(((-s * dheat).ravel(), (rows.ravel(), cols.ravel())), shape=(n, P))
            rows3 = np.arange(3 * n).reshape(n, 3)
            jac_p = sparse.csr_matrix((np.full(3 * n, sp), (rows3.ravel(), cols.ravel())), shape=(3 * n, P))
        src = np.arange(n)
        return [self._blocks("learned_heatmap", 1, r_heat, jac_h, src, s),
                self._blocks("learned_point", 3, r_point, jac_p, src, sp)]


class DenseIcpTerm(ResidualTerm):
    """Projective point-to-plane + point-to-point alignment to a depth map."""

    weight_key = "lambda_data"

    def __init__(self, graph: DeformationGraph, mesh: SurfaceMesh, target: RgbdFrame, skin_k: int = 4,
                 max_distance: float = 0.1, max_angle_deg: float = 60.0, point_scale: float = 0.1,
                 use_target_mask: bool = True, weight: float = 1.0):
        self.vertices = mesh.vertices
        self.normals = mesh.normals
        self.skin = skinning(graph, self.vertices, skin_k) if len(mesh) else None
        self.K = target.intrinsics
        depth = target.depth
        if use_target_mask and target.mask is not None:
            depth = np.where(target.mask, depth, 0.0)
        self.target_points = point_map(depth, self.K)
        self.target_normals = normal_map(depth, self.K)
        self.target_valid = (depth > 0) & np.all(np.isfinite(self.target_normals), axis=-1)
        self.max_distance = max_distance
        self.min_cos = np.cos(np.deg2rad(max_angle_deg))
        self.point_scale = point_scale
        self.weight = weight
        self.active = np.zeros(0, dtype=np.int64)
        self.q = np.zeros((0, 3))
        self.nq = np.zeros((0, 3))

    def update(self, graph):
        if self.skin is None:
            return
        R = rotation_exp(graph.rotations)
        warped = warp_points(graph, self.skin, self.vertices, rotations=R)
        nrm = warp_normals(graph, self.skin, self.normals, rotations=R)
        uv, front = project_points(warped, self.K)
        h, w = self.K.shape
        px = np.where(front[:, None], np.round(np.nan_to_num(uv, nan=-1.0)), -1).astype(np.int64)
        ok = front & (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)
        ids = np.nonzero(ok)[0]
        pu, pv = px[ids, 0], px[ids, 1]
        valid = self.target_valid[pv, pu]
        ids, pu, pv = ids[valid], pu[valid], pv[valid]
        q = self.target_points[pv, pu]
        nq = self.target_normals[pv, pu]
        close = np.linalg.norm(warped[ids] - q, axis=1) <= self.max_distance
        aligned = np.einsum("na,na->n", nrm[ids], nq) >= self.min_cos
        keep = close & aligned
        self.active, self.q, self.nq = ids[keep], q[keep], nq[keep]

    def evaluate(self, graph, jacobian=True):
        s = np.sqrt(self.weight)
        P = graph.num_params
        n = len(self.active)
        if n == 0:
            empty = sparse.csr_matrix((0, P)) if jacobian else None
            return [self._blocks("icp_plane", 1, np.zeros((0, 1)), empty, [], s),
                    self._blocks("icp_point", 3, np.zeros((0, 3)), empty, [], s * self.point_scale)]
        skin = self.skin.subset(self.active)
        pts = self.vertices[self.active]
        if jacobian:
            warped, dth = warp_points(graph, skin, pts, jacobian=True)
        else:
            warped = warp_points(graph, skin, pts)
        diff = warped - self.q
        r_plane = s * np.einsum("na,na->n", self.nq, diff)
        r_point = s * self.point_scale * diff
        jp = jq = None
        if jacobian:
            jp = _warp_jacobian(self.nq[:, None, :], skin, dth, P, s)
            jq = _warp_jacobian(np.broadcast_to(np.eye(3), (n, 3, 3)), skin, dth, P, s * self.point_scale)
        return [self._blocks("icp_plane", 1, r_plane, jp, self.active, s),
                self._blocks("icp_point", 3, r_point, jq, self.active, s * self.point_scale)]


class SilhouetteTerm(ResidualTerm):
    """Pixel distance to the target mask at each warped, projected vertex."""

    weight_key = "lambda_silh"

    def __init__(self, graph: DeformationGraph, mesh: SurfaceMesh, target_distance,
                 intrinsics: CameraIntrinsics, skin_k: int = 4, weight: float = 1.0):
        if isinstance(target_distance, DistanceMap):
            self.dist = target_distance.values
        else:
            arr = np.asarray(target_distance)
            self.dist = distance_map(arr).values if arr.dtype == bool else arr.astype(np.float64)
        self.vertices = mesh.vertices
        self.skin = skinning(graph, self.vertices, skin_k) if len(mesh) else None
        self.K = intrinsics
        self.weight = weight

    def evaluate(self, graph, jacobian=True):
        s = np.sqrt(self.weight)
        P = graph.num_params
        n = len(self.vertices)
        if n == 0:
            return [self._blocks("silhouette", 1, np.zeros((0, 1)),
                                 sparse.csr_matrix((0, P)) if jacobian else None, [], s)]
        if jacobian:
            warped, dth = warp_points(graph, self.skin, self.vertices, jacobian=True)
        else:
            warped = warp_points(graph, self.skin, self.vertices)
        uv, front = project_points(warped, self.K)
        uv = np.where(front[:, None], uv, 0.0)
        vals, du, dv, _ = bilinear_sample_many(self.dist, uv, clamp=True)
        vals = np.where(front, vals, self.dist.max())
        jac = None
        if jacobian:
            Jp = np.zeros((n, 2, 3))
            Jp[front] = projection_jacobian(warped[front], self.K)
            grad = np.stack([du, dv], axis=1)[:, None, :] * front[:, None, None]
            jac = _warp_jacobian(grad @ Jp, self.skin, dth, P, s)
        return [self._blocks("silhouette", 1, s * vals, jac, np.arange(n), s)]


class PhotometricTerm(ResidualTerm):
    """Grey-level gradient consistency between source and warped target pixels."""

    weight_key = "lambda_photo"

    def __init__(self, graph: DeformationGraph, mesh: SurfaceMesh, source: RgbdFrame, target: RgbdFrame,
                 skin_k: int = 4, weight: float = 1.0):
        self.K = target.intrinsics
        self.vertices = mesh.vertices
        self.skin = skinning(graph, self.vertices, skin_k) if len(mesh) else None
        grad_s = image_gradient(to_grayscale(source.color))
        if mesh.source_pixel is not None:
            px = mesh.source_pixel
            self.source_grad = grad_s[px[:, 1], px[:, 0]]
            self.source_ok = np.ones(len(mesh), dtype=bool)
        else:
            uv, front = project_points(self.vertices, source.intrinsics)
            vals, _, _, inside = bilinear_sample_many(grad_s, np.nan_to_num(uv))
            self.source_grad = vals
            self.source_ok = front & inside
        self.target_grad = image_gradient(to_grayscale(target.color))
        self.weight = weight
        self.active = np.nonzero(self.source_ok)[0]

    def update(self, graph):
        if self.skin is None:
            return
        warped = warp_points(graph, self.skin, self.vertices)
        uv, front = project_points(warped, self.K)
        h, w = self.K.shape
        inside = front & (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1)
        self.active = np.nonzero(inside & self.source_ok)[0]

    def evaluate(self, graph, jacobian=True):
        s = np.sqrt(self.weight)
        P = graph.num_params
        n = len(self.active)
        if n == 0:
            return [self._blocks("photometric", 2, np.zeros((0, 2)),
                                 sparse.csr_matrix((0, P)) if jacobian else None, [], s)]
        skin = self.skin.subset(self.active)
        pts = self.vertices[self.active]
        if jacobian:
            warped, dth = warp_points(graph, skin, pts, jacobian=True)
        else:
            warped = warp_points(graph, skin, pts)
        uv, front = project_points(warped, self.K)
        uv = np.where(front[:, None], uv, 0.0)
        vals, du, dv, _ = bilinear_sample_many(self.target_grad, uv, clamp=True)
        r = s * (vals - self.source_grad[self.active])
        jac = None
        if jacobian:
            Jp = np.zeros((n, 2, 3))
            Jp[front] = projection_jacobian(warped[front], self.K)
            d_uv = np.stack([du, dv], axis=2)  # (n, channel, uv)
            jac = _warp_jacobian(d_uv @ Jp, skin, dth, P, s)
        return [self._blocks("photometric", 2, r, jac, self.active, s)]


def filter_learned(constraints, depth_map: np.ndarray, visibility_threshold: float = VISIBILITY_THRESHOLD,
                   depth_threshold: float = DEPTH_GAP_THRESHOLD) -> list[LearnedConstraint]:
    """Drop low-visibility and depth-inconsistent heatmap correspondences."""
    kept = []
    depth_map = np.asarray(depth_map)
    for c in constraints:
        if not c.visibility >= visibility_threshold:
            continue
        row, col = np.unravel_index(int(np.argmax(c.heatmap)), c.heatmap.shape)
        d = depth_map[row, col]
        if not d > 0:
            continue
        if abs(c.predicted_depth - d) > depth_threshold + _GATE_SLACK:
            continue
        kept.append(c)
    return kept


@dataclass
class Evaluation:
    residuals: np.ndarray
    jacobian: sparse.csr_matrix | None
    blocks: list[ResidualBlocks] = field(default_factory=list)

    @property
    def energy(self) -> float:
        return float(self.residuals @ self.residuals)

    def term_energies(self) -> dict[str, float]:
        out = {k: 0.0 for k in TERM_ORDER if any(b.kind == k for b in self.blocks)}
        for b in self.blocks:
            out[b.kind] += b.energy
        return out


class EnergySpec:
    """A fixed set of weighted residual terms stacked into one vector field."""

    def __init__(self, terms):
        self.terms = list(terms)

    @property
    def kinds(self) -> list[str]:
        return [k for k in TERM_ORDER if any(isinstance(t, ResidualTerm) for t in self.terms)]

    def update(self, graph: DeformationGraph) -> None:
        for t in self.terms:
            t.update(graph)

    def evaluate(self, graph: DeformationGraph, jacobian: bool = True) -> Evaluation:
        blocks = [b for t in self.terms for b in t.evaluate(graph, jacobian)]
        blocks.sort(key=lambda b: TERM_ORDER.index(b.kind))
        r = np.concatenate([b.flat for b in blocks]) if blocks else np.zeros(0)
        J = None
        if jacobian:
            mats = [b.jacobian for b in blocks]
            J = sparse.vstack(mats, format="csr") if mats else sparse.csr_matrix((0, graph.num_params))
        return Evaluation(r, J, blocks)

    def energy(self, graph: DeformationGraph) -> float:
        return self.evaluate(graph, jacobian=False).energy


def assemble(terms, weights: EnergyWeights) -> EnergySpec:
    """Bind weights to terms and drop the inactive (zero-weight) ones."""
    bound = [t.with_weights(weights) for t in terms]
    active = [t for t in bound if t.weight > 0]
    if not active:
        raise ValueError("energy has no active terms")
    return EnergySpec(active)
