"""Embedded deformation graph: node sampling, connectivity, skinning and warping.

Parameters are laid out node-major in a flat vector of length 6K:
``[theta_0 (3), t_0 (3), theta_1 (3), t_1 (3), ...]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

SMALL_ANGLE = 1e-5


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices for (..., 3) vectors."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


_BASIS_SKEW = skew(np.eye(3))


def rotation_exp(theta, derivative: bool = False):
    """Axis-angle exponential map for one vector or a batch of shape (N, 3).

    With ``derivative`` also returns dR/dtheta_k stacked on a trailing axis,
    i.e. an array of shape (..., 3, 3, 3) where ``dR[..., :, :, k]`` is the
    derivative w.r.t. the k-th component.
    """
    theta = np.asarray(theta, dtype=np.float64)
    single = theta.ndim == 1
    th = theta.reshape(-1, 3)
    angle = np.linalg.norm(th, axis=1)
    K = skew(th)
    K2 = K @ K
    small = angle < SMALL_ANGLE
    safe = np.where(small, 1.0, angle)
    a = np.where(small, 1.0 - angle**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - angle**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    R = np.eye(3) + a[:, None, None] * K + b[:, None, None] * K2
    if not derivative:
        return R[0] if single else R

    dR = np.empty(R.shape + (3,))
    eye = np.eye(3)
    for k in range(3):
        Ek = _BASIS_SKEW[k]
        # second-order Taylor derivative for tiny angles
        taylor = Ek + 0.5 * (Ek @ K + K @ Ek)
        # closed form: (theta_k [theta]x + [theta x (I - R) e_k]x) R / |theta|^2
        col = (eye - R)[:, :, k]
        cross = np.cross(th, col)
        exact = (th[:, k, None, None] * K + skew(cross)) @ R / safe[:, None, None] ** 2
        dR[..., k] = np.where(small[:, None, None], taylor, exact)
    if single:
        return R[0], dR[0]
    return R, dR


def normalize_rotation(theta: np.ndarray) -> np.ndarray:
    """Map axis-angle vectors to the equivalent rotation with |theta| <= pi."""
    th = np.asarray(theta, dtype=np.float64).reshape(-1, 3).copy()
    angle = np.linalg.norm(th, axis=1)
    wrap = angle > np.pi
    if wrap.any():
        wrapped = np.mod(angle[wrap] + np.pi, 2 * np.pi) - np.pi
        th[wrap] *= (wrapped / angle[wrap])[:, None]
    return th.reshape(np.shape(theta))


@dataclass(frozen=True)
class DeformationNode:
    g: np.ndarray
    theta: np.ndarray
    t: np.ndarray


@dataclass(frozen=True)
class SkinningWeights:
    indices: np.ndarray  # (N, k) node indices
    weights: np.ndarray  # (N, k) convex weights

    def __len__(self) -> int:
        return len(self.indices)

    def subset(self, rows) -> "SkinningWeights":
        return SkinningWeights(self.indices[rows], self.weights[rows])


@dataclass
class DeformationGraph:
    positions: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    edges: np.ndarray
    sigma: float
    _tree: cKDTree | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3)
        self.translations = np.asarray(self.translations, dtype=np.float64).reshape(-1, 3)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        n = len(self.positions)
        if self.rotations.shape != (n, 3) or self.translations.shape != (n, 3):
            raise ValueError("node parameter arrays must match the node count")
        if len(self.edges) and (self.edges.min() < 0 or self.edges.max() >= n):
            raise ValueError("edge references a missing node")
        if np.any(self.edges[:, 0] == self.edges[:, 1]):
            raise ValueError("self-edges are not allowed")

    @classmethod
    def from_positions(cls, positions, sigma: float, edge_k: int = 8) -> "DeformationGraph":
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        edges = build_edges(positions, edge_k) if len(positions) >= 2 else np.zeros((0, 2), int)
        zeros = np.zeros_like(positions)
        return cls(positions, zeros, zeros.copy(), edges, sigma)

    @property
    def num_nodes(self) -> int:
        return len(self.positions)

    @property
    def num_params(self) -> int:
        return 6 * self.num_nodes

    @property
    def nodes(self) -> list[DeformationNode]:
        return [
            DeformationNode(g, r, t)
            for g, r, t in zip(self.positions, self.rotations, self.translations)
        ]

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.rotations, self.translations], axis=1).ravel()

    def with_params(self, x: np.ndarray) -> "DeformationGraph":
        x = np.asarray(x, dtype=np.float64).reshape(-1, 6)
        if len(x) != self.num_nodes:
            raise ValueError(f"expected {self.num_params} parameters, got {x.size}")
        out = DeformationGraph(self.positions, x[:, :3].copy(), x[:, 3:].copy(), self.edges, self.sigma)
        out._tree = self._tree
        return out

    def copy(self) -> "DeformationGraph":
        return self.with_params(self.params)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.positions)
        return self._tree

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {"g": g.tolist(), "theta": r.tolist(), "t": t.tolist()}
                for g, r, t in zip(self.positions, self.rotations, self.translations)
            ],
            "edges": self.edges.tolist(),
            "sigma": self.sigma,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DeformationGraph":
        nodes = data["nodes"]
        return cls(
            [n["g"] for n in nodes],
            [n["theta"] for n in nodes],
            [n["t"] for n in nodes],
            data.get("edges", []),
            float(data["sigma"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "DeformationGraph":
        return cls.from_dict(json.loads(Path(path).read_text()))


def sample_nodes(vertices: np.ndarray, radius: float) -> np.ndarray:
    """Greedy Poisson-disk cover of a vertex set.

    Vertices are visited in order; a vertex becomes a node unless it already
    lies within ``radius`` of an existing node. Every vertex ends up within
    ``radius`` of a node and nodes are more than ``radius`` apart.
    """
    vertices = np.asarray(getattr(vertices, "vertices", vertices), dtype=np.float64).reshape(-1, 3)
    if len(vertices) == 0:
        raise ValueError("cannot sample nodes on an empty mesh")
    if radius <= 0:
        raise ValueError("sampling radius must be positive")
    tree = cKDTree(vertices)
    covered = np.zeros(len(vertices), dtype=bool)
    chosen = []
    for i in range(len(vertices)):
        if covered[i]:
            continue
        chosen.append(i)
        covered[tree.query_ball_point(vertices[i], radius)] = True
    return vertices[chosen].copy()


def build_edges(nodes: np.ndarray, k: int) -> np.ndarray:
    """Symmetrised k-nearest-neighbour edges as sorted (i, j) pairs with i < j."""
    nodes = np.asarray(nodes, dtype=np.float64).reshape(-1, 3)
    n = len(nodes)
    if n < 2:
        raise ValueError("need at least two nodes to build edges")
    if k < 1:
        raise ValueError("neighbour count must be >= 1")
    kk = min(k, n - 1)
    _, idx = cKDTree(nodes).query(nodes, kk + 1)
    pairs = set()
    for i in range(n):
        for j in idx[i]:
            if j != i and j < n:
                pairs.add((min(i, j), max(i, j)))
        # duplicated positions can push the node itself out of its own result
    return np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)


def skinning(graph: DeformationGraph, points, k: int = 4) -> SkinningWeights:
    """Gaussian skinning weights over the k nearest nodes (sigma = graph.sigma)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    kk = min(k, graph.num_nodes)
    dist, idx = graph.tree.query(pts, kk)
    dist = dist.reshape(len(pts), kk)
    idx = idx.reshape(len(pts), kk).astype(np.int64)
    raw = np.exp(-(dist**2) / (2.0 * graph.sigma**2))
    total = raw.sum(axis=1)
    dead = total <= 0
    total[dead] = 1.0
    weights = raw / total[:, None]
    if dead.any():
        weights[dead] = 0.0
        weights[dead, 0] = 1.0  # query results are sorted, column 0 is the nearest node
    return SkinningWeights(idx, weights)


def node_transforms(graph: DeformationGraph, derivative: bool = False):
    return rotation_exp(graph.rotations, derivative=derivative)


def warp_points(graph: DeformationGraph, skin: SkinningWeights, points, jacobian: bool = False,
                rotations=None):
    """Blend node transforms over ``points``.

    Returns warped points (N, 3); with ``jacobian`` also the per-neighbour
    rotation derivative block of shape (N, k, 3, 3) where ``[n, j, :, c]`` is
    dW/dtheta_c of node ``skin.indices[n, j]``. The translation block is
    ``weights[n, j] * I`` and is left implicit.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if rotations is None:
        rotations = rotation_exp(graph.rotations, derivative=jacobian)
    if jacobian:
        R, dR = rotations
    else:
        R = rotations[0] if isinstance(rotations, tuple) else rotations
    idx, w = skin.indices, skin.weights
    g = graph.positions[idx]  # (N, k, 3)
    local = pts[:, None, :] - g
    moved = np.einsum("nkab,nkb->nka", R[idx], local) + g + graph.translations[idx]
    warped = np.einsum("nk,nka->na", w, moved)
    if not jacobian:
        return warped
    dtheta = np.einsum("nkabc,nkb->nkac", dR[idx], local) * w[:, :, None, None]
    return warped, dtheta


def warp_point(graph: DeformationGraph, weights: SkinningWeights, p) -> np.ndarray:
    return warp_points(graph, weights, np.asarray(p)[None])[0]


def warp_normals(graph: DeformationGraph, skin: SkinningWeights, normals, rotations=None):
    """Rotate normals by the blended node rotations and renormalise."""
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    R = rotation_exp(graph.rotations) if rotations is None else rotations
    blended = np.einsum("nk,nkab->nab", skin.weights, R[skin.indices])
    out = np.einsum("nab,nb->na", blended, n)
    length = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.where(length > 0, length, 1.0)


def blended_linear_part(graph: DeformationGraph, skin: SkinningWeights, rotations=None) -> np.ndarray:
    R = rotation_exp(graph.rotations) if rotations is None else rotations
    return np.einsum("nk,nkab->nab", skin.weights, R[skin.indices])


def invert_warp(graph: DeformationGraph, targets, k: int = 4, iterations: int = 10,
                initial=None) -> np.ndarray:
    """Find canonical points x with W(x) ~= targets by damped Newton iterations.

    Skinning is re-evaluated at every iterate; the Jacobian of the blend is
    approximated by the blended rotation (weight derivatives are ignored).
    """
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    x = targets.copy() if initial is None else np.asarray(initial, dtype=np.float64).reshape(-1, 3).copy()
    R = rotation_exp(graph.rotations)
    for _ in range(iterations):
        skin = skinning(graph, x, k)
        err = warp_points(graph, skin, x, rotations=R) - targets
        A = blended_linear_part(graph, skin, R)
        x = x - np.linalg.solve(A, err[:, :, None])[:, :, 0]
    return x


def extend_graph(graph: DeformationGraph, points, radius: float, edge_k: int = 8,
                 skin_k: int = 4) -> tuple[DeformationGraph, int]:
    """Add nodes over ``points`` (canonical space) farther than ``radius`` from the graph.

    New nodes take the displacement the current warp already applies at their
    location and the rotation of their nearest existing node, so adding them
    leaves the deformation of nearby space nearly unchanged.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0 or graph.num_nodes == 0:
        return graph, 0
    dist, nearest = graph.tree.query(pts)
    far = dist > radius
    if not far.any():
        return graph, 0
    new = sample_nodes(pts[far], radius)
    skin = skinning(graph, new, skin_k)
    displaced = warp_points(graph, skin, new) - new
    _, near = graph.tree.query(new)
    positions = np.concatenate([graph.positions, new])
    rotations = np.concatenate([graph.rotations, graph.rotations[near]])
    translations = np.concatenate([graph.translations, displaced])
    edges = build_edges(positions, edge_k)
    return DeformationGraph(positions, rotations, translations, edges, graph.sigma), len(new)
