"""Builders shared by several test modules."""

import numpy as np

from nrfusion.energy import (ArapTerm, DenseIcpTerm, LearnedConstraint, LearnedTerm, PhotometricTerm,
                             SilhouetteTerm, SparseMatch, SparseTerm)
from nrfusion.geometry import CameraIntrinsics, RgbdFrame, SurfaceMesh, backproject, normal_map
from nrfusion.graph import DeformationGraph
from nrfusion.synth import SceneSpec, SyntheticScene

CAMERA = CameraIntrinsics(60.0, 60.0, 31.5, 23.5, 64, 48)


def random_graph(rng, n_nodes: int, sigma: float = 0.08, edge_k: int = 8, rot_scale: float = 0.3,
                 trans_scale: float = 0.02) -> DeformationGraph:
    pos = rng.uniform([-0.12, -0.1, 0.9], [0.12, 0.1, 1.1], size=(n_nodes, 3))
    g = DeformationGraph.from_positions(pos, sigma, edge_k)
    x = np.concatenate([rng.normal(0, rot_scale, (n_nodes, 3)),
                        rng.normal(0, trans_scale, (n_nodes, 3))], axis=1)
    return g.with_params(x.ravel())


def smooth_frame(K: CameraIntrinsics = CAMERA, z0: float = 1.0, mask=None, frame_id=None,
                 phase: float = 0.0) -> RgbdFrame:
    """Gently curved surface with a quadratic colour field.

    A quadratic field has an exactly affine central-difference gradient away
    from the border, so bilinear lookups into it are smooth everywhere inside.
    """
    v, u = np.mgrid[0:K.height, 0:K.width].astype(np.float64)
    depth = z0 + 0.002 * (u - K.cx) + 1e-4 * (v - K.cy) ** 2
    s = 1.0 / (K.width * K.height)
    base = s * ((u + phase) ** 2 + 0.5 * v**2 + 0.3 * u * v)
    color = np.stack([base, 0.5 * base + 0.1, 0.2 + 0.1 * base], axis=-1)
    return RgbdFrame(color, depth, K, mask, frame_id)


def gradient_problem(seed: int, n_nodes: int | None = None):
    """Random graph plus one instance of every residual term around it."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9)) if n_nodes is None else n_nodes
    graph = random_graph(rng, n)
    K = CAMERA
    target = smooth_frame(K)
    source = smooth_frame(K, phase=3.0)

    # surface points seen through interior pixels, pushed a little off the surface
    px = np.stack([rng.integers(12, K.width - 12, 40), rng.integers(10, K.height - 10, 40)], axis=1)
    pts = np.array([backproject(p, target.depth[p[1], p[0]], K) for p in px])
    pts += rng.normal(0, 0.004, pts.shape)
    nm = normal_map(target.depth, K)[px[:, 1], px[:, 0]]
    mesh = SurfaceMesh(pts, nm, source_pixel=px)

    # affine ramps: bilinear sampling of an affine field has no kinks
    v, u = np.mgrid[0:K.height, 0:K.width].astype(np.float64)
    dist = 3.0 + 0.7 * u + 0.4 * v
    skin_k = int(min(4, n))

    icp = DenseIcpTerm(graph, mesh, target, skin_k, max_distance=0.5, max_angle_deg=180.0)
    icp.update(graph)
    constraints = []
    for node in range(n):
        heat = 0.2 + 0.01 * u + 0.02 * v + 0.003 * node * u
        p = graph.positions[node] + rng.normal(0, 0.02, 3)
        constraints.append(LearnedConstraint(node, heat / heat.max(), p, 0.9, float(p[2])))
    matches = [SparseMatch(s, s + rng.normal(0, 0.01, 3)) for s in pts[:10]]
    terms = {
        "icp": icp,
        "arap": ArapTerm(graph, weight=1.7),
        "learned": LearnedTerm(constraints, K, point_weight=10.0, weight=1.3),
        "sparse": SparseTerm(graph, matches, skin_k, weight=2.0),
        "silhouette": SilhouetteTerm(graph, mesh, dist, K, skin_k, weight=0.5),
        "photometric": PhotometricTerm(graph, mesh, source, target, skin_k, weight=0.8),
    }
    return graph, terms


def scene_frames(preset: str, frames: int | None = None, **overrides):
    spec = SceneSpec.preset(preset, **overrides) if frames is None else SceneSpec.preset(
        preset, frames=frames, **overrides)
    scene = SyntheticScene(spec)
    return scene, [scene.frame(i) for i in range(spec.frames)]
