"""End-to-end procedures: sequence reconstruction and dense frame-pair alignment."""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .energy import (
    DEPTH_GAP_THRESHOLD,
    VISIBILITY_THRESHOLD,
    ArapTerm,
    DenseIcpTerm,
    EnergyWeights,
    LearnedConstraint,
    LearnedTerm,
    PhotometricTerm,
    SilhouetteTerm,
    SparseMatch,
    SparseTerm,
    assemble,
    filter_learned,
)
from .geometry import RgbdFrame, SurfaceMesh, distance_map, frame_to_mesh
from .graph import DeformationGraph, extend_graph, invert_warp, sample_nodes, skinning, warp_points
from .provider import normalize_to_max_one, peak_and_backproject
from .solver import IterationLog, SolverConfig, SolverError, gauss_newton, write_trace
from .tsdf import TsdfVolume, extract_mesh, integrate, warp_mesh, write_ply

logger = logging.getLogger(__name__)

CYCLE_GATE = 0.02
_MATCH_RECORD = struct.Struct("<IIfffB")


class PipelineError(RuntimeError):
    """Reconstruction or alignment aborted; ``frame`` names the failing frame when known."""

    def __init__(self, message: str, frame: int | None = None):
        super().__init__(message if frame is None else f"frame {frame}: {message}")
        self.frame = frame


@dataclass
class ReconstructionConfig:
    voxel_size: float = 0.01
    truncation_voxels: float = 4.0
    w_max: float = 64.0
    volume_margin: float = 0.1
    node_radius: float = 0.05
    edge_k: int = 8
    skin_k: int = 4
    max_icp_vertices: int = 4000
    icp_max_distance: float = 0.1
    icp_max_angle_deg: float = 60.0
    mesh_max_edge: float = 0.05
    node_visibility_tolerance: float = 0.01
    visibility_threshold: float = VISIBILITY_THRESHOLD
    depth_threshold: float = DEPTH_GAP_THRESHOLD
    use_frame_masks: bool = False
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if min(self.voxel_size, self.node_radius, self.truncation_voxels, self.w_max) <= 0:
            raise ValueError("voxel size, node radius, truncation and w_max must be positive")
        if self.max_icp_vertices < 1 or self.skin_k < 1 or self.edge_k < 1:
            raise ValueError("vertex and neighbour counts must be >= 1")


@dataclass
class SequenceResult:
    canonical: SurfaceMesh
    graphs: list[DeformationGraph]
    warped: list[SurfaceMesh]
    logs: list[list[IterationLog]]
    queries: dict = field(default_factory=dict)        # pair id -> list of query pixels
    constraint_counts: list[int] = field(default_factory=list)
    runtime: float = 0.0

    @property
    def num_frames(self) -> int:
        return len(self.graphs)

    def warp_canonical_points(self, frame: int, points: np.ndarray, skin_k: int = 4) -> np.ndarray:
        g = self.graphs[frame]
        return warp_points(g, skinning(g, points, skin_k), points)


def _subsample(mesh: SurfaceMesh, limit: int) -> SurfaceMesh:
    """Every n-th vertex (no triangles) so at most ``limit`` vertices remain."""
    step = max(1, int(np.ceil(len(mesh) / limit)))
    sel = np.arange(0, len(mesh), step)
    px = None if mesh.source_pixel is None else mesh.source_pixel[sel]
    return SurfaceMesh(mesh.vertices[sel], mesh.normals[sel], np.zeros((0, 3), np.int64), px)


def node_queries(graph: DeformationGraph, reference: RgbdFrame, tolerance: float = 0.03):
    """Reference-frame pixels of the graph nodes that the reference frame actually sees."""
    K = reference.intrinsics
    pos = graph.positions
    front = pos[:, 2] > 1e-6
    z = np.where(front, pos[:, 2], 1.0)
    u = np.round(K.fx * pos[:, 0] / z + K.cx).astype(np.int64)
    v = np.round(K.fy * pos[:, 1] / z + K.cy).astype(np.int64)
    ok = front & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    usable = reference.masked_valid()
    idx = np.nonzero(ok)[0]
    idx = idx[usable[v[idx], u[idx]]]
    idx = idx[np.abs(reference.depth[v[idx], u[idx]] - pos[idx, 2]) <= tolerance]
    return idx, np.stack([u[idx], v[idx]], axis=1)


def learned_constraints(provider, reference: RgbdFrame, target: RgbdFrame, nodes, queries,
                        pair_id: str | None = None) -> list[LearnedConstraint]:
    if len(nodes) == 0:
        return []
    preds = provider.predict(reference, target, queries, pair_id=pair_id)
    out = []
    for node, pred in zip(nodes, preds):
        if not pred.heatmap.max() > 0:
            continue
        heat = normalize_to_max_one(pred.heatmap)
        peak, p = peak_and_backproject(pred, target)
        out.append(LearnedConstraint(int(node), heat, p, pred.visibility, pred.depth, peak))
    return out


def reconstruct_sequence(frames, initial_mask, provider, weights: EnergyWeights | None = None,
                         config: ReconstructionConfig | None = None, progress=None) -> SequenceResult:
    """Track and fuse a deforming object through ``frames``.

    Frame 0 (restricted to ``initial_mask``) defines the canonical space, the
    initial graph and the TSDF volume. Each later frame is aligned by
    Gauss-Newton warm-started from the previous frame's graph, then fused.
    """
    weights = weights or EnergyWeights.reconstruction()
    config = config or ReconstructionConfig()
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError("reconstruction needs at least 2 frames")
    if initial_mask is None or not np.asarray(initial_mask).any():
        raise ValueError("an initial object mask on frame 0 is required")
    t0 = time.perf_counter()
    reference = frames[0].with_mask(np.asarray(initial_mask, dtype=bool))
    ref_mesh = frame_to_mesh(reference, config.mesh_max_edge)
    if ref_mesh.is_empty:
        raise PipelineError("no valid geometry inside the initial mask", 0)
    nodes = sample_nodes(ref_mesh.vertices, config.node_radius)
    graph = DeformationGraph.from_positions(nodes, config.node_radius, config.edge_k)
    volume = TsdfVolume.around(ref_mesh.vertices, config.voxel_size, config.volume_margin,
                               config.truncation_voxels)
    integrate(volume, reference, None, config.w_max)
    canonical = extract_mesh(volume)

    result = SequenceResult(canonical, [graph.copy()], [canonical], [[]], {}, [0])
    K = reference.intrinsics
    use_learned = weights.lambda_learned > 0 and provider is not None
    for t in range(1, len(frames)):
        frame = frames[t]
        if not config.use_frame_masks and frame.mask is not None:
            frame = RgbdFrame(frame.color, frame.depth, frame.intrinsics, None, frame.frame_id)
        terms = []
        icp_mesh = _subsample(canonical if not canonical.is_empty else ref_mesh, config.max_icp_vertices)
        terms.append(DenseIcpTerm(graph, icp_mesh, frame, config.skin_k, config.icp_max_distance,
                                  config.icp_max_angle_deg))
        n_constraints = 0
        if use_learned:
            pair_id = f"{reference.frame_id if reference.frame_id is not None else 0}_" \
                      f"{frame.frame_id if frame.frame_id is not None else t}"
            idx, queries = node_queries(graph, reference, config.node_visibility_tolerance)
            result.queries[pair_id] = queries.tolist()
            try:
                cons = learned_constraints(provider, reference, frame, idx, queries, pair_id)
            except KeyError as exc:
                raise PipelineError(f"correspondence lookup failed: {exc}", t) from exc
            cons = filter_learned(cons, frame.depth, config.visibility_threshold, config.depth_threshold)
            n_constraints = len(cons)
            terms.append(LearnedTerm(cons, K))
        terms.append(ArapTerm(graph))
        energy = assemble(terms, weights)
        try:
            solved = gauss_newton(energy, graph, config.solver)
        except SolverError as exc:
            raise PipelineError(f"solver failed: {exc}", t) from exc
        graph = solved.graph
        integrate(volume, frame, graph, config.w_max)
        canonical = extract_mesh(volume)
        if not canonical.is_empty:
            graph, added = extend_graph(graph, canonical.vertices, config.node_radius, config.edge_k,
                                        config.skin_k)
            if added:
                logger.debug("frame %d: added %d nodes", t, added)
        result.graphs.append(graph.copy())
        result.warped.append(warp_mesh(canonical, graph, config.skin_k))
        result.logs.append(solved.log)
        result.constraint_counts.append(n_constraints)
        logger.info("frame %d: E %.4g -> %.4g, %d learned constraints, %d nodes", t,
                    solved.initial_energy, solved.final_energy, n_constraints, graph.num_nodes)
        if progress is not None:
            progress(t, solved)
    result.canonical = canonical
    result.runtime = time.perf_counter() - t0
    return result


def write_sequence_result(result: SequenceResult, out_dir) -> Path:
    """Per-frame graph JSON and warped PLY, the canonical PLY, trace CSV and issued queries."""
    out = Path(out_dir)
    (out / "graphs").mkdir(parents=True, exist_ok=True)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    write_ply(out / "canonical.ply", result.canonical)
    trace = out / "trace.csv"
    if trace.exists():
        trace.unlink()
    for t, (g, m, log) in enumerate(zip(result.graphs, result.warped, result.logs)):
        g.save(out / "graphs" / f"{t:06d}.json")
        write_ply(out / "meshes" / f"{t:06d}.ply", m)
        write_trace(trace, log, frame=t, append=True)
    (out / "queries.json").write_text(json.dumps(result.queries))
    return out


# -- pair alignment -----------------------------------------------------------


@dataclass
class AlignmentConfig:
    node_radius: float = 0.04
    edge_k: int = 8
    skin_k: int = 4
    stride: int = 2
    mesh_max_edge: float = 0.05
    icp_max_distance: float = 0.1
    icp_max_angle_deg: float = 60.0
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(gn_iterations=20))

    def __post_init__(self):
        if self.node_radius <= 0 or self.stride < 1:
            raise ValueError("node radius must be positive and stride >= 1")


@dataclass
class PairAlignment:
    source_pixels: np.ndarray   # (N, 2) int
    source_points: np.ndarray   # (N, 3)
    matches: np.ndarray         # (N, 3) target-camera positions
    valid: np.ndarray           # (N,) bool
    graph: DeformationGraph | None = None
    log: list[IterationLog] = field(default_factory=list)
    forward: "PairAlignment | None" = None
    backward: "PairAlignment | None" = None
    skin_k: int = 4

    def warp(self, points: np.ndarray) -> np.ndarray:
        if self.graph is None:
            raise ValueError("alignment carries no deformation graph")
        return warp_points(self.graph, skinning(self.graph, points, self.skin_k), points)


def align_pair(source: RgbdFrame, target: RgbdFrame, sparse_matches=(), weights: EnergyWeights | None = None,
               config: AlignmentConfig | None = None) -> PairAlignment:
    """Deform the masked source surface onto the target and read off per-vertex matches."""
    weights = weights or EnergyWeights.alignment()
    config = config or AlignmentConfig()
    if source.mask is None or not source.mask.any() or target.mask is None or not target.mask.any():
        raise ValueError("both frames need non-empty object masks")
    mesh = frame_to_mesh(source, config.mesh_max_edge)
    if mesh.is_empty:
        raise ValueError("source mask covers no valid depth")
    nodes = sample_nodes(mesh.vertices, config.node_radius)
    graph = DeformationGraph.from_positions(nodes, config.node_radius, config.edge_k)
    opt = _subsample(mesh, max(1, len(mesh) // config.stride))
    terms = [
        DenseIcpTerm(graph, opt, target, config.skin_k, config.icp_max_distance, config.icp_max_angle_deg),
        PhotometricTerm(graph, opt, source, target, config.skin_k),
        SilhouetteTerm(graph, opt, distance_map(target.mask), target.intrinsics, config.skin_k),
        ArapTerm(graph),
    ]
    matches = list(sparse_matches)
    if matches:
        terms.append(SparseTerm(graph, matches, config.skin_k))
    elif weights.lambda_sparse > 0:
        logger.warning("no sparse matches supplied; sparse term disabled")
    energy = assemble(terms, weights)
    solved = gauss_newton(energy, graph, config.solver)
    g = solved.graph
    dense = warp_points(g, skinning(g, mesh.vertices, config.skin_k), mesh.vertices)
    valid = np.all(np.isfinite(dense), axis=1)
    return PairAlignment(mesh.source_pixel.copy(), mesh.vertices.copy(), dense, valid, g, solved.log,
                         skin_k=config.skin_k)


def forward_backward_interpolate(fwd: PairAlignment, bwd: PairAlignment, gate: float = CYCLE_GATE,
                                 iterations: int = 10) -> PairAlignment:
    """Blend forward matches with the inverse of the backward warp.

    For a source vertex v with forward match m, the backward warp should bring
    m back to v; vertices whose cycle misses by more than ``gate`` are
    invalidated. Surviving matches are the midpoint of m and W_bwd^-1(v).
    """
    if bwd.graph is None:
        raise ValueError("backward alignment needs its deformation graph")
    v = fwd.source_points
    m = fwd.matches
    valid = fwd.valid.copy()
    out = np.full_like(m, np.nan)
    idx = np.nonzero(valid)[0]
    if len(idx):
        cycle = bwd.warp(m[idx])
        ok = np.linalg.norm(cycle - v[idx], axis=1) <= gate
        inv = invert_warp(bwd.graph, v[idx], bwd.skin_k, iterations, initial=m[idx])
        ok &= np.all(np.isfinite(inv), axis=1)
        out[idx] = 0.5 * (m[idx] + inv)
        valid[idx] = ok
    out[~valid] = np.nan
    return PairAlignment(fwd.source_pixels, v, out, valid, fwd.graph, fwd.log, fwd, bwd, fwd.skin_k)


def write_dense_matches(path, alignment: PairAlignment) -> None:
    n = len(alignment.source_pixels)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", n))
        for (u, v), m, ok in zip(alignment.source_pixels, alignment.matches, alignment.valid):
            x, y, z = (float(c) for c in m) if ok else (0.0, 0.0, 0.0)
            fh.write(_MATCH_RECORD.pack(int(u), int(v), x, y, z, 1 if ok else 0))


def read_dense_matches(path):
    """Return (pixels (N, 2), matches (N, 3) float32 values as float64, valid (N,))."""
    data = Path(path).read_bytes()
    (n,) = struct.unpack_from("<I", data)
    dt = np.dtype([("u", "<u4"), ("v", "<u4"), ("xyz", "<f4", (3,)), ("valid", "u1")])
    rec = np.frombuffer(data, dt, n, 4)
    return (np.stack([rec["u"], rec["v"]], axis=1).astype(np.int64), rec["xyz"].astype(np.float64),
            rec["valid"].astype(bool))


# -- deformation-aware sampling weights ---------------------------------------


def procrustes(src: np.ndarray, dst: np.ndarray):
    """Least-squares rigid (R, t) with R @ src_i + t ~= dst_i."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return R, cd - R @ cs


@dataclass
class RigidFit:
    R: np.ndarray
    t: np.ndarray
    inliers: np.ndarray
    residuals: np.ndarray
    weights: np.ndarray


def _collinear(p: np.ndarray, tol: float = 1e-6) -> bool:
    a, b = p[1] - p[0], p[2] - p[0]
    return np.linalg.norm(np.cross(a, b)) <= tol * np.linalg.norm(a) * np.linalg.norm(b) + 1e-15


def deformation_weights(matches, threshold: float = 0.01, iterations: int = 200, seed: int = 0,
                        floor: float = 1e-3) -> RigidFit:
    """RANSAC rigid fit of the match set and residual-proportional sampling weights.

    Minimal samples are 3 matches; collinear draws are rejected and redrawn.
    The best consensus set is refit with Procrustes on all its inliers.
    """
    matches = list(matches)
    if len(matches) < 3:
        raise ValueError("need at least 3 matches")
    s = np.array([np.asarray(m.s, dtype=np.float64) for m in matches])
    d = np.array([np.asarray(m.t, dtype=np.float64) for m in matches])
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(iterations):
        for _attempt in range(100):
            pick = rng.choice(len(s), 3, replace=False)
            if not (_collinear(s[pick]) or _collinear(d[pick])):
                break
        else:
            continue
        R, t = procrustes(s[pick], d[pick])
        inl = np.linalg.norm(s @ R.T + t - d, axis=1) <= threshold
        if best is None or inl.sum() > best.sum():
            best = inl
    if best is None or best.sum() < 3:
        best = np.ones(len(s), dtype=bool)
    R, t = procrustes(s[best], d[best])
    res = np.linalg.norm(s @ R.T + t - d, axis=1)
    raw = res + floor
    return RigidFit(R, t, best, res, raw / raw.sum())
