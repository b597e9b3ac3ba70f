"""Gauss-Newton with a Jacobi-preconditioned conjugate gradient inner solver."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .energy import EnergySpec, TERM_ORDER
from .graph import DeformationGraph, normalize_rotation

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Non-finite energy or an unusable linear system."""


@dataclass
class SolverConfig:
    gn_iterations: int = 10
    pcg_iterations: int = 20
    pcg_tolerance: float = 1e-4
    damping: float = 1e-6
    step_acceptance: bool = True
    max_halvings: int = 6
    threads: int = 1

    def __post_init__(self):
        if self.gn_iterations < 1 or self.pcg_iterations < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.pcg_tolerance <= 0:
            raise ValueError("pcg tolerance must be positive")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")


@dataclass
class LinearSystem:
    """Normal equations (J^T J + damping I) delta = -J^T F, never materialised."""

    J: sparse.csr_matrix
    F: np.ndarray
    damping: float = 0.0
    threads: int = 1
    _diag: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.J = sparse.csr_matrix(self.J)
        self.F = np.asarray(self.F, dtype=np.float64)
        if self.J.shape[0] != len(self.F):
            raise ValueError("Jacobian rows and residual length differ")

    @property
    def size(self) -> int:
        return self.J.shape[1]

    def diagonal(self) -> np.ndarray:
        if self._diag is None:
            self._diag = np.asarray(self.J.multiply(self.J).sum(axis=0)).ravel() + self.damping
        return self._diag

    def rhs(self) -> np.ndarray:
        return -(self.J.T @ self.F)


def _row_chunks(n_rows: int, parts: int) -> list[tuple[int, int]]:
    bounds = np.linspace(0, n_rows, max(parts, 1) + 1).astype(int)
    return [(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def apply_normal_matrix(system: LinearSystem, x: np.ndarray, threads: int | None = None) -> np.ndarray:
    """Return (J^T J + damping I) x as J^T (J x) + damping x.

    Rows are split into fixed contiguous blocks; each block's contribution
    J_b^T (J_b x) lands in its own buffer and the buffers are summed pairwise
    in a fixed order, so the result does not depend on scheduling.
    """
    x = np.asarray(x, dtype=np.float64)
    threads = system.threads if threads is None else threads
    J = system.J
    if threads <= 1 or J.shape[0] < 2:
        return J.T @ (J @ x) + system.damping * x

    def partial(bounds):
        a, b = bounds
        block = J[a:b]
        return block.T @ (block @ x)

    chunks = _row_chunks(J.shape[0], threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(partial, chunks))
    while len(parts) > 1:
        merged = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            merged.append(parts[-1])
        parts = merged
    return parts[0] + system.damping * x


@dataclass
class PcgResult:
    x: np.ndarray
    iterations: int
    relative_residual: float
    breakdown: bool = False


def pcg(apply_A, diag: np.ndarray, b: np.ndarray, max_iterations: int, tolerance: float) -> PcgResult:
    """Jacobi-preconditioned conjugate gradient from a zero initial guess."""
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return PcgResult(x, 0, 0.0)
    inv_diag = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0)
    r = b.copy()
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    rel = 1.0
    for it in range(1, max_iterations + 1):
        Ap = apply_A(p)
        pAp = p @ Ap
        if not np.isfinite(pAp) or pAp <= 0:
            return PcgResult(x, it, rel, breakdown=True)
        alpha = rz / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rel = np.linalg.norm(r) / bnorm
        if rel <= tolerance:
            return PcgResult(x, it, rel)
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return PcgResult(x, max_iterations, rel)


def pcg_solve(system: LinearSystem, rhs: np.ndarray | None = None, max_iterations: int = 20,
              tolerance: float = 1e-4) -> PcgResult:
    b = system.rhs() if rhs is None else rhs
    return pcg(lambda v: apply_normal_matrix(system, v), system.diagonal(), b, max_iterations, tolerance)


@dataclass
class IterationLog:
    gn_iter: int
    energy: float
    term_energies: dict
    pcg_iters: int
    step_scale: float
    fallback: bool = False


@dataclass
class SolveResult:
    graph: DeformationGraph
    initial_energy: float
    final_energy: float
    log: list[IterationLog]

    @property
    def energies(self) -> list[float]:
        return [self.initial_energy] + [entry.energy for entry in self.log]


def _apply_step(graph: DeformationGraph, x: np.ndarray, delta: np.ndarray, scale: float) -> DeformationGraph:
    x_new = (x + scale * delta).reshape(-1, 6)
    x_new[:, :3] = normalize_rotation(x_new[:, :3])
    return graph.with_params(x_new.ravel())


def gauss_newton(energy: EnergySpec, graph: DeformationGraph, config: SolverConfig | None = None) -> SolveResult:
    """Minimise ``energy`` over the graph parameters starting from ``graph``.

    Data associations are refreshed at the start of every outer iteration.
    With step acceptance on, a step that raises the energy (under the current
    association) is halved up to ``max_halvings`` times and otherwise dropped.
    """
    config = config or SolverConfig()
    if graph.num_params == 0:
        raise SolverError("graph has no parameters")
    log: list[IterationLog] = []
    energy.update(graph)
    ev = energy.evaluate(graph)
    initial = ev.energy
    if not np.isfinite(initial):
        raise SolverError("initial energy is not finite")
    current = ev.energy
    for it in range(config.gn_iterations):
        if it > 0:
            energy.update(graph)
            ev = energy.evaluate(graph)
            current = ev.energy
            if not np.isfinite(current):
                raise SolverError(f"energy became non-finite at iteration {it}")
        system = LinearSystem(ev.jacobian, ev.residuals, config.damping, config.threads)
        b = system.rhs()
        res = pcg_solve(system, b, config.pcg_iterations, config.pcg_tolerance)
        delta = res.x
        fallback = res.breakdown or not np.all(np.isfinite(delta))
        if fallback:
            # steepest descent with exact line minimisation of the quadratic model
            Ab = apply_normal_matrix(system, b)
            denom = b @ Ab
            delta = (b @ b) / denom * b if denom > 0 else np.zeros_like(b)
            logger.warning("PCG breakdown at GN iteration %d, using a gradient step", it)
        x = graph.params
        scale = 1.0
        candidate = _apply_step(graph, x, delta, scale)
        new_energy = energy.energy(candidate)
        if config.step_acceptance:
            halvings = 0
            while not (np.isfinite(new_energy) and new_energy <= current) and halvings < config.max_halvings:
                scale *= 0.5
                halvings += 1
                candidate = _apply_step(graph, x, delta, scale)
                new_energy = energy.energy(candidate)
            if not (np.isfinite(new_energy) and new_energy <= current):
                scale = 0.0
                candidate = graph
                new_energy = current
        if not np.isfinite(new_energy):
            raise SolverError(f"energy became non-finite at iteration {it}")
        graph = candidate
        current = new_energy
        terms = energy.evaluate(graph, jacobian=False).term_energies()
        log.append(IterationLog(it, current, terms, res.iterations, scale, fallback))
    return SolveResult(graph, initial, current, log)


def write_trace(path, log: list[IterationLog], frame: int | None = None, append: bool = False) -> None:
    """CSV trace: gn_iter, E_total, one column per term kind, pcg_iters, step_scale."""
    header = (["frame"] if frame is not None else []) + ["gn_iter", "E_total"] + \
        [f"E_{k}" for k in TERM_ORDER] + ["pcg_iters", "step_scale"]
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if not append or fh.tell() == 0:
            writer.writerow(header)
        for entry in log:
            row = ([frame] if frame is not None else []) + [entry.gn_iter, repr(entry.energy)]
            row += [repr(entry.term_energies.get(k, 0.0)) for k in TERM_ORDER]
            row += [entry.pcg_iters, repr(entry.step_scale)]
            writer.writerow(row)
