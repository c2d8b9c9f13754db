"""Error norms, convergence orders, and the study harness.

Errors compare the exact field against the cellwise projected polynomial of
the discrete solution: the L2 norm of (u_ex - projection) and the H1
seminorm of its gradient defect, both by cell quadrature.  The mesh size is
the averaged (|Omega|/N_E)^(1/3), and orders are reported pairwise per
refinement plus as a least-squares slope over the last levels (the robust
number quoted by the acceptance checks).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .forms import LoadSpec, PhysicsConfig
from .mesh import KUHN_PERMUTATIONS, PolyMesh
from .polybasis import DEFAULT_DEGREE, cell_quadrature
from .projectors import CellProjectors, build_projectors
from .solver import NewtonConfig, SolveReport, Workspace, newton_solve


def mesh_size(mesh: PolyMesh) -> float:
    """Averaged size (|Omega| / N_E)^(1/3)."""
    return float((mesh.total_volume() / mesh.n_cells) ** (1.0 / 3.0))


def error_l2(
    mesh: PolyMesh,
    u_h: np.ndarray,
    u_exact: Callable[[np.ndarray], np.ndarray],
    projectors: list[CellProjectors] | None = None,
    degree: int = DEFAULT_DEGREE,
    workspace: Workspace | None = None,
) -> float:
    ws = workspace or Workspace(mesh, projectors, degree)
    diff = u_exact(ws.points) - ws.projected_values(u_h)
    return float(np.sqrt(ws.weights @ diff**2))


def error_h1(
    mesh: PolyMesh,
    u_h: np.ndarray,
    grad_u_exact: Callable[[np.ndarray], np.ndarray],
    projectors: list[CellProjectors] | None = None,
    degree: int = DEFAULT_DEGREE,
    workspace: Workspace | None = None,
) -> float:
    ws = workspace or Workspace(mesh, projectors, degree)
    grads = np.zeros((mesh.n_cells, 3))
    for grp in ws.groups:
        grads[grp.cells] = np.einsum("gkn,gn->gk", grp.g, u_h[grp.ids])
    gdiff = grad_u_exact(ws.points) - grads[ws.cop]
    return float(np.sqrt(ws.weights @ (gdiff**2).sum(axis=1)))


def convergence_order(errors: Sequence[float], sizes: Sequence[float]) -> float:
    """log(e2/e1) / log(h2/h1) for one refinement step."""
    e1, e2 = errors
    h1, h2 = sizes
    if min(e1, e2, h1, h2) <= 0:
        raise ValueError("errors and sizes must be positive")
    if h2 >= h1:
        raise ValueError("sizes must decrease")
    return float(np.log(e2 / e1) / np.log(h2 / h1))


def fitted_order(sizes: Sequence[float], errors: Sequence[float], last: int = 3) -> float:
    """Least-squares slope of log(e) vs log(h) over the last ``last`` levels."""
    h = np.asarray(sizes, dtype=float)[-last:]
    e = np.asarray(errors, dtype=float)[-last:]
    if len(h) < 2:
        raise ValueError("need at least two levels")
    return float(np.polyfit(np.log(h), np.log(e), 1)[0])


@dataclass
class LevelResult:
    level: int
    n_cells: int
    dof: int
    h: float
    e_l2: float
    e_h1: float
    order_l2: float | None
    order_h1: float | None
    newton_iterations: int
    wall_time: float


@dataclass
class ConvergenceReport:
    rows: list[LevelResult] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    solve_reports: list[SolveReport] = field(default_factory=list)
    solutions: list = field(default_factory=list)   # (mesh, projectors, u) when kept
    complete: bool = True

    def sizes(self) -> list[float]:
        return [r.h for r in self.rows]

    def errors_l2(self) -> list[float]:
        return [r.e_l2 for r in self.rows]

    def errors_h1(self) -> list[float]:
        return [r.e_h1 for r in self.rows]

    def fitted_orders(self, last: int = 3) -> tuple[float, float]:
        return (
            fitted_order(self.sizes(), self.errors_l2(), last),
            fitted_order(self.sizes(), self.errors_h1(), last),
        )

    def to_csv(self, path) -> None:
        """Table-layout CSV (orders blank on the first row); no timing columns."""
        lines = []
        if self.metadata:
            import json

            lines.append("# config " + json.dumps(self.metadata, sort_keys=True))
        lines.append("level,cells,dof,h,e_l2,l2_order,e_h1,h1_order,newton_iterations")
        for r in self.rows:
            o2 = f"{r.order_l2:.17g}" if r.order_l2 is not None else "-"
            o1 = f"{r.order_h1:.17g}" if r.order_h1 is not None else "-"
            lines.append(
                f"{r.level},{r.n_cells},{r.dof},{r.h:.17g},{r.e_l2:.17g},{o2},"
                f"{r.e_h1:.17g},{o1},{r.newton_iterations}"
            )
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    def to_plotdat(self, path) -> None:
        """log10 data columns plus slope-2/slope-1 reference lines anchored coarsest."""
        h = np.array(self.sizes())
        e2 = np.array(self.errors_l2())
        e1 = np.array(self.errors_h1())
        ref2 = e2[0] * (h / h[0]) ** 2
        ref1 = e1[0] * (h / h[0])
        lines = ["# log10_h log10_e_l2 log10_e_h1 log10_ref2 log10_ref1"]
        for row in np.column_stack([h, e2, e1, ref2, ref1]):
            lines.append(" ".join(f"{np.log10(v):.17g}" for v in row))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def run_convergence_study(
    mesh_factories: Sequence[Callable[[], PolyMesh]],
    physics: PhysicsConfig,
    load: LoadSpec,
    newton: NewtonConfig | None = None,
    metadata: dict | None = None,
    keep_solutions: bool = False,
) -> ConvergenceReport:
    """Solve the same problem on a refinement sequence and tabulate errors.

    Requires a manufactured load (the exact solution defines the errors).  A
    failing level aborts the study; the partial report is attached to the
    raised error and flagged incomplete.
    """
    if load.mode != "manufactured":
        raise ValueError("convergence studies need a manufactured load")
    report = ConvergenceReport(metadata=metadata or {})
    prev: LevelResult | None = None
    for level, factory in enumerate(mesh_factories, start=1):
        t0 = time.perf_counter()
        try:
            mesh = factory() if callable(factory) else factory
            ws = Workspace(mesh, degree=(newton or NewtonConfig()).quad_degree)
            u, sr = newton_solve(mesh, physics, load, newton, workspace=ws)
        except Exception as exc:
            # abort with the partial report attached and flagged incomplete
            report.complete = False
            exc.study_report = report
            exc.study_level = level
            raise
        e2, e1 = ws.error_norms(u, load.u_exact, load.grad_u_exact)
        h = mesh_size(mesh)
        row = LevelResult(
            level=level,
            n_cells=mesh.n_cells,
            dof=mesh.n_vertices,
            h=h,
            e_l2=e2,
            e_h1=e1,
            order_l2=convergence_order((prev.e_l2, e2), (prev.h, h)) if prev else None,
            order_h1=convergence_order((prev.e_h1, e1), (prev.h, h)) if prev else None,
            newton_iterations=sr.newton_iterations,
            wall_time=time.perf_counter() - t0,
        )
        report.rows.append(row)
        report.solve_reports.append(sr)
        if keep_solutions:
            report.solutions.append((mesh, ws.projectors, u))
        prev = row
    return report


# ---------------------------------------------------------------------------
# reference-solution comparison on nested structured meshes


def _locate_structured(mesh: PolyMesh, points: np.ndarray) -> np.ndarray:
    """Cell indices of points in a generator-ordered cubic or tet mesh."""
    n = mesh.n
    scaled = points * n
    idx = np.clip(np.floor(scaled).astype(int), 0, n - 1)
    cube_id = idx[:, 0] + n * (idx[:, 1] + n * idx[:, 2])
    if mesh.family == "cubic":
        return cube_id
    frac = scaled - idx
    # Kuhn cell: permutation sorting the fractional coordinates descending
    order = np.argsort(-frac, axis=1, kind="stable")
    perm_rank = np.array([KUHN_PERMUTATIONS.index(tuple(o)) for o in order])
    return cube_id * 6 + perm_rank


def compare_to_reference(
    coarse_mesh: PolyMesh,
    u_h: np.ndarray,
    fine_mesh: PolyMesh,
    u_ref: np.ndarray,
    coarse_projectors: list[CellProjectors] | None = None,
    fine_projectors: list[CellProjectors] | None = None,
    degree: int = DEFAULT_DEGREE,
) -> tuple[float, float]:
    """Errors of u_h against the projected reference field on a nested fine mesh.

    The fine projection (cellwise linear) stands in for the exact solution
    inside the error integrals; fine cells are located by structured
    indexing, so both meshes must come from the same structured generator
    with the fine resolution a multiple of the coarse one.
    """
    if coarse_mesh.family not in ("cubic", "tet") or fine_mesh.family != coarse_mesh.family:
        raise ValueError("reference comparison needs nested structured meshes of one family")
    if fine_mesh.n is None or coarse_mesh.n is None or fine_mesh.n % coarse_mesh.n != 0:
        raise ValueError(
            f"meshes are not nested (coarse n={coarse_mesh.n}, fine n={fine_mesh.n})"
        )
    coarse_projectors = coarse_projectors or build_projectors(coarse_mesh)
    fine_projectors = fine_projectors or build_projectors(fine_mesh)

    coeffs = np.array(
        [p.value_coeffs(u_ref[p.vertex_ids]) for p in fine_projectors]
    )
    grads = np.array([p.gradient(u_ref[p.vertex_ids]) for p in fine_projectors])
    anchors = fine_mesh.cell_centroid
    scales = fine_mesh.cell_diameter

    total_l2 = 0.0
    total_h1 = 0.0
    for ci in range(coarse_mesh.n_cells):
        proj = coarse_projectors[ci]
        quad = cell_quadrature(coarse_mesh, ci, degree)
        fid = _locate_structured(fine_mesh, quad.points)
        xi = (quad.points - anchors[fid]) / scales[fid, None]
        ref_vals = coeffs[fid, 0] + np.einsum("ij,ij->i", xi, coeffs[fid, 1:])
        vals = proj.evaluate(u_h[proj.vertex_ids], quad.points)
        total_l2 += float(quad.weights @ (ref_vals - vals) ** 2)
        gdiff = grads[fid] - proj.gradient(u_h[proj.vertex_ids])
        total_h1 += float(quad.weights @ (gdiff**2).sum(axis=1))
    return float(np.sqrt(total_l2)), float(np.sqrt(total_h1))
