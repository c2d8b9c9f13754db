"""Lowest-order elliptic and L2 projectors on faces and cells.

With vertex-value degrees of freedom the projectors reduce to exact boundary
integrals: the projected gradient of a cell function is its boundary-averaged
gradient (divergence theorem over the face integrals), and the constant part
is fixed by matching the mean over the cell boundary.  Face integrals of the
virtual functions equal those of their face projections, which are exact
because edge traces are piecewise linear (trapezoid rule).

The degree is carried explicitly so the interfaces extend to higher orders
(edge/face/cell moment DoFs) without change; only degree 1 is implemented.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import MeshError, PolyMesh
from .polybasis import MonomialBasis, monomial_basis

DEGENERATE_FACE_AREA = 1e-14


@dataclass
class FaceProjector:
    """Projection of face vertex values onto in-plane linear polynomials.

    ``coeff`` maps the face DoF vector to [c0, c1, c2] in the scaled local
    frame: p(x) = c0 + c1*xi1 + c2*xi2 with xi_k = ((x-x_f).t_k)/h_f.
    ``integral_row`` maps the DoF vector to the exact face integral of the
    virtual function.
    """

    face: int
    vertex_ids: np.ndarray
    frame: np.ndarray            # rows t1, t2 (orthonormal, in-plane)
    coeff: np.ndarray            # (3, n_face_vertices)
    integral_row: np.ndarray     # (n_face_vertices,)

    def evaluate(self, mesh: PolyMesh, dofs: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Evaluate the projected polynomial at 3D points on the face plane."""
        c = self.coeff @ dofs
        rel = (np.atleast_2d(points) - mesh.face_centroid[self.face]) / mesh.face_diameter[self.face]
        return c[0] + rel @ self.frame.T @ c[1:]


def _face_frames(normals: np.ndarray) -> np.ndarray:
    """Deterministic orthonormal in-plane frames, shape (F, 2, 3)."""
    axis = np.argmin(np.abs(normals), axis=1)
    t1 = np.zeros_like(normals)
    t1[np.arange(len(normals)), axis] = 1.0
    t1 -= np.einsum("fj,fj->f", t1, normals)[:, None] * normals
    t1 /= np.linalg.norm(t1, axis=1)[:, None]
    t2 = np.cross(normals, t1)
    return np.stack([t1, t2], axis=1)


def _face_rows_batch(mesh: PolyMesh, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """coeff (F,3,m), integral_row (F,m), frames (F,2,3) for equal-length loops."""
    if np.any(mesh.face_area[idx] < DEGENERATE_FACE_AREA):
        fi = idx[int(np.argmax(mesh.face_area[idx] < DEGENERATE_FACE_AREA))]
        raise MeshError(f"degenerate face {fi} (area {mesh.face_area[fi]:.3e})")
    P = mesh.vertices[np.array([mesh.faces[i] for i in idx])]     # (F, m, 3)
    n_hat = mesh.face_normal[idx]
    area = mesh.face_area[idx]
    h = mesh.face_diameter[idx]
    frames = _face_frames(n_hat)

    edge_vec = np.roll(P, -1, axis=1) - P
    edge_len = np.linalg.norm(edge_vec, axis=2)
    edge_out = np.cross(edge_vec / edge_len[:, :, None], n_hat[:, None, :])

    # trapezoid weights along the boundary
    w_bnd = 0.5 * (edge_len + np.roll(edge_len, 1, axis=1))

    # per-vertex accumulation of the edge-flux rows:
    # grad = (1/|f|) sum_e |e| (v_a+v_b)/2 n_e
    c = 0.5 * edge_len[:, :, None] * edge_out
    vert_flux = c + np.roll(c, 1, axis=1)
    grad_rows = vert_flux.transpose(0, 2, 1) / area[:, None, None]   # (F, 3, m)

    xi = np.einsum("fmj,fkj->fmk", P - mesh.face_centroid[idx][:, None, :], frames)
    xi /= h[:, None, None]                                           # (F, m, 2)
    c_lin = h[:, None, None] * np.einsum("fkj,fjm->fkm", frames, grad_rows)  # (F, 2, m)
    s = np.einsum("fm,fmk->fk", w_bnd, xi)                           # boundary int of xi
    perimeter = edge_len.sum(axis=1)
    c0 = (w_bnd - np.einsum("fk,fkm->fm", s, c_lin)) / perimeter[:, None]
    coeff = np.concatenate([c0[:, None, :], c_lin], axis=1)          # (F, 3, m)
    return coeff, area[:, None] * c0, frames


class FaceProjectorTable:
    """Precomputed face-projector rows for every face of a mesh."""

    def __init__(self, mesh: PolyMesh):
        nf = mesh.n_faces
        self.coeff: list[np.ndarray] = [None] * nf
        self.integral_row: list[np.ndarray] = [None] * nf
        self.frame: list[np.ndarray] = [None] * nf
        lengths = np.array([len(l) for l in mesh.faces])
        for m in np.unique(lengths):
            idx = np.nonzero(lengths == m)[0]
            coeff, rows, frames = _face_rows_batch(mesh, idx)
            for k, fi in enumerate(idx):
                self.coeff[fi] = coeff[k]
                self.integral_row[fi] = rows[k]
                self.frame[fi] = frames[k]

    def projector(self, mesh: PolyMesh, fi: int) -> FaceProjector:
        return FaceProjector(
            face=fi,
            vertex_ids=mesh.faces[fi].copy(),
            frame=self.frame[fi],
            coeff=self.coeff[fi],
            integral_row=self.integral_row[fi],
        )


def face_pi_nabla(mesh: PolyMesh, fi: int, frame: np.ndarray | None = None) -> FaceProjector:
    """Face projector from exact edge (trapezoid) boundary integrals.

    An explicit ``frame`` overrides the deterministic default (used to check
    frame independence of frame-free quantities).
    """
    idx = np.array([fi])
    if frame is None:
        coeff, rows, frames = _face_rows_batch(mesh, idx)
        return FaceProjector(
            face=fi, vertex_ids=mesh.faces[fi].copy(), frame=frames[0],
            coeff=coeff[0], integral_row=rows[0],
        )
    # recompute in the supplied frame
    if mesh.face_area[fi] < DEGENERATE_FACE_AREA:
        raise MeshError(f"degenerate face {fi} (area {mesh.face_area[fi]:.3e})")
    P = mesh.vertices[mesh.faces[fi]]
    n_hat = mesh.face_normal[fi]
    area = mesh.face_area[fi]
    h = mesh.face_diameter[fi]
    edge_vec = np.roll(P, -1, axis=0) - P
    edge_len = np.linalg.norm(edge_vec, axis=1)
    edge_out = np.cross(edge_vec / edge_len[:, None], n_hat)
    w_bnd = 0.5 * (edge_len + np.roll(edge_len, 1))
    c = 0.5 * edge_len[:, None] * edge_out
    grad_rows = (c + np.roll(c, 1, axis=0)).T / area
    xi = (P - mesh.face_centroid[fi]) / h @ frame.T
    c_lin = h * (frame @ grad_rows)
    s = w_bnd @ xi
    c0 = (w_bnd - s @ c_lin) / edge_len.sum()
    coeff = np.vstack([c0, c_lin])
    return FaceProjector(
        face=fi, vertex_ids=mesh.faces[fi].copy(), frame=frame,
        coeff=coeff, integral_row=area * c0,
    )


def face_integral(mesh: PolyMesh, fi: int, dofs: np.ndarray) -> float:
    """Exact integral of a virtual face function from its vertex values."""
    return float(face_pi_nabla(mesh, fi).integral_row @ np.asarray(dofs, dtype=float))


@dataclass
class CellProjectors:
    """Per-cell projector matrices acting on the local vertex-value DoF vector.

    ``pi_nabla`` returns the 4 coefficients on the scaled monomial basis
    {1, xi1, xi2, xi3}; ``pi0_grad`` the constant projected gradient;
    ``stab_q`` is I - D*pi_nabla, the DoF-space remainder used by the
    stabilization.  The L2 projector of the enhanced degree-1 space
    coincides with pi_nabla.
    """

    cell: int
    degree: int
    vertex_ids: np.ndarray
    basis: MonomialBasis
    pi_nabla: np.ndarray         # (4, n)
    pi0_grad: np.ndarray         # (3, n)
    dof_matrix: np.ndarray       # (n, 4): monomial values at vertices
    stab_q: np.ndarray           # (n, n)
    face_rows: list[np.ndarray]  # per face: row over the *local* DoFs with int_f v

    @property
    def n_dofs(self) -> int:
        return len(self.vertex_ids)

    def value_coeffs(self, dofs: np.ndarray) -> np.ndarray:
        return self.pi_nabla @ dofs

    def evaluate(self, dofs: np.ndarray, points: np.ndarray) -> np.ndarray:
        return self.basis.eval_all(points) @ (self.pi_nabla @ dofs)

    def gradient(self, dofs: np.ndarray) -> np.ndarray:
        return self.pi0_grad @ dofs


def cell_projectors(
    mesh: PolyMesh, ci: int, face_table: FaceProjectorTable | None = None
) -> CellProjectors:
    """Assemble the projector matrices of one cell from its face integrals."""
    face_table = face_table or FaceProjectorTable(mesh)
    vids = mesh.cell_vertex_ids(ci)
    n = len(vids)
    vol = mesh.cell_volume[ci]
    h = mesh.cell_diameter[ci]
    xe = mesh.cell_centroid[ci]

    grad_rows = np.zeros((3, n))       # |E| * averaged gradient
    bnd_rows = np.zeros(n)             # integral of v over the cell boundary
    poly_bnd_vec = np.zeros(3)         # boundary integral of (x - x_E)
    total_area = 0.0
    face_rows = []
    for fi, sgn in mesh.cell_faces(ci):
        local = np.searchsorted(vids, mesh.faces[fi])
        row = np.zeros(n)
        row[local] = face_table.integral_row[fi]
        face_rows.append(row)
        grad_rows += sgn * np.outer(mesh.face_normal[fi], row)
        bnd_rows += row
        area = mesh.face_area[fi]
        total_area += area
        poly_bnd_vec += area * (mesh.face_centroid[fi] - xe)

    pi0_grad = grad_rows / vol
    # coefficients on {1, xi1, xi2, xi3}: gradient slots carry h_E
    c_lin = h * pi0_grad
    c0 = (bnd_rows - (poly_bnd_vec / h) @ c_lin) / total_area
    pi_nabla = np.vstack([c0, c_lin])

    basis = monomial_basis(xe, h, degree=1, dim=3)
    dof_matrix = np.column_stack([np.ones(n), (mesh.vertices[vids] - xe) / h])
    stab_q = np.eye(n) - dof_matrix @ pi_nabla
    return CellProjectors(
        cell=ci,
        degree=1,
        vertex_ids=vids,
        basis=basis,
        pi_nabla=pi_nabla,
        pi0_grad=pi0_grad,
        dof_matrix=dof_matrix,
        stab_q=stab_q,
        face_rows=face_rows,
    )


def build_projectors(mesh: PolyMesh) -> list[CellProjectors]:
    """Projectors for every cell, sharing one batched face pass."""
    table = FaceProjectorTable(mesh)
    return [cell_projectors(mesh, ci, table) for ci in range(mesh.n_cells)]
