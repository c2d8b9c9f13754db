"""Polyhedral meshes of the unit cube: data model, generators, quality checks, I/O.

A mesh is a flat polyhedral complex.  Faces are stored once as oriented
vertex loops (counter-clockwise with respect to the stored normal); cells
reference faces through signed 1-based indices, where a negative sign means
the stored orientation points into the cell and must be flipped to get the
outward normal.  Interior faces are therefore referenced exactly twice with
opposite signs, boundary faces exactly once.

All shipped generators tile [0,1]^3 exactly: structured cubes, a Kuhn
(6-tetrahedra) subdivision of the cubes, and clipped Voronoi diagrams of
random seeds.  Geometry (centroids, diameters, measures) is computed from
exact polygonal face integrals via the divergence theorem.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

PLANARITY_TOL = 1e-10
CLOSURE_TOL = 1e-12
VERTEX_MERGE_TOL = 1e-9
MIN_CELL_VOLUME = 1e-12


class MeshError(Exception):
    """Invalid mesh topology or geometry."""

    def __init__(self, message: str, cell: int | None = None):
        super().__init__(message)
        self.cell = cell


class VpmParseError(MeshError):
    """Malformed VPM mesh file; carries the offending 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class LevelSet:
    """Signed implicit surface; negative inside the molecular region.

    ``convex`` declares that the scalar function is convex, which lets
    callers bound the sign of the function over a cell by its vertex values.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    convex: bool = False

    def __call__(self, points) -> np.ndarray | float:
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            return float(self.fn(pts[None, :])[0])
        return np.asarray(self.fn(pts), dtype=float)


def box_levelset(threshold: float = 0.5) -> LevelSet:
    """Level set max(x1,x2,x3) - threshold of the box [0,threshold]^3.

    Strictly negative exactly on the open box, zero on its boundary.
    """

    def fn(pts: np.ndarray) -> np.ndarray:
        return np.max(pts, axis=1) - threshold

    return LevelSet(fn=fn, convex=True)


@dataclass
class PolyMesh:
    """Polyhedral mesh with precomputed exact geometry.

    ``faces[i]`` is an int array of vertex indices; ``cells[k]`` is an int
    array of signed 1-based face references.  Geometric arrays are filled by
    :func:`compute_geometry` and the mesh is treated as immutable afterwards.
    """

    vertices: np.ndarray                 # (nv, 3)
    faces: list[np.ndarray]              # vertex loops
    cells: list[np.ndarray]              # signed 1-based face refs
    family: str | None = None            # generator tag: cubic | tet | voronoi
    n: int | None = None                 # cells-per-axis for structured families

    face_normal: np.ndarray | None = None
    face_centroid: np.ndarray | None = None
    face_area: np.ndarray | None = None
    face_diameter: np.ndarray | None = None
    cell_centroid: np.ndarray | None = None
    cell_volume: np.ndarray | None = None
    cell_diameter: np.ndarray | None = None
    boundary_face: np.ndarray | None = None
    boundary_vertex: np.ndarray | None = None

    _cell_vertex_ids: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def cell_faces(self, ci: int) -> list[tuple[int, int]]:
        """Face indices of cell ``ci`` with outward-orientation signs (+1/-1)."""
        refs = self.cells[ci]
        return [(abs(int(r)) - 1, 1 if r > 0 else -1) for r in refs]

    def cell_vertex_ids(self, ci: int) -> np.ndarray:
        """Sorted unique vertex indices of cell ``ci`` (the local DoF order)."""
        return self._cell_vertex_ids[ci]

    def cell_face_loops(self, ci: int) -> list[np.ndarray]:
        """Vertex loops of cell ``ci`` oriented outward (signs applied)."""
        loops = []
        for fi, sgn in self.cell_faces(ci):
            loop = self.faces[fi]
            loops.append(loop.copy() if sgn > 0 else loop[::-1].copy())
        return loops

    def total_volume(self) -> float:
        return float(self.cell_volume.sum())


def _newell_normal(points: np.ndarray) -> np.ndarray:
    """Area-weighted normal of a vertex loop (exact for planar polygons)."""
    r = points - points.mean(axis=0)
    return 0.5 * np.cross(r, np.roll(r, -1, axis=0)).sum(axis=0)


def _rotate_to_min(seq: tuple) -> tuple:
    i = seq.index(min(seq))
    return seq[i:] + seq[:i]


def _face_key(loop: np.ndarray) -> tuple[tuple, int]:
    """Canonical cycle key of a loop and its direction (+1 forward, -1 reversed)."""
    fwd = _rotate_to_min(tuple(int(v) for v in loop))
    bwd = _rotate_to_min(tuple(int(v) for v in loop[::-1]))
    return (fwd, 1) if fwd <= bwd else (bwd, -1)


def build_polymesh(
    vertices: np.ndarray,
    cell_loops: Sequence[Sequence[np.ndarray]],
    family: str | None = None,
    n: int | None = None,
) -> PolyMesh:
    """Assemble a mesh from per-cell outward-oriented vertex loops.

    Shared faces are deduplicated; the second cell referencing a face must
    supply it with the opposite cycle direction.
    """
    table: dict[tuple, tuple[int, int]] = {}
    faces: list[np.ndarray] = []
    uses = []
    cells = []
    for ck, loops in enumerate(cell_loops):
        refs = np.zeros(len(loops), dtype=np.int64)
        for li, loop in enumerate(loops):
            loop = np.asarray(loop, dtype=np.int64)
            if len(loop) < 3 or len(np.unique(loop)) != len(loop):
                raise MeshError(f"cell {ck}: invalid face loop {loop.tolist()}", cell=ck)
            key, direction = _face_key(loop)
            if key not in table:
                table[key] = (len(faces), direction)
                faces.append(loop)
                uses.append(1)
                refs[li] = len(faces)  # 1-based, positive
            else:
                fid, stored_dir = table[key]
                uses[fid] += 1
                if uses[fid] > 2:
                    raise MeshError(f"face {fid} referenced by more than two cells", cell=ck)
                if direction == stored_dir:
                    raise MeshError(
                        f"cell {ck}: face {fid} repeated with the same orientation", cell=ck
                    )
                refs[li] = -(fid + 1)
        cells.append(refs)

    mesh = PolyMesh(
        vertices=np.asarray(vertices, dtype=float),
        faces=faces,
        cells=cells,
        family=family,
        n=n,
    )
    _index_cells(mesh)
    validate_topology(mesh)
    compute_geometry(mesh)
    return mesh


def _index_cells(mesh: PolyMesh) -> None:
    mesh._cell_vertex_ids = []
    for ci in range(mesh.n_cells):
        ids = np.unique(np.concatenate([mesh.faces[fi] for fi, _ in mesh.cell_faces(ci)]))
        mesh._cell_vertex_ids.append(ids)

    nf = mesh.n_faces
    use = np.zeros(nf, dtype=int)
    for refs in mesh.cells:
        for r in refs:
            use[abs(int(r)) - 1] += 1
    mesh.boundary_face = use == 1
    bv = np.zeros(mesh.n_vertices, dtype=bool)
    for fi in np.nonzero(mesh.boundary_face)[0]:
        bv[mesh.faces[fi]] = True
    mesh.boundary_vertex = bv


def _concat_index(lens: np.ndarray) -> np.ndarray:
    """[0..l0-1, 0..l1-1, ...] for the given segment lengths."""
    ends = np.cumsum(lens)
    return np.arange(ends[-1]) - np.repeat(ends - lens, lens)


def _flat_corners(mesh: PolyMesh):
    """Flat (cell, face, sign, corner vertex, next vertex) arrays over all face refs."""
    counts = np.array([len(refs) for refs in mesh.cells])
    flat_refs = np.concatenate(mesh.cells)
    ref_cell = np.repeat(np.arange(mesh.n_cells), counts)
    ref_face = np.abs(flat_refs) - 1
    ref_sign = np.sign(flat_refs)

    lengths = np.array([len(l) for l in mesh.faces])
    faces_flat = np.concatenate(mesh.faces)
    face_start = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    c_lens = lengths[ref_face]
    c_ref = np.repeat(np.arange(len(flat_refs)), c_lens)
    pos = _concat_index(c_lens)
    start = face_start[ref_face][c_ref]
    va = faces_flat[start + pos]
    vb = faces_flat[start + (pos + 1) % c_lens[c_ref]]
    return ref_cell, ref_face, ref_sign, c_ref, va, vb


def validate_topology(mesh: PolyMesh) -> None:
    """Check that every cell is a closed, oriented surface and face-use counts."""
    nf = mesh.n_faces
    for refs in mesh.cells:
        for r in refs:
            fi = abs(int(r)) - 1
            if fi < 0 or fi >= nf:
                raise MeshError(f"cell references face index {r} out of range")
    _check_watertight(mesh)

    use = np.zeros(nf, dtype=int)
    sign_sum = np.zeros(nf, dtype=int)
    for refs in mesh.cells:
        for r in refs:
            use[abs(int(r)) - 1] += 1
            sign_sum[abs(int(r)) - 1] += 1 if r > 0 else -1
    bad = np.nonzero((use < 1) | (use > 2))[0]
    if len(bad):
        raise MeshError(f"face {bad[0]} referenced {use[bad[0]]} times (expected 1 or 2)")
    twice = np.nonzero(use == 2)[0]
    if np.any(sign_sum[twice] != 0):
        fi = twice[np.nonzero(sign_sum[twice] != 0)[0][0]]
        raise MeshError(f"interior face {fi} used twice with the same orientation")


def _check_watertight(mesh: PolyMesh) -> None:
    # per cell, every directed edge of the outward-oriented face loops must
    # appear exactly once in each direction
    ref_cell, _, ref_sign, c_ref, va, vb = _flat_corners(mesh)
    flip = ref_sign[c_ref] < 0
    ea = np.where(flip, vb, va)
    eb = np.where(flip, va, vb)
    cell = ref_cell[c_ref]
    lo = np.minimum(ea, eb)
    hi = np.maximum(ea, eb)
    order = np.lexsort((ea, lo, hi, cell))
    cell_s, lo_s, hi_s, ea_s = cell[order], lo[order], hi[order], ea[order]
    n = len(cell_s)
    paired = np.zeros(n, dtype=bool)
    same = (
        (cell_s[:-1] == cell_s[1:])
        & (lo_s[:-1] == lo_s[1:])
        & (hi_s[:-1] == hi_s[1:])
        & (ea_s[:-1] != ea_s[1:])
    )
    even = np.arange(0, n - 1, 2)
    good = same[even]
    if n % 2 == 1 or not good.all():
        bad_at = int(even[np.nonzero(~good)[0][0]]) if n % 2 == 0 else n - 1
        ci = int(cell_s[bad_at])
        raise MeshError(
            f"non-watertight cell {ci}: edge ({int(lo_s[bad_at])},{int(hi_s[bad_at])}) "
            "is not paired with its reverse",
            cell=ci,
        )


def compute_geometry(mesh: PolyMesh) -> PolyMesh:
    """Fill exact face/cell centroids, diameters, and measures.

    Cell volumes use the divergence theorem with exact polygonal face
    integrals; centroids come from the matching signed-tetrahedron first
    moments.  A non-positive cell volume is reported as an orientation error.
    Faces and cells are processed in groups of equal vertex count so the
    whole pass is array arithmetic.
    """
    V = mesh.vertices
    nf, nc = mesh.n_faces, mesh.n_cells
    f_normal = np.zeros((nf, 3))
    f_centroid = np.zeros((nf, 3))
    f_area = np.zeros(nf)
    f_diam = np.zeros(nf)

    lengths = np.array([len(l) for l in mesh.faces])
    for m in np.unique(lengths):
        idx = np.nonzero(lengths == m)[0]
        P = V[np.array([mesh.faces[i] for i in idx])]          # (F, m, 3)
        r = P - P.mean(axis=1, keepdims=True)
        cr = np.cross(r, np.roll(r, -1, axis=1))
        nrm = 0.5 * cr.sum(axis=1)
        area = np.linalg.norm(nrm, axis=1)
        if np.any(area <= 1e-14):
            raise MeshError(f"degenerate face {idx[int(np.argmax(area <= 1e-14))]}")
        n_hat = nrm / area[:, None]
        tri_a = 0.5 * np.einsum("fmj,fj->fm", cr, n_hat)       # signed fan areas
        tri_c = (P.mean(axis=1, keepdims=True) + P + np.roll(P, -1, axis=1)) / 3.0
        centroid = np.einsum("fm,fmj->fj", tri_a, tri_c) / tri_a.sum(axis=1)[:, None]
        dev = np.abs(np.einsum("fmj,fj->fm", P - centroid[:, None, :], n_hat)).max(axis=1)
        if np.any(dev > PLANARITY_TOL):
            fi = idx[int(np.argmax(dev > PLANARITY_TOL))]
            raise MeshError(f"face {fi} not planar (max deviation {dev.max():.3e})")
        d2 = ((P[:, :, None, :] - P[:, None, :, :]) ** 2).sum(axis=3)
        f_normal[idx] = n_hat
        f_centroid[idx] = centroid
        f_area[idx] = area
        f_diam[idx] = np.sqrt(d2.reshape(len(idx), -1).max(axis=1))

    # cell vertex means
    vcounts = np.array([len(ids) for ids in mesh._cell_vertex_ids])
    vptr = np.concatenate([[0], np.cumsum(vcounts)])
    vflat = np.concatenate(mesh._cell_vertex_ids)
    p0 = np.add.reduceat(V[vflat], vptr[:-1], axis=0) / vcounts[:, None]

    ref_cell, ref_face, ref_sign, c_ref, va, vb = _flat_corners(mesh)
    n_out = f_normal[ref_face] * ref_sign[:, None]
    rel_f = f_centroid[ref_face] - p0[ref_cell]
    contrib = f_area[ref_face] * np.einsum("rj,rj->r", rel_f, n_out)
    c_volume = np.bincount(ref_cell, weights=contrib, minlength=nc) / 3.0
    if np.any(c_volume <= 0.0):
        ci = int(np.argmax(c_volume <= 0.0))
        raise MeshError(
            f"cell {ci}: non-positive volume {c_volume[ci]:.3e} (orientation error)", cell=ci
        )
    closure = np.column_stack(
        [np.bincount(ref_cell, weights=f_area[ref_face] * n_out[:, k], minlength=nc)
         for k in range(3)]
    )
    closure2 = np.linalg.norm(closure, axis=1)
    if np.any(closure2 > CLOSURE_TOL * max(1.0, float(f_area.max()))):
        ci = int(np.argmax(closure2 > CLOSURE_TOL * max(1.0, float(f_area.max()))))
        raise MeshError(
            f"cell {ci}: surface not closed (|sum area*n| = {closure2[ci]:.3e})", cell=ci
        )

    # signed tetrahedra (p0, x_f, v_a, v_b) over all corners
    corner_cell = ref_cell[c_ref]
    A = V[va] - p0[corner_cell]
    B = V[vb] - p0[corner_cell]
    apex = f_centroid[ref_face[c_ref]] - p0[corner_cell]
    tv = ref_sign[c_ref] * np.einsum("rj,rj->r", np.cross(A, B), apex) / 6.0
    tc = (p0[corner_cell] + f_centroid[ref_face[c_ref]] + V[va] + V[vb]) / 4.0
    tet_total = np.bincount(corner_cell, weights=tv, minlength=nc)
    moment = np.column_stack(
        [np.bincount(corner_cell, weights=tv * tc[:, k], minlength=nc) for k in range(3)]
    )
    c_centroid = moment / tet_total[:, None]

    c_diam = np.zeros(nc)
    for m in np.unique(vcounts):
        idx = np.nonzero(vcounts == m)[0]
        pts = V[np.array([mesh._cell_vertex_ids[i] for i in idx])]  # (C, m, 3)
        d2 = ((pts[:, :, None, :] - pts[:, None, :, :]) ** 2).sum(axis=3)
        c_diam[idx] = np.sqrt(d2.reshape(len(idx), -1).max(axis=1))

    mesh.face_normal = f_normal
    mesh.face_centroid = f_centroid
    mesh.face_area = f_area
    mesh.face_diameter = f_diam
    mesh.cell_centroid = c_centroid
    mesh.cell_volume = c_volume
    mesh.cell_diameter = c_diam
    return mesh


# ---------------------------------------------------------------------------
# generators


def _vertex_grid(n: int) -> np.ndarray:
    s = np.linspace(0.0, 1.0, n + 1)
    Z, Y, X = np.meshgrid(s, s, s, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])


def _grid_id(i, j, k, n):
    return i + (n + 1) * (j + (n + 1) * k)


def generate_cube_mesh(n: int) -> PolyMesh:
    """Structured mesh of n^3 axis-aligned cubes on [0,1]^3."""
    if n < 1:
        raise ValueError("cells-per-axis must be >= 1")
    verts = _vertex_grid(n)
    cell_loops = []
    for k in range(n):
        for j in range(n):
            for i in range(n):
                v = lambda di, dj, dk: _grid_id(i + di, j + dj, k + dk, n)
                loops = [
                    [v(1, 0, 0), v(1, 1, 0), v(1, 1, 1), v(1, 0, 1)],   # +x
                    [v(0, 0, 0), v(0, 0, 1), v(0, 1, 1), v(0, 1, 0)],   # -x
                    [v(0, 1, 0), v(0, 1, 1), v(1, 1, 1), v(1, 1, 0)],   # +y
                    [v(0, 0, 0), v(1, 0, 0), v(1, 0, 1), v(0, 0, 1)],   # -y
                    [v(0, 0, 1), v(1, 0, 1), v(1, 1, 1), v(0, 1, 1)],   # +z
                    [v(0, 0, 0), v(0, 1, 0), v(1, 1, 0), v(1, 0, 0)],   # -z
                ]
                cell_loops.append([np.array(l) for l in loops])
    return build_polymesh(verts, cell_loops, family="cubic", n=n)


# Kuhn subdivision: walk the cube axes in each of the 6 permutation orders.
# Lexicographic permutation order fixes the cell numbering used by the
# structured point locator in the analysis module.
KUHN_PERMUTATIONS = tuple(itertools.permutations(range(3)))


def _oriented_tet_faces(ids: Sequence[int], coords: np.ndarray) -> list[np.ndarray]:
    p = coords
    if np.linalg.det(np.array([p[1] - p[0], p[2] - p[0], p[3] - p[0]])) < 0:
        ids = [ids[0], ids[1], ids[3], ids[2]]
    a, b, c, d = ids
    return [np.array(f) for f in ((b, c, d), (a, d, c), (a, b, d), (a, c, b))]


def generate_tet_mesh(n: int) -> PolyMesh:
    """Kuhn subdivision of the structured cube mesh: 6*n^3 tetrahedra."""
    if n < 1:
        raise ValueError("cells-per-axis must be >= 1")
    verts = _vertex_grid(n)
    cell_loops = []
    for k in range(n):
        for j in range(n):
            for i in range(n):
                base = np.array([i, j, k])
                for perm in KUHN_PERMUTATIONS:
                    offs = [np.zeros(3, dtype=int)]
                    for ax in perm:
                        step = offs[-1].copy()
                        step[ax] += 1
                        offs.append(step)
                    ids = [_grid_id(*(base + o), n) for o in offs]
                    cell_loops.append(_oriented_tet_faces(ids, verts[ids]))
    return build_polymesh(verts, cell_loops, family="tet", n=n)


_UNIT_CUBE_FACES = [
    np.array([[1, 0, 0], [1, 1, 0], [1, 1, 1], [1, 0, 1]], dtype=float),
    np.array([[0, 0, 0], [0, 0, 1], [0, 1, 1], [0, 1, 0]], dtype=float),
    np.array([[0, 1, 0], [0, 1, 1], [1, 1, 1], [1, 1, 0]], dtype=float),
    np.array([[0, 0, 0], [1, 0, 0], [1, 0, 1], [0, 0, 1]], dtype=float),
    np.array([[0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], dtype=float),
    np.array([[0, 0, 0], [0, 1, 0], [1, 1, 0], [1, 0, 0]], dtype=float),
]


def _clip_cell_faces(
    faces: list[np.ndarray], normal: np.ndarray, offset: float, eps: float = 1e-12
) -> tuple[list[np.ndarray], bool]:
    """Clip a convex polyhedron by the half-space {x : normal.x <= offset}.

    Returns the clipped face list and whether the plane actually cut.
    """
    kept: list[np.ndarray] = []
    chords: list[list[np.ndarray]] = []
    cut = False
    for poly in faces:
        d = poly @ normal - offset
        if np.all(d <= eps):
            kept.append(poly)
            continue
        cut = True
        if np.all(d >= -eps):
            continue  # face entirely on the discarded side
        m = len(poly)
        out: list[np.ndarray] = []
        crossings: list[np.ndarray] = []
        for a in range(m):
            b = (a + 1) % m
            da, db = d[a], d[b]
            if da <= eps:
                out.append(poly[a])
            if (da < -eps and db > eps) or (da > eps and db < -eps):
                t = da / (da - db)
                x = poly[a] + t * (poly[b] - poly[a])
                out.append(x)
                crossings.append(x)
        if len(out) >= 3:
            kept.append(np.asarray(out))
        if len(crossings) == 2:
            chords.append(crossings)
        elif len(crossings) > 2:
            raise MeshError("clip produced more than two crossings on one face")
    if not cut:
        return faces, False

    if len(chords) < 3:
        raise MeshError("degenerate clip: cap has fewer than three edges")
    chain_tol = 1e-9
    loop = [chords[0][0], chords[0][1]]
    used = {0}
    while len(used) < len(chords):
        tail = loop[-1]
        nxt = None
        for idx, (p, q) in enumerate(chords):
            if idx in used:
                continue
            if np.linalg.norm(p - tail) <= chain_tol:
                nxt = (idx, q)
                break
            if np.linalg.norm(q - tail) <= chain_tol:
                nxt = (idx, p)
                break
        if nxt is None:
            raise MeshError("failed to chain clip cap")
        used.add(nxt[0])
        loop.append(nxt[1])
    if np.linalg.norm(loop[-1] - loop[0]) > chain_tol:
        raise MeshError("clip cap does not close")
    cap = np.asarray(loop[:-1])
    keep = [0] + [i for i in range(1, len(cap)) if np.linalg.norm(cap[i] - cap[i - 1]) > 1e-11]
    cap = cap[keep]
    if len(cap) < 3:
        raise MeshError("degenerate clip cap")
    if _newell_normal(cap) @ normal < 0:
        cap = cap[::-1]
    kept.append(cap)
    return kept, True


def voronoi_mesh_from_seeds(seeds: np.ndarray) -> PolyMesh:
    """Clipped Voronoi diagram of explicit seed points inside [0,1]^3.

    Each cell is the unit cube intersected with the bisector half-spaces of
    its seed against the others.  Candidate bisectors are processed nearest
    first; a bisector farther than twice the current max vertex distance
    provably cannot cut, so the scan stops there (same cells as clipping
    against every bisector).
    """
    seeds = np.asarray(seeds, dtype=float)
    ns = len(seeds)
    if ns < 1:
        raise ValueError("need at least one seed")
    cell_coord_faces = []
    for i in range(ns):
        s = seeds[i]
        d = np.linalg.norm(seeds - s, axis=1)
        order = np.lexsort((np.arange(ns), d))
        faces = [f.copy() for f in _UNIT_CUBE_FACES]
        radius2 = max(np.max(((f - s) ** 2).sum(axis=1)) for f in faces)
        for j in order:
            if j == i:
                continue
            if d[j] * d[j] > 4.0 * radius2:
                break
            normal = (seeds[j] - s) / d[j]
            offset = normal @ (0.5 * (seeds[j] + s))
            try:
                faces, was_cut = _clip_cell_faces(faces, normal, offset)
            except MeshError as exc:
                raise MeshError(f"seed {i}: {exc}", cell=i) from exc
            if was_cut:
                if len(faces) < 4:
                    raise MeshError(f"seed {i}: cell clipped away", cell=i)
                radius2 = max(np.max(((f - s) ** 2).sum(axis=1)) for f in faces)
        vol = 0.0
        for poly in faces:
            nrm = _newell_normal(poly)
            vol += (poly.mean(axis=0) - s) @ nrm / 3.0
        if vol < MIN_CELL_VOLUME:
            raise MeshError(f"seed {i}: degenerate cell (volume {vol:.3e})", cell=i)
        cell_coord_faces.append(faces)

    return _mesh_from_coordinate_cells(cell_coord_faces, family="voronoi")


def generate_voronoi_mesh(n_seeds: int, rng_seed: int) -> PolyMesh:
    """Voronoi mesh of ``n_seeds`` uniformly random seeds, deterministic in ``rng_seed``."""
    if n_seeds < 1:
        raise ValueError("need at least one seed")
    rng = np.random.default_rng(rng_seed)
    seeds = rng.random((n_seeds, 3))
    return voronoi_mesh_from_seeds(seeds)


def _mesh_from_coordinate_cells(cell_coord_faces, family: str) -> PolyMesh:
    """Merge near-duplicate vertices globally and assemble the shared-face mesh."""
    flat = [poly for faces in cell_coord_faces for poly in faces]
    counts = [len(p) for p in flat]
    pts = np.concatenate(flat, axis=0)

    tree = cKDTree(pts)
    pairs = tree.query_pairs(VERTEX_MERGE_TOL, output_type="ndarray")
    parent = np.arange(len(pts))

    def find(a: int) -> int:
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    for a, b in pairs:
        ra, rb = find(int(a)), find(int(b))
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(int(i)) for i in range(len(pts))])
    unique_roots, ids = np.unique(roots, return_inverse=True)
    vertices = pts[unique_roots]

    loops_ids: list[np.ndarray] = []
    offset = 0
    for cnt in counts:
        loop = ids[offset:offset + cnt]
        offset += cnt
        keep = [0] + [t for t in range(1, len(loop)) if loop[t] != loop[t - 1]]
        loop = loop[keep]
        if loop[0] == loop[-1]:
            loop = loop[:-1]
        if len(loop) < 3:
            raise MeshError("face degenerated during vertex merge")
        loops_ids.append(loop.astype(np.int64))

    cell_loops = []
    offset = 0
    for faces in cell_coord_faces:
        cell_loops.append(loops_ids[offset:offset + len(faces)])
        offset += len(faces)
    return build_polymesh(vertices, cell_loops, family=family)


# ---------------------------------------------------------------------------
# interface classification


def classify_interface(mesh: PolyMesh, levelset: LevelSet) -> np.ndarray:
    """Flag cells whose sampled level-set values change sign strictly.

    Samples are the cell's vertices, its face centroids, and its centroid.
    A cell is an interface cell iff both strictly negative and strictly
    positive samples occur; zeros alone (surface aligned with cell boundary)
    do not flag.  Returns a boolean array over cells.
    """
    phi_v = levelset(mesh.vertices)
    phi_f = levelset(mesh.face_centroid)
    phi_c = levelset(mesh.cell_centroid)
    flags = np.zeros(mesh.n_cells, dtype=bool)
    for ci in range(mesh.n_cells):
        vals = np.concatenate([
            phi_v[mesh.cell_vertex_ids(ci)],
            phi_f[[fi for fi, _ in mesh.cell_faces(ci)]],
            [phi_c[ci]],
        ])
        flags[ci] = (vals < 0).any() and (vals > 0).any()
    return flags


# ---------------------------------------------------------------------------
# quality report


@dataclass
class MeshQualityReport:
    """Shape-regularity estimates and star-shapedness heuristics."""

    min_edge_face_ratio: float     # min over faces of (edge length / face diameter)
    min_face_cell_ratio: float     # min over cells of (face diameter / cell diameter)
    star_fail_cells: int
    star_fail_faces: int
    n_cells: int
    mean_size: float               # (|Omega| / N_E)^(1/3)
    gamma_min: float
    passed: bool

    def gamma_estimate(self) -> float:
        return min(self.min_edge_face_ratio, self.min_face_cell_ratio)


def check_mesh_assumptions(mesh: PolyMesh, gamma_min: float = 0.05) -> MeshQualityReport:
    """Audit the edge/face/cell diameter chain and centroid star-shapedness.

    The star-shape heuristic accepts a face (cell) when the fan of triangles
    (cone of tetrahedra) from its centroid has strictly positive signed
    measures; exact for convex geometry.
    """
    V = mesh.vertices
    min_ef = np.inf
    star_fail_faces = 0
    for fi, loop in enumerate(mesh.faces):
        P = V[loop]
        e = np.linalg.norm(np.roll(P, -1, axis=0) - P, axis=1)
        min_ef = min(min_ef, e.min() / mesh.face_diameter[fi])
        r = P - mesh.face_centroid[fi]
        tri_a = 0.5 * (np.cross(r, np.roll(r, -1, axis=0)) @ mesh.face_normal[fi])
        if np.any(tri_a <= 0):
            star_fail_faces += 1

    min_fE = np.inf
    star_fail_cells = 0
    for ci in range(mesh.n_cells):
        xe = mesh.cell_centroid[ci]
        ok = True
        for fi, sgn in mesh.cell_faces(ci):
            min_fE = min(min_fE, mesh.face_diameter[fi] / mesh.cell_diameter[ci])
            loop = mesh.faces[fi] if sgn > 0 else mesh.faces[fi][::-1]
            P = V[loop]
            tv = np.cross(P - xe, np.roll(P, -1, axis=0) - xe) @ (mesh.face_centroid[fi] - xe)
            if np.any(tv <= 0):
                ok = False
        if not ok:
            star_fail_cells += 1

    passed = (
        min_ef >= gamma_min
        and min_fE >= gamma_min
        and star_fail_cells == 0
        and star_fail_faces == 0
    )
    return MeshQualityReport(
        min_edge_face_ratio=float(min_ef),
        min_face_cell_ratio=float(min_fE),
        star_fail_cells=star_fail_cells,
        star_fail_faces=star_fail_faces,
        n_cells=mesh.n_cells,
        mean_size=float((mesh.total_volume() / mesh.n_cells) ** (1.0 / 3.0)),
        gamma_min=gamma_min,
        passed=passed,
    )


# ---------------------------------------------------------------------------
# VPM text format


def save_mesh(mesh: PolyMesh, path) -> None:
    """Write the VPM text format (version 1), coordinates at 17 significant digits."""
    lines = ["vpm 1"]
    lines.append(f"vertices {mesh.n_vertices}")
    for v in mesh.vertices:
        lines.append(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
    lines.append(f"faces {mesh.n_faces}")
    for loop in mesh.faces:
        lines.append(f"{len(loop)} " + " ".join(str(int(i)) for i in loop))
    lines.append(f"cells {mesh.n_cells}")
    for refs in mesh.cells:
        lines.append(f"{len(refs)} " + " ".join(str(int(r)) for r in refs))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


class _LineReader:
    def __init__(self, text: str):
        self.lines = text.splitlines()
        self.pos = 0

    @property
    def line_no(self) -> int:
        return self.pos  # 1-based number of the line just read

    def next(self, what: str) -> str:
        while self.pos < len(self.lines):
            line = self.lines[self.pos].strip()
            self.pos += 1
            if line:
                return line
        raise VpmParseError(f"unexpected end of file while reading {what}", self.pos)


def _parse_count(reader: _LineReader, keyword: str) -> int:
    line = reader.next(f"'{keyword}' header")
    parts = line.split()
    if len(parts) != 2 or parts[0] != keyword:
        raise VpmParseError(f"expected '{keyword} <count>', got {line!r}", reader.line_no)
    try:
        count = int(parts[1])
    except ValueError:
        raise VpmParseError(f"bad {keyword} count {parts[1]!r}", reader.line_no) from None
    if count < 0:
        raise VpmParseError(f"negative {keyword} count", reader.line_no)
    return count


def load_mesh(path) -> PolyMesh:
    """Parse a VPM file; malformed records raise :class:`VpmParseError` with line numbers."""
    with open(path) as fh:
        reader = _LineReader(fh.read())

    magic = reader.next("header")
    if magic.split() != ["vpm", "1"]:
        raise VpmParseError(f"bad magic {magic!r}, expected 'vpm 1'", reader.line_no)

    nv = _parse_count(reader, "vertices")
    verts = np.zeros((nv, 3))
    for i in range(nv):
        parts = reader.next(f"vertex {i}").split()
        if len(parts) != 3:
            raise VpmParseError(f"vertex {i}: expected 3 coordinates", reader.line_no)
        try:
            verts[i] = [float(p) for p in parts]
        except ValueError:
            raise VpmParseError(f"vertex {i}: bad coordinate", reader.line_no) from None

    nf = _parse_count(reader, "faces")
    faces: list[np.ndarray] = []
    for i in range(nf):
        parts = reader.next(f"face {i}").split()
        try:
            vals = [int(p) for p in parts]
        except ValueError:
            raise VpmParseError(f"face record {i}: bad integer", reader.line_no) from None
        if len(vals) < 1 or len(vals) != vals[0] + 1:
            raise VpmParseError(f"face record {i}: count mismatch", reader.line_no)
        loop = np.array(vals[1:], dtype=np.int64)
        if len(loop) < 3:
            raise VpmParseError(f"face record {i}: fewer than 3 vertices", reader.line_no)
        if loop.min() < 0 or loop.max() >= nv:
            raise VpmParseError(
                f"face record {i}: vertex index {loop[np.argmax((loop < 0) | (loop >= nv))]} out of range",
                reader.line_no,
            )
        faces.append(loop)

    nc = _parse_count(reader, "cells")
    if nv == 0 or nf == 0 or nc == 0:
        raise VpmParseError("mesh must have at least one vertex, face, and cell", reader.line_no)
    cells: list[np.ndarray] = []
    cell_lines: list[int] = []
    for i in range(nc):
        parts = reader.next(f"cell {i}").split()
        try:
            vals = [int(p) for p in parts]
        except ValueError:
            raise VpmParseError(f"cell record {i}: bad integer", reader.line_no) from None
        if len(vals) < 1 or len(vals) != vals[0] + 1:
            raise VpmParseError(f"cell record {i}: count mismatch", reader.line_no)
        refs = np.array(vals[1:], dtype=np.int64)
        if np.any(refs == 0) or np.any(np.abs(refs) > nf):
            bad = refs[np.argmax((refs == 0) | (np.abs(refs) > nf))]
            raise VpmParseError(f"cell record {i}: face index {bad} out of range", reader.line_no)
        cells.append(refs)
        cell_lines.append(reader.line_no)

    mesh = PolyMesh(vertices=verts, faces=faces, cells=cells)
    _index_cells(mesh)
    try:
        validate_topology(mesh)
    except MeshError as exc:
        line = cell_lines[exc.cell] if exc.cell is not None else reader.line_no
        raise VpmParseError(str(exc), line) from exc
    compute_geometry(mesh)
    return mesh
