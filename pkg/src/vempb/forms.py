"""Physics coefficients and local element forms.

The dielectric and screening coefficients switch on the sign of the level
set at each quadrature node (points on the surface count as molecular); no
sub-cell interface reconstruction is attempted.  The element stiffness is
the projected-gradient consistency term plus a dofi-dofi stabilization
scaled by h_E times the cell-averaged dielectric, which keeps the two parts
spectrally comparable for any dielectric contrast.

The singular Coulomb part of the potential enters the nonlinear term and
the load; it is evaluated only where the screening coefficient is nonzero,
which keeps quadrature nodes away from the charge locations (charges sit in
the unscreened molecular region).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .mesh import LevelSet, PolyMesh, box_levelset
from .polybasis import CellQuadrature
from .projectors import CellProjectors

SINH_ARG_LIMIT = 700.0
CHARGE_SINGULARITY_TOL = 1e-14


class SingularityError(ValueError):
    """Field evaluation requested at (or too close to) a point charge."""


class NonlinearOverflow(ArithmeticError):
    """sinh/cosh argument exceeded the overflow guard; caller should damp."""


@dataclass
class PhysicsConfig:
    """Dielectric constants, screening parameter, point charges, level set.

    ``kappa`` is the Debye-Hueckel parameter; the effective screening
    coefficient is eps_s * kappa^2 in the solvent region and zero in the
    molecular region.  Charge locations must lie in the closed molecular
    region.
    """

    eps_m: float = 2.0
    eps_s: float = 80.0
    kappa: float = 1.0 / (20.0 * np.sqrt(2.0))
    charges: list[tuple[float, tuple[float, float, float]]] = field(
        default_factory=lambda: [(1.0, (0.0, 0.0, 0.0))]
    )
    levelset: LevelSet = field(default_factory=box_levelset)

    def __post_init__(self):
        if self.eps_m <= 0 or self.eps_s <= 0:
            raise ValueError("permittivities must be positive")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        self._q = np.array([q for q, _ in self.charges], dtype=float)
        self._x = np.array([x for _, x in self.charges], dtype=float).reshape(-1, 3)
        for q, x in self.charges:
            if self.levelset(np.asarray(x, dtype=float)) > 0:
                raise ValueError(f"charge at {x} lies outside the molecular region")

    @property
    def kappa_bar_sq_solvent(self) -> float:
        return self.eps_s * self.kappa**2

    def solvent_mask(self, points: np.ndarray) -> np.ndarray:
        return self.levelset(np.atleast_2d(points)) > 0

    def epsilon(self, points: np.ndarray) -> np.ndarray:
        return np.where(self.solvent_mask(points), self.eps_s, self.eps_m)

    def kappa_bar_sq(self, points: np.ndarray) -> np.ndarray:
        return np.where(self.solvent_mask(points), self.kappa_bar_sq_solvent, 0.0)

    def coulomb_potential(self, points: np.ndarray) -> np.ndarray:
        """Sum of (q_i/eps_m)/|x - x_i| over the point charges."""
        pts = np.atleast_2d(points)
        out = np.zeros(len(pts))
        for q, x in zip(self._q, self._x):
            r = np.linalg.norm(pts - x, axis=1)
            if r.min() < CHARGE_SINGULARITY_TOL:
                raise SingularityError(f"evaluation at charge location {x}")
            out += (q / self.eps_m) / r
        return out

    def coulomb_gradient(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        out = np.zeros_like(pts)
        for q, x in zip(self._q, self._x):
            rel = pts - x
            r = np.linalg.norm(rel, axis=1)
            if r.min() < CHARGE_SINGULARITY_TOL:
                raise SingularityError(f"evaluation at charge location {x}")
            out -= (q / self.eps_m) * rel / r[:, None] ** 3
        return out


def eval_G(physics: PhysicsConfig, x) -> float | np.ndarray:
    """Coulomb potential of the charge set at one point or an array of points."""
    vals = physics.coulomb_potential(x)
    return float(vals[0]) if np.asarray(x).ndim == 1 else vals


def eval_grad_G(physics: PhysicsConfig, x) -> np.ndarray:
    vals = physics.coulomb_gradient(x)
    return vals[0] if np.asarray(x).ndim == 1 else vals


@dataclass
class LoadSpec:
    """Right-hand-side selection: regularized charge splitting or manufactured.

    In regularized mode the load is the weak form of the dielectric-jump
    source: -((eps - eps_m) grad G, projected grad v).  In manufactured mode
    the load makes ``u_exact`` the exact weak solution: (eps grad u_ex,
    projected grad v) + (screened sinh(u_ex + G), projected v).  The optional
    pointwise mode instead integrates the strong-form residual of u_ex
    against the projected test function (needs the Laplacian).
    """

    mode: str
    u_exact: Callable[[np.ndarray], np.ndarray] | None = None
    grad_u_exact: Callable[[np.ndarray], np.ndarray] | None = None
    lap_u_exact: Callable[[np.ndarray], np.ndarray] | None = None
    pointwise_rhs: bool = False

    def __post_init__(self):
        if self.mode not in ("regularized", "manufactured"):
            raise ValueError(f"unknown load mode {self.mode!r}")
        if self.mode == "manufactured":
            if self.u_exact is None or self.grad_u_exact is None:
                raise ValueError("manufactured mode needs u_exact and grad_u_exact")
            if self.pointwise_rhs and self.lap_u_exact is None:
                raise ValueError("pointwise mode needs lap_u_exact")
        elif self.pointwise_rhs:
            raise ValueError("pointwise_rhs only applies to manufactured mode")

    def boundary_values(self, points: np.ndarray) -> np.ndarray:
        if self.mode == "manufactured":
            return np.asarray(self.u_exact(np.atleast_2d(points)), dtype=float)
        return np.zeros(len(np.atleast_2d(points)))


def regularized_load() -> LoadSpec:
    return LoadSpec(mode="regularized")


def manufactured_sine() -> LoadSpec:
    """u = sin(pi x) sin(pi y) sin(pi z); vanishes on the unit-cube boundary."""

    def u(p):
        p = np.atleast_2d(p)
        return np.sin(np.pi * p[:, 0]) * np.sin(np.pi * p[:, 1]) * np.sin(np.pi * p[:, 2])

    def grad(p):
        p = np.atleast_2d(p)
        s = np.sin(np.pi * p)
        c = np.cos(np.pi * p)
        return np.pi * np.column_stack(
            [c[:, 0] * s[:, 1] * s[:, 2], s[:, 0] * c[:, 1] * s[:, 2], s[:, 0] * s[:, 1] * c[:, 2]]
        )

    def lap(p):
        return -3.0 * np.pi**2 * u(p)

    return LoadSpec(mode="manufactured", u_exact=u, grad_u_exact=grad, lap_u_exact=lap)


def manufactured_linear(coeffs=(0.0, 1.0, 0.0, 0.0)) -> LoadSpec:
    """u = a0 + a.x, the patch-test field (non-zero Dirichlet data)."""
    a0 = float(coeffs[0])
    a = np.asarray(coeffs[1:], dtype=float)

    def u(p):
        return a0 + np.atleast_2d(p) @ a

    def grad(p):
        return np.broadcast_to(a, (len(np.atleast_2d(p)), 3)).copy()

    def lap(p):
        return np.zeros(len(np.atleast_2d(p)))

    return LoadSpec(mode="manufactured", u_exact=u, grad_u_exact=grad, lap_u_exact=lap)


MANUFACTURED_SOLUTIONS: dict[str, Callable[[], LoadSpec]] = {
    "sine3": manufactured_sine,
}


# ---------------------------------------------------------------------------
# local element forms


def local_stiffness(
    mesh: PolyMesh, ci: int, proj: CellProjectors, physics: PhysicsConfig, quad: CellQuadrature
) -> np.ndarray:
    """Stabilized element stiffness: consistency + dofi-dofi remainder term."""
    eps_int = float(quad.weights @ physics.epsilon(quad.points))
    vol = mesh.cell_volume[ci]
    sigma = mesh.cell_diameter[ci] * eps_int / vol
    g = proj.pi0_grad
    return eps_int * (g.T @ g) + sigma * (proj.stab_q.T @ proj.stab_q)


def _projected_values(proj: CellProjectors, points: np.ndarray) -> np.ndarray:
    """Values of the projected local shape functions at points, shape (nq, n)."""
    return proj.basis.eval_all(points) @ proj.pi_nabla


def local_nonlinear(
    mesh: PolyMesh,
    ci: int,
    proj: CellProjectors,
    physics: PhysicsConfig,
    u_loc: np.ndarray,
    quad: CellQuadrature,
    with_jacobian: bool = True,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Residual and Jacobian of the screened sinh term on one cell.

    Both vanish on cells fully inside the molecular region.  Raises
    :class:`NonlinearOverflow` when the sinh argument leaves the safe range,
    signalling the Newton driver to damp.
    """
    n = proj.n_dofs
    kap = physics.kappa_bar_sq(quad.points)
    active = kap > 0
    if not active.any():
        return np.zeros(n), (np.zeros((n, n)) if with_jacobian else None)
    pts = quad.points[active]
    wk = quad.weights[active] * kap[active]
    N = _projected_values(proj, pts)
    arg = N @ u_loc + physics.coulomb_potential(pts)
    if np.abs(arg).max() > SINH_ARG_LIMIT:
        raise NonlinearOverflow(
            f"cell {ci}: sinh argument {np.abs(arg).max():.3g} exceeds {SINH_ARG_LIMIT:g}"
        )
    residual = N.T @ (wk * np.sinh(arg))
    jac = (N * (wk * np.cosh(arg))[:, None]).T @ N if with_jacobian else None
    return residual, jac


def local_nonlinear_residual(mesh, ci, proj, physics, u_loc, quad) -> np.ndarray:
    return local_nonlinear(mesh, ci, proj, physics, u_loc, quad, with_jacobian=False)[0]


def local_nonlinear_jacobian(mesh, ci, proj, physics, u_loc, quad) -> np.ndarray:
    return local_nonlinear(mesh, ci, proj, physics, u_loc, quad, with_jacobian=True)[1]


def local_load(
    mesh: PolyMesh,
    ci: int,
    proj: CellProjectors,
    physics: PhysicsConfig,
    load: LoadSpec,
    quad: CellQuadrature,
) -> np.ndarray:
    """Element load vector for the selected right-hand-side mode."""
    n = proj.n_dofs
    w = quad.weights
    pts = quad.points
    if load.mode == "regularized":
        return _dielectric_jump_load(proj, physics, pts, w, n)

    eps = physics.epsilon(pts)
    if load.pointwise_rhs:
        f = -eps * load.lap_u_exact(pts)
        kap = physics.kappa_bar_sq(pts)
        active = kap > 0
        if active.any():
            f[active] += kap[active] * np.sinh(
                load.u_exact(pts[active]) + physics.coulomb_potential(pts[active])
            )
        out = _projected_values(proj, pts).T @ (w * f)
        return out + _dielectric_jump_load(proj, physics, pts, w, n)

    flux = w[:, None] * eps[:, None] * load.grad_u_exact(pts)
    out = proj.pi0_grad.T @ flux.sum(axis=0)
    kap = physics.kappa_bar_sq(pts)
    active = kap > 0
    if active.any():
        arg = load.u_exact(pts[active]) + physics.coulomb_potential(pts[active])
        out += _projected_values(proj, pts[active]).T @ (
            w[active] * kap[active] * np.sinh(arg)
        )
    return out


def _dielectric_jump_load(proj, physics, pts, w, n) -> np.ndarray:
    """Weak dielectric-jump source -((eps - eps_m) grad G, projected grad v)."""
    solvent = physics.solvent_mask(pts)
    if not solvent.any():
        return np.zeros(n)
    gG = physics.coulomb_gradient(pts[solvent])
    vec = ((physics.eps_s - physics.eps_m) * w[solvent])[:, None] * gG
    return -proj.pi0_grad.T @ vec.sum(axis=0)
