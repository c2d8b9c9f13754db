"""Lowest-order virtual element solver for the regularized Poisson-Boltzmann
equation on general 3D polyhedral meshes."""

from .mesh import (
    LevelSet,
    MeshError,
    MeshQualityReport,
    PolyMesh,
    VpmParseError,
    box_levelset,
    check_mesh_assumptions,
    classify_interface,
    compute_geometry,
    generate_cube_mesh,
    generate_tet_mesh,
    generate_voronoi_mesh,
    load_mesh,
    save_mesh,
    voronoi_mesh_from_seeds,
)
from .polybasis import (
    CellQuadrature,
    MonomialBasis,
    cell_quadrature,
    face_quadrature,
    integrate,
    monomial_basis,
    tetrahedralize_cell,
    triangulate_face,
)
from .projectors import CellProjectors, FaceProjector, build_projectors, cell_projectors, face_pi_nabla
from .forms import (
    LoadSpec,
    NonlinearOverflow,
    PhysicsConfig,
    SingularityError,
    eval_G,
    eval_grad_G,
    manufactured_linear,
    manufactured_sine,
    regularized_load,
)
from .solver import (
    NewtonConfig,
    SolveReport,
    SolverError,
    SparseSystem,
    apply_dirichlet,
    assemble_jacobian,
    assemble_linear,
    assemble_load,
    assemble_residual,
    cg_solve,
    newton_solve,
)
from .analysis import (
    ConvergenceReport,
    compare_to_reference,
    convergence_order,
    error_h1,
    error_l2,
    fitted_order,
    mesh_size,
    run_convergence_study,
)

__version__ = "0.1.0"
