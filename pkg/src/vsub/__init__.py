"""Variational subspaces for constrained quadratic energies, and an
interactive subspace deformation runtime built on top of them."""

import os as _os

# VSUB_THREADS caps BLAS/OpenMP workers; it must land in the environment
# before the first numpy import anywhere in this package.
_threads = _os.environ.get("VSUB_THREADS")
if _threads:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ.setdefault(_var, _threads)

from .container import model_blob, read_model, read_model_blob, write_model
from .deform import (
    AffinePatchSpec,
    DeformEnergy,
    EnergyParams,
    PrecomputedModel,
    apply_affine_patches,
    assemble_energy,
    build_model,
    control_selector,
    precompute_subspace,
    reduce_model,
)
from .errors import NumericError, ParseError, ValidationError, VsubError
from .hatspace import (
    BoundParams,
    HatProblem,
    HatSubspace,
    bound_rhs,
    exact_hat_solution,
    hat_subspace,
    hat_transform,
    lemma_inequalities_check,
    measured_rho,
    reduced_hat_solution,
    run_verification,
)
from .mesh import (
    Mesh,
    cotangent_weights,
    generate_primitive,
    lb_eigenbasis,
    linear_proxy_selector,
    load_mesh,
    rotation_clusters,
    write_node_ele,
    write_obj,
)
from .qp import (
    DemandBasis,
    QuadraticProgram,
    ReducedSolution,
    VariationalSubspace,
    build_subspace,
    exact_solve,
    mahalanobis_distance,
    solve_in_subspace,
)
from .runtime import (
    FrameResult,
    PatchGrab,
    RuntimeOptions,
    Session,
    kabsch_rotation,
    load_script,
    polar_rotation,
    run_batch,
)

__version__ = "0.1.0"
