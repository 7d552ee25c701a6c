"""Direct and inverse scattering on noncompact star graphs of singular rays.

Each ray carries a radial Schrodinger operator with an inverse-square
singularity of fractional index nu plus a decaying perturbation q.  The
package computes scattering data (reflection coefficients, discrete
poles, residue factors) from given potentials, and reconstructs
potentials from scattering data by a contour-integral comparison with
a known model problem.
"""

from .graph import (ConditionReport, GraphProblem, GraphSpec, ScatteringData,
                    ScatteringDataRay, characteristic_function, matching_forms)
from .halfline import (HalflineProblem, estimate_asymptotic_constants,
                       solve_jost, solve_regular, stokes_multipliers,
                       weyl_function)
from .inverse import (JumpData, MainEquationSystem, ModelProblem,
                      ReconstructionResult, assemble_main_system, build_jump,
                      complete_inverse, invert_main_system, procedure_41,
                      reconstruct_row, recover_potential, solve_main_system)
from .numerics import (ContourSpec, RealGrid, cauchy_apply, find_zeros_rectangle,
                       laurent_coefficient, pv_cauchy_matrix, solve_dense,
                       winding_number)
from .potentials import Potential
from .unperturbed import (RayParameters, SeriesTruncation, branch_power,
                          eval_C, green_kernel, series_coefficients)

__all__ = [
    "ConditionReport", "ContourSpec", "GraphProblem", "GraphSpec",
    "HalflineProblem", "JumpData", "MainEquationSystem", "ModelProblem",
    "Potential", "RayParameters", "RealGrid", "ReconstructionResult",
    "ScatteringData", "ScatteringDataRay", "SeriesTruncation",
    "assemble_main_system", "branch_power", "build_jump", "cauchy_apply",
    "characteristic_function", "complete_inverse", "estimate_asymptotic_constants",
    "eval_C", "find_zeros_rectangle", "green_kernel", "invert_main_system",
    "laurent_coefficient", "matching_forms", "procedure_41", "pv_cauchy_matrix",
    "reconstruct_row", "recover_potential", "series_coefficients", "solve_dense",
    "solve_jost", "solve_main_system", "solve_regular", "stokes_multipliers",
    "weyl_function", "winding_number",
]

__version__ = "0.1.0"
