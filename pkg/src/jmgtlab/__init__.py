"""Desk-scale simulation and verification lab for the boundary-stabilized
JMGT (Jordan-Moore-Gibson-Thompson) equation with an undissipated Robin
boundary part and an absorbing feedback part."""

__version__ = "0.1.0"

from .geometry import (build_interval_mesh, build_rect_mesh, partition_boundary,
                       check_star_shaped, synthesize_multiplier_field,
                       verify_field, Mesh, BoundaryPartition, MultiplierField,
                       GAMMA0, GAMMA1)
from .assembly import (PhysicalParams, DiscreteOperators, assemble_core,
                       solve_neumann_map, build_generator_u, build_transform_M,
                       build_generator_z, BlockOperator)
from .evolution import (StateVector, Scenario, Trajectory, integrate,
                        check_compatibility, apply_nonlinearity,
                        detect_degeneracy, step_linear, step_nonlinear,
                        make_initial_data)
from .diagnostics import (EnergyReport, IdentityResidual, compute_energies,
                          energy_identity_residual, multiplier_identity_residual,
                          higher_identity_residual,
                          variation_of_parameters_residual)
from .spectral import (SpectrumReport, spectrum, dissipativity_check,
                       resolvent_check, matrix_exponential_oracle)
from .lab import (DecayFit, SweepResult, fit_decay_rate, experiment_conservation,
                  experiment_two_level, experiment_smallness_sweep,
                  experiment_geometry)
