"""Branching diffusions, their spine decomposition and numerical checks of the strong law."""

__version__ = "0.1.0"

from .engine import (EnsembleRun, Particle, ParticleSystem, SimConfig, Trajectory,
                     WeightedTrajectory, advance_branch_clock, run_replicates, simulate,
                     simulate_ensemble, simulate_weighted, step_motion)
from .models import (DomainSpec, EigenTriple, Model, check_adjoint_harmonicity, check_harmonicity,
                     fd_principal_eigenvalue, make_compact_beta_bbm, make_inward_ou_quadratic,
                     make_outward_ou_constant, model_from_config, model_to_config, phi_pairing,
                     product_p_star, solve_lambda_c_compact, validate_model)
from .spine import (NotProductPCritical, PathRecord, SpineRealization, girsanov_weight,
                    lemma16_terms, poisson_tilt_weight, resimulate_subtrees, sample_fission_times,
                    sample_spine_path, simulate_tilted, spine_conditional_expectation)
from .stats import (StatSeries, TestFunction, check_iii_star, check_iv, expectation_oracle,
                    growth_classifier, local_extinction_probe, remark9_ode_mixing, slln_ratio, u_t,
                    w_phi)
