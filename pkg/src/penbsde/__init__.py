"""Penalized BSDE solver for control problems with controlled Cox jumps."""
from .bsde import (BsdeSolution, PenaltySweepReport, ValueEstimate, backward_solve,
                   constraint_violation, default_basis, default_penalty_max, penalty_sweep, value_at)
from .errors import (CFLViolation, ConfigError, DomainTooSmall, Explosion, MajorantViolated,
                     NotInOpenBall, PenBsdeError, SingularDesign, StepBoundViolation,
                     TruncationTooShort)
from .forward import (PathEnsemble, TimeGrid, simulate_brownians, simulate_cox_thinning,
                      simulate_ensemble, simulate_I, simulate_X_euler)
from .model import (ControlledModel, ControlSet, IntensityKernel, constant_intensity_model,
                    controlled_intensity_model, make_model, nondominated_jump_model,
                    surjection_h, surjection_preimage, trivial_drift_model, uvm_model,
                    validate_model)
from .reference import (FdGrid, FdSolution, benchmark_oracle, bs_closed_form,
                        poisson_series_value, solve_hjb_fd)
from .regression import BasisSpec, Projector, fit_predict
from .validation import (StatTestReport, laplace_functional_test, martingale_residual_test,
                         poisson_count_test, sweep_diagnostics)

__version__ = "0.1.0"
