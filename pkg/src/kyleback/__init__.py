"""Kyle-Back equilibrium with a CARA insider and a dynamic private signal."""

from .core import (AssumptionViolation, DensityUnderflow, DomainViolation, Entry, InconsistentBundle,
                   InsufficientPaths, InvalidParameter, KyleBackError, NoConvergence, PathBundle,
                   PricingRule, QuadratureFailure, RngContract, SignalModel, SingularDrift, StateEscape,
                   StepResolution, TimeGrid, VerificationReport, make_grid)
from .signals import (DeterministicVolSpec, GaussianOracle, QuadraticVolSpec, StaticSpec, build_custom,
                      build_deterministic, build_quadratic, build_static, equilibrium_rule, limit_sequence,
                      validate_assumptions)
from .transforms import (BridgeKernel, IntegratedScale, density_p, density_rho, equilibrium_drift, eval_lambda,
                         eval_u, eval_v, jump_penalty, jump_update, kw_inverse, kw_map, psi, psi_increment,
                         psi_pde_residual)
from .simulate import SimConfig, Strategy, simulate_equilibrium, simulate_many, simulate_signal, wealth
from .verify import (BatteryConfig, density_grid, run_battery, verify_admissibility, verify_bridge_convergence,
                     verify_density_identities, verify_optimality, verify_order_flow_brownian,
                     verify_rational_pricing, verify_static_v_invariance)

__version__ = "0.1.0"
