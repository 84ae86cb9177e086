"""Simulation laboratory for GI/GI/N queues in the Halfin-Whitt regime and the
infinite-dimensional diffusion model that describes their fluctuations."""

from .distributions import (DistributionSpec, Family, build_bundle, sample_residual,
                            sample_service, verify_assumptions, zbar)
from .kernels import AgeVector, RGrid, h1_inner, h1_norm, phi, psi, t_map, t_map_derivative
from .queue_sim import SimConfig, compensated_departure, fluid_scale, init_star, run
from .diffusion import (DiffusionConfig, estimate_diffusion_stationary, mm_integral,
                        run_diffusion, simulate_drivers, solve_cms)
from .stationary import (EmpiricalLaw, compare, convergence_sweep, erlang_oracle,
                         estimate_queue_stationary, lhat_bound)
from .diagnostics import fluid_deviation, identity_audit, tightness_profile
from .parallel import seed_split

__version__ = "0.1.0"
