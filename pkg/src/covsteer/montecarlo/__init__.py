from ._kernels import numba_enabled
from .report import McReport, run_montecarlo
from .simulate import (NOISE_MODELS, STREAMS, Samples, SimulationConfig, rng_streams,
                       sample_trajectories, sample_trajectory, write_samples_csv)
from .statistics import (IdentityReport, MomentReport, ViolationReport, control_norm_summary,
                         empirical_cost, estimate_moments, estimate_violations, mode_path_check,
                         verify_identities)
