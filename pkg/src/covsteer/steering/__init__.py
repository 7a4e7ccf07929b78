from .algorithm import (Algorithm1Options, SlackReport, SteeringError, SteeringSolution,
                        certify_losslessness, run_algorithm1, solve_two_step, write_run_log)
from .subproblems import (build_cov_cc, build_cov_unconstrained, build_mean_cc,
                          build_mean_unconstrained, cov_from_values, mean_from_values)
from .tightening import (TighteningCoefficients, allocate_risk, tighten_halfplane,
                         tighten_norm)
