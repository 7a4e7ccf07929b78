import json
from dataclasses import replace

import numpy as np
import pytest

from covsteer.conic import solve
from covsteer.model import (ChanceConstraintSet, Halfplane, MarkovChain, ModeDynamics, MjlsModel,
                            TubeBound, benchmark_instance)
from covsteer.propagation import CovarianceTrajectory, closed_loop_moments, Policy
from covsteer.steering import (Algorithm1Options, SteeringError, build_cov_cc,
                               build_cov_unconstrained, build_mean_cc, build_mean_unconstrained,
                               certify_losslessness, cov_from_values, mean_from_values,
                               run_algorithm1, solve_two_step, write_run_log)
from covsteer.steering.subproblems import FAMILIES

from oracles import random_single_mode_instance, single_mode_mean_qp

STATE_A = np.array([0.0, -1.0])
KAPPA_95 = np.sqrt(19.0)


def assert_no_feedback(xi):
    # Y ~ 0 at solver precision; the Schur block then bounds |L| by
    # sqrt(lambda_max(Y) lambda_max(S)), so L is zero to about sqrt(tol)
    assert np.abs(xi.y).max() <= 1e-7
    assert np.abs(xi.l).max() <= 1e-4


def boundary_errors(model, sol):
    return (np.linalg.norm(sol.tau.mu[-1] - model.mu_f),
            np.linalg.eigvalsh(sol.xi.sigma[-1] - model.sigma_f).max())


# ------------------------------------------------------------- mean side

@pytest.mark.parametrize("T", [3, 5, 8])
def test_single_mode_mean_matches_dense_qp(rng, T):
    model = random_single_mode_instance(rng, T)
    res = solve(build_mean_unconstrained(model))
    expected, v = single_mode_mean_qp(model.a[0, 0], model.b[0, 0], model.bias[0],
                                      model.q_weight[0], model.r_weight[0], model.mu0,
                                      model.mu_f, T)
    assert res.objective == pytest.approx(expected, rel=1e-7)
    tau = mean_from_values(model, res.values)
    np.testing.assert_allclose(tau.ubar[:, 0], v, atol=1e-5 * (1 + np.abs(v).max()))


def test_mean_no_steering_needed():
    mode = ModeDynamics(np.eye(2), np.eye(2), np.eye(2))
    model = MjlsModel.from_modes([mode, mode], MarkovChain(np.full((2, 2), 0.5),
                                                           np.array([0.5, 0.5])), 4,
                                 q_weight=np.zeros((2, 2)), r_weight=np.eye(2), mu0=[1.0, 2.0],
                                 sigma0=np.eye(2), mu_f=[1.0, 2.0], sigma_f=np.eye(2))
    res = solve(build_mean_unconstrained(model))
    assert res.status == "optimal"
    assert abs(res.objective) <= 1e-8
    assert np.abs(mean_from_values(model, res.values).ubar).max() <= 1e-6


def test_benchmark_mean_feasible(benchmark):
    res = solve(build_mean_unconstrained(benchmark[0]))
    assert res.status == "optimal"


def test_empty_cc_reduces_to_unconstrained(benchmark, solved):
    model, _ = benchmark
    empty = ChanceConstraintSet()
    a = solve(build_mean_unconstrained(model))
    b = solve(build_mean_cc(model, empty, solved.xi))
    assert abs(a.objective - b.objective) <= 1e-8 * abs(a.objective)
    tau = mean_from_values(model, a.values)
    c = solve(build_cov_unconstrained(model, tau))
    d = solve(build_cov_cc(model, empty, tau))
    assert abs(c.objective - d.objective) <= 1e-8 * abs(c.objective)


def test_large_weights_drive_mean_slacks_to_zero(benchmark, solved):
    model, cc = benchmark
    alpha = 1e2 * 1.5 ** 7
    res = solve(build_mean_cc(model, cc, solved.xi, {f: alpha for f in FAMILIES}))
    assert res.status == "optimal"
    for name, v in res.values.items():
        if name.startswith("beta_"):
            assert np.max(v) <= 1e-6, name


# ------------------------------------------------------- covariance side

def test_benchmark_covariance_meets_terminal_bound(benchmark):
    model, _ = benchmark
    tau = mean_from_values(model, solve(build_mean_unconstrained(model)).values)
    res = solve(build_cov_unconstrained(model, tau))
    assert res.status == "optimal"
    xi = cov_from_values(model, tau, res.values)
    assert np.linalg.eigvalsh(xi.sigma[-1] - 3 * np.eye(2)).max() <= 1e-6


def test_schur_blocks_psd_on_returned_primal(solved, unconstrained_solution):
    for xi in (solved.xi, unconstrained_solution[1].xi):
        T, N = xi.l.shape[:2]
        for k in range(T):
            for i in range(N):
                block = np.block([[xi.y[k, i], xi.l[k, i]], [xi.l[k, i].T, xi.s[k, i]]])
                assert np.linalg.eigvalsh(block).min() >= -1e-7


def test_loose_terminal_set_and_no_state_cost():
    # Q = 0 and a huge terminal set: nothing is worth paying control for
    model, _ = benchmark_instance(constrained=False, q_weight=0.0)
    model = replace(model, sigma_f=1e6 * np.eye(2))
    sol = solve_two_step(model)
    _, _, jc = sol.cost
    assert abs(jc) <= 1e-6
    assert_no_feedback(sol.xi)
    assert np.linalg.eigvalsh(model.sigma_f - sol.xi.sigma[-1]).min() > 1e5


def test_free_evolution_targets_need_no_control():
    # targets equal to the uncontrolled moments and Q = 0: J = 0, ubar = 0, L = 0
    model, _ = benchmark_instance(constrained=False, q_weight=0.0)
    tau, xi = closed_loop_moments(model, Policy.zero(model))
    model = replace(model, mu_f=tau.mu[-1], sigma_f=xi.sigma[-1] + 1e-3 * np.eye(2))
    sol = solve_two_step(model)
    assert abs(sol.cost[0]) <= 1e-6
    assert np.abs(sol.tau.ubar).max() <= 1e-5
    assert_no_feedback(sol.xi)


def test_single_mode_static_covariance_nothing_to_squeeze(rng):
    b = rng.normal(size=(2, 2))
    model = MjlsModel.from_modes(
        [ModeDynamics(np.eye(2), b, np.zeros((2, 2)))], MarkovChain(np.ones((1, 1)), np.ones(1)),
        4, q_weight=np.zeros((2, 2)), r_weight=np.eye(2), mu0=[0.0, 0.0], sigma0=2 * np.eye(2),
        mu_f=[0.0, 0.0], sigma_f=2 * np.eye(2))
    sol = solve_two_step(model)
    assert abs(sol.cost[2]) <= 1e-7
    assert_no_feedback(sol.xi)


def test_forced_zero_slacks_cannot_beat_unconstrained(benchmark, solved):
    model, cc = benchmark
    unc = solve(build_cov_unconstrained(model, solved.tau))
    prog = build_cov_cc(model, cc, solved.tau)
    for name in list(prog.blocks):
        if name.startswith("zeta_"):
            prog.add_equality(prog.var(name), np.zeros(prog.var(name).shape))
    con = solve(prog)
    assert unc.status == con.status == "optimal"
    assert con.objective >= unc.objective - 1e-8 * abs(unc.objective)


def test_mean_exceeding_norm_budget_is_noted(benchmark, solved):
    model, cc = benchmark
    tau = replace(solved.tau, ubar=solved.tau.ubar * 10.0)
    notes = []
    prog = build_cov_cc(model, cc, tau, notes=notes)
    assert any("exceeds norm budget" in n for n in notes)
    assert any(m.label.startswith("control_norm[") for m in prog.memberships)


# ------------------------------------------------------------ losslessness

def test_certificate_examples(solved):
    xi = solved.xi
    exact = replace(xi, y=xi.l @ np.linalg.solve(xi.s[:-1], np.swapaxes(xi.l, -1, -2)))
    assert np.max(certify_losslessness(exact)) <= 1e-12
    bumped_y = exact.y + np.eye(2)
    gap = certify_losslessness(replace(exact, y=bumped_y))
    expected = np.sqrt(2.0) / (1.0 + np.linalg.norm(bumped_y, axis=(-2, -1)))
    np.testing.assert_allclose(gap, expected, rtol=1e-8)
    s = xi.s.copy()
    s[1, 0] = 0.0
    assert np.isinf(certify_losslessness(replace(xi, s=s))[1, 0])


def test_solutions_certified(solved, unconstrained_solution):
    assert solved.certified and np.max(solved.lossless_residual) <= 1e-5
    assert unconstrained_solution[1].certified


# -------------------------------------------------------------- two-step

def test_two_step_boundary(unconstrained_solution):
    model, sol = unconstrained_solution
    dmu, dsig = boundary_errors(model, sol)
    assert dmu <= 1e-6 and dsig <= 1e-6
    assert sol.status == "optimal" and sol.iterations == 1


# ----------------------------------------------------------- algorithm 1

def test_benchmark_converges(benchmark, solved):
    model, _ = benchmark
    assert solved.status == "converged"
    assert solved.iterations <= 15
    dmu, dsig = boundary_errors(model, solved)
    assert dmu <= 1e-6 and dsig <= 1e-6
    last = solved.slack_history[-1]
    assert last.max_beta <= 1e-6 and last.max_zeta <= 1e-6


def test_state_constraint_margin_kept(solved):
    for k in range(solved.tau.mu.shape[0] - 1):
        sd = np.sqrt(STATE_A @ solved.xi.sigma[k] @ STATE_A)
        assert solved.tau.mu[k, 1] >= -10.0 + KAPPA_95 * sd - 1e-6


def test_control_norm_margin_kept(solved):
    eig = np.linalg.eigvalsh(solved.xi.y)[..., -1]
    bound = np.linalg.norm(solved.tau.ubar, axis=2) + np.sqrt(40.0 * np.clip(eig, 0, None))
    assert bound.max() <= 8.0 + 1e-6


def test_complementary_slackness_on_active_steps(solved):
    d = 0.05
    active = 0
    for k in range(solved.tau.mu.shape[0] - 1):
        gap = STATE_A @ solved.tau.mu[k] - 10.0
        var = STATE_A @ solved.xi.sigma[k] @ STATE_A
        if abs(gap + KAPPA_95 * np.sqrt(var)) <= 1e-5 * (1.0 + abs(gap)):
            active += 1
            assert var == pytest.approx(gap ** 2 * d / (1 - d), rel=1e-5)
    assert active >= 1


def test_slack_history_non_increasing_after_first_escalation(solved):
    # stated as an observed property of the reference instance, with 1e-9
    # allowed for round-off; entries of ``upticks`` are (iteration, rise)
    hist = [h.max_slack for h in solved.slack_history]
    after = hist[1:]
    upticks = [(n + 3, b - a) for n, (a, b) in enumerate(zip(after, after[1:])) if b > a + 1e-9]
    assert not upticks, f"slack history {hist}"


def test_run_log_contents(tmp_path, solved):
    entries = [e for e in solved.run_log if "iteration" in e]
    assert len(entries) == solved.iterations
    for e in entries:
        for key in ("alpha", "beta_inf", "zeta_inf", "lossless_max"):
            assert key in e
    path = tmp_path / "log.jsonl"
    write_run_log(path, solved.run_log)
    lines = path.read_text().splitlines()
    assert len(lines) == len(solved.run_log)
    assert json.loads(lines[0])["iteration"] == 1


def test_weights_escalate_by_eta(solved):
    w = [h.weights["control_norm"] for h in solved.slack_history]
    for a, b in zip(w, w[1:]):
        assert b == pytest.approx(a * 1.5) or b == pytest.approx(a)
    assert w[0] == 100.0


def test_empty_cc_single_pass_equals_two_step(unconstrained_solution):
    model, two = unconstrained_solution
    sol = run_algorithm1(model, ChanceConstraintSet())
    assert sol.iterations == 1 and sol.converged
    assert sol.cost[0] == pytest.approx(two.cost[0], rel=1e-12)


def test_iteration_callback(benchmark):
    model, cc = benchmark
    seen = []
    run_algorithm1(model, cc, Algorithm1Options(max_iter=2),
                   on_iteration=lambda report: seen.append(report["iteration"]))
    assert seen == [1, 2]


@pytest.mark.parametrize("kwargs", [dict(eta=1.0), dict(tol=0.0), dict(alpha_init=-1.0),
                                    dict(max_iter=0)])
def test_options_validated(kwargs):
    with pytest.raises(ValueError):
        Algorithm1Options(**kwargs)


@pytest.mark.slow
def test_infeasible_tube_stops_at_max_iter_with_slack_floor():
    model, cc = benchmark_instance()
    cc = replace(cc, state_tube=TubeBound(0.5, 0.05))
    sol = run_algorithm1(model, cc, Algorithm1Options(max_iter=12))
    assert sol.status == "max_iter" and not sol.converged
    tail = [h.max_slack for h in sol.slack_history[-4:]]
    assert min(tail) > 1.0


def test_halfplane_through_terminal_mean_reports_partial():
    model, cc = benchmark_instance()
    cc = replace(cc, state_halfplanes=(Halfplane(STATE_A, 10.5),), include_terminal=True)
    with pytest.raises(SteeringError) as exc:
        run_algorithm1(model, cc, Algorithm1Options(max_iter=20))
    partial = exc.value.partial
    assert partial is not None and partial.status == "subproblem_failed"
    assert partial.slack_history and partial.slack_history[-1].max_slack > 1.0
