"""Federated loop behavior: local steps, selection, stages, and budgets."""

import math

import numpy as np
import pytest

from dpflsim.data import Dataset
from dpflsim.engine import (
    ClientRoundConfig,
    FederatedProblem,
    LearningRateSchedule,
    RunSettings,
    aggregate,
    client_round,
    local_gradient,
    local_loss,
    run_baseline,
    run_dpfl_bcs,
    sample_selection,
)
from dpflsim.errors import ParameterError
from dpflsim.mechanisms import ClipConfig, MechanismKind, PrivacyBudget
from dpflsim.models import LinearRegression, LogisticRegression, ModelState
from dpflsim.selection import objective_value

GM = MechanismKind.GAUSSIAN
LM = MechanismKind.LAPLACE


# ------------------------------------------------------------------- schedules

def test_learning_rate_schedules():
    const = LearningRateSchedule("constant", eta0=0.3)
    assert const.rate(1) == const.rate(100) == 0.3
    exp = LearningRateSchedule("experiment_decay", eta0=0.1, decay_horizon=10.0)
    assert exp.rate(10) == pytest.approx(0.05)
    theory = LearningRateSchedule("theory_decay", mu=0.5, gamma=3.0)
    assert theory.rate(1) == pytest.approx(2.0 / (0.5 * 4.0))
    for sched in (const, exp, theory):
        rates = [sched.rate(t) for t in range(1, 50)]
        assert all(r > 0 for r in rates)
        assert all(a >= b for a, b in zip(rates, rates[1:]))
    with pytest.raises(ParameterError):
        LearningRateSchedule("theory_decay", mu=0.0)
    with pytest.raises(ParameterError):
        LearningRateSchedule("warm_restart")


# ---------------------------------------------------------------- local pieces

def _regression_state(feature_dim=1):
    model = LinearRegression(feature_dim)
    return ModelState(model.init_weights(), model)


def test_local_loss_cap_forces_mean():
    # residuals 1 and 10 at zero weights -> per-sample losses {1, 100}
    data = Dataset(np.zeros((2, 1)), np.array([-1.0, 10.0]))
    state = _regression_state()
    assert local_loss(state, data, loss_cap=10.0) == pytest.approx(5.5)
    assert local_loss(state, data, loss_cap=1000.0) == pytest.approx(50.5)


def test_local_loss_uniform_classifier():
    model = LogisticRegression(2, 10)
    state = ModelState(model.init_weights(), model)
    data = Dataset(np.random.default_rng(0).normal(size=(8, 2)),
                   np.arange(8) % 10)
    assert local_loss(state, data, loss_cap=math.log(10.0) + 1) == pytest.approx(math.log(10.0))


def test_local_gradient_zero_rate_and_fd():
    data = Dataset(np.array([[2.0]]), np.array([3.0]))
    state = _regression_state()
    clip = ClipConfig(100.0, "l2")
    assert np.array_equal(local_gradient(state, data, 0.0, clip), np.zeros(2))
    # single sample inside the ball: g = eta * grad
    g = local_gradient(state, data, 0.5, clip)
    # d/dw of (2w + b - 3)^2 at 0 is (2*(-3)*2, 2*(-3)) = (-12, -6)
    assert np.allclose(g, 0.5 * np.array([-12.0, -6.0]), rtol=1e-12)


def test_local_gradient_boundary_norm():
    # identical feature rows give parallel per-sample gradients, both far
    # outside the ball, so the clipped mean sits exactly on the boundary
    data = Dataset(np.array([[1.0], [1.0]]), np.array([100.0, 200.0]))
    state = _regression_state()
    bound = 0.7
    g = local_gradient(state, data, 0.2, ClipConfig(bound, "l2"))
    assert np.linalg.norm(g) == pytest.approx(0.2 * bound, rel=1e-9)


# ---------------------------------------------------------------- client round

def _round_cfg(**kw):
    defaults = dict(mechanism=GM, clip=ClipConfig(1.0, "l2"), loss_cap=10.0,
                    c2=1.0, learning_rate=0.5, planned_rounds=4,
                    stage_epsilon=1.0, stage_delta=1e-3, per_round_epsilon=0.25,
                    per_round_delta=1e-3 / 4, report_losses=False,
                    noise_enabled=True)
    defaults.update(kw)
    return ClientRoundConfig(**defaults)


def test_client_round_zero_noise_exact():
    data = Dataset(np.array([[1.0], [2.0]]), np.array([1.0, -1.0]))
    state = _regression_state()
    cfg = _round_cfg(noise_enabled=False, report_losses=True)
    budget = PrivacyBudget.fresh(1.0, 1e-3)
    out = client_round(data, budget, state, 1, cfg, np.random.default_rng(0))
    g = local_gradient(state, data, 0.5, cfg.clip)
    assert np.array_equal(out.noisy_gradient, g)
    assert out.noisy_loss_current == pytest.approx(local_loss(state, data, 10.0))
    assert out.budget == budget
    assert out.epsilon_charged == 0.0


def test_client_round_loss_distortion_rule():
    # F_hat must equal (eta * F + z) / eta with z the (d)-th noise coordinate.
    data = Dataset(np.array([[0.0]]), np.array([-math.sqrt(2.0)]))
    state = _regression_state()
    cfg = _round_cfg(report_losses=True)
    budget = PrivacyBudget.fresh(1.0, 1e-3)
    out = client_round(data, budget, state, 1, cfg, np.random.default_rng(77))
    f = local_loss(state, data, 10.0)  # = 2.0
    assert f == pytest.approx(2.0)
    # replay the identical stream to recover the drawn noise
    noise = np.random.default_rng(77).normal(0.0, out.noise_scale, size=4)
    eta = cfg.learning_rate
    assert out.noisy_loss_current == pytest.approx((eta * f + noise[2]) / eta)
    g = local_gradient(state, data, eta, cfg.clip)
    f_updated = local_loss(state.replaced(state.weights - g), data, 10.0)
    assert out.noisy_loss_updated == pytest.approx((eta * f_updated + noise[3]) / eta)


def test_client_round_distortion_hand_example():
    # eta=0.5, F=2.0, z=0.1 -> (1.0 + 0.1) / 0.5 = 2.2
    assert (0.5 * 2.0 + 0.1) / 0.5 == pytest.approx(2.2)


def test_client_round_refuses_when_exhausted():
    data = Dataset(np.array([[1.0]]), np.array([1.0]))
    state = _regression_state()
    spent = PrivacyBudget(1.0, 1e-3, 0.0, 0.0)
    assert client_round(data, spent, state, 1, _round_cfg(),
                        np.random.default_rng(0)) is None
    # diagnostics mode ignores the ledger
    out = client_round(data, spent, state, 1, _round_cfg(noise_enabled=False),
                       np.random.default_rng(0))
    assert out is not None


def test_client_round_monte_carlo_unbiased():
    data = Dataset(np.array([[1.0], [2.0]]), np.array([0.5, -0.5]))
    state = _regression_state()
    cfg = _round_cfg()
    g = local_gradient(state, data, cfg.learning_rate, cfg.clip)
    budget = PrivacyBudget.fresh(1.0, 1e-3)
    n = 10**4
    total = np.zeros_like(g)
    scale = None
    for i in range(n):
        out = client_round(data, budget, state, 1, cfg, np.random.default_rng(1000 + i))
        total += out.noisy_gradient
        scale = out.noise_scale
    mean = total / n
    tol = 3.0 * scale / math.sqrt(n)
    assert np.all(np.abs(mean - g) <= tol)


# ------------------------------------------------------------------ aggregation

def test_aggregate_examples():
    got = aggregate([np.array([1.0, 1.0]), np.array([3.0, 3.0])], 2)
    assert np.array_equal(got, np.array([2.0, 2.0]))
    assert np.array_equal(aggregate([np.array([5.0])], 1), np.array([5.0]))
    assert np.array_equal(aggregate([np.zeros(3), np.zeros(3)], 2), np.zeros(3))
    # nominal-K divisor shrinks the update when responders are missing
    short = aggregate([np.array([3.0, 3.0])], 2)
    assert np.array_equal(short, np.array([1.5, 1.5]))
    by_count = aggregate([np.array([3.0, 3.0])], 2, divide_by_count=True)
    assert np.array_equal(by_count, np.array([3.0, 3.0]))
    with pytest.raises(ParameterError):
        aggregate([], 2)


# -------------------------------------------------------------------- sampling

def test_sample_selection_degenerate_weight():
    p = np.array([1.0, 0.0, 0.0])
    for seed in range(20):
        assert sample_selection(p, [0, 1, 2], 1, np.random.default_rng(seed)) == [0]


def test_sample_selection_small_candidate_set():
    p = np.full(6, 1 / 6)
    assert sample_selection(p, [4, 2], 5, np.random.default_rng(0)) == [2, 4]
    assert sample_selection(p, [], 3, np.random.default_rng(0)) == []


def test_sample_selection_determinism_and_distinctness():
    p = np.array([0.4, 0.3, 0.2, 0.05, 0.05])
    a = sample_selection(p, range(5), 3, np.random.default_rng(11))
    b = sample_selection(p, range(5), 3, np.random.default_rng(11))
    assert a == b
    assert len(set(a)) == 3


def test_sample_selection_uniform_frequency():
    n, k, rounds = 6, 2, 20000
    p = np.full(n, 1.0 / n)
    counts = np.zeros(n)
    for t in range(rounds):
        for idx in sample_selection(p, range(n), k, np.random.default_rng(t)):
            counts[idx] += 1
    freq = counts / rounds
    expect = k / n
    se = math.sqrt(expect * (1 - expect) / rounds)
    assert np.all(np.abs(freq - expect) <= 3 * se)


# ------------------------------------------------------------------- full runs

def _problem(num_clients=4, eps=None, samples_per=30, seed=0, feature_dim=2):
    rng = np.random.default_rng(seed)
    model = LinearRegression(feature_dim)
    w_true = rng.normal(size=feature_dim + 1)
    clients = []
    for _ in range(num_clients):
        X = rng.normal(size=(samples_per, feature_dim))
        y = X @ w_true[:-1] + w_true[-1] + 0.05 * rng.normal(size=samples_per)
        clients.append(Dataset(X, y))
    Xt = rng.normal(size=(100, feature_dim))
    yt = Xt @ w_true[:-1] + w_true[-1] + 0.05 * rng.normal(size=100)
    eps = eps if eps is not None else [1.0] * num_clients
    budgets = [PrivacyBudget.fresh(e, 1e-4) for e in eps]
    return FederatedProblem(model, clients, budgets, Dataset(Xt, yt))


def _settings(**kw):
    defaults = dict(mechanism=GM, clients_per_round=2, total_rounds=10,
                    estimation_rounds=3, clip_bound=1.0, loss_cap=10.0,
                    schedule=LearningRateSchedule("experiment_decay", eta0=0.05))
    defaults.update(kw)
    return RunSettings(**defaults)


def test_run_determinism():
    problem = _problem()
    settings = _settings()
    a = run_dpfl_bcs(problem, settings, seed=5)
    b = run_dpfl_bcs(problem, settings, seed=5)
    assert [r.test_loss for r in a.rounds] == [r.test_loss for r in b.rounds]
    assert np.array_equal(a.final_state.weights, b.final_state.weights)
    c = run_dpfl_bcs(problem, settings, seed=6)
    assert [r.test_loss for r in a.rounds] != [r.test_loss for r in c.rounds]


def test_zero_noise_uniform_plan_reduces_to_fedsgd():
    problem = _problem()
    settings = _settings(dp_enabled=False, force_uniform_plan=True,
                         record_weights=True)
    bcs = run_dpfl_bcs(problem, settings, seed=3)
    fed = run_baseline("fedsgd", problem, settings, seed=3)
    assert np.array_equal(bcs.weight_trajectory, fed.weight_trajectory)
    assert [r.selected for r in bcs.rounds] == [r.selected for r in fed.rounds]


def test_stage_transition_and_plan_adherence():
    problem = _problem(num_clients=5)
    settings = _settings(clients_per_round=2, total_rounds=12, estimation_rounds=4)
    res = run_dpfl_bcs(problem, settings, seed=9)
    stages = [r.stage for r in res.rounds]
    assert stages == [1] * 4 + [2] * 8
    assert res.plan_stage2 is not None
    assert res.estimated_params is not None
    # losses reported only during stage one
    assert all(r.losses is not None for r in res.rounds[:4])
    assert all(r.losses is None for r in res.rounds[4:])
    assert all(len(r.selected) <= settings.clients_per_round for r in res.rounds)
    for entry in res.ledger:
        assert entry.stage1_participations <= entry.stage1_planned
        if entry.stage2_planned is not None:
            assert entry.stage2_participations <= entry.stage2_planned


def test_budget_safety_and_slices():
    problem = _problem(num_clients=4, eps=[0.3, 0.5, 1.0, 2.0])
    settings = _settings(total_rounds=20, estimation_rounds=4)
    res = run_dpfl_bcs(problem, settings, seed=1)
    for entry in res.ledger:
        assert entry.epsilon_consumed <= entry.epsilon_total + 1e-9
        assert abs(entry.epsilon_consumed - entry.slice_sum) <= 1e-9
        assert not entry.trained_after_exhaustion
    # every recorded budget snapshot stays within totals
    for record in res.rounds:
        if record.budget_remaining is not None:
            for cid, rem in record.budget_remaining.items():
                assert -1e-12 <= rem <= res.ledger[cid].epsilon_total + 1e-12


def test_stage_two_slices_use_remaining_budget():
    problem = _problem(num_clients=4)
    settings = _settings(total_rounds=12, estimation_rounds=3)
    res = run_dpfl_bcs(problem, settings, seed=2)
    for entry in res.ledger:
        if entry.stage2_planned and entry.stage2_per_round_epsilon:
            expected = entry.epsilon_remaining_at_replan / entry.stage2_planned
            assert entry.stage2_per_round_epsilon == pytest.approx(expected)


def test_heterogeneous_budgets_favor_large_epsilon():
    # identical data, epsilon 0.1 vs 10: the rich client must get strictly
    # more stage-two rounds, and the returned plan must match enumeration.
    rng = np.random.default_rng(4)
    X = rng.normal(size=(40, 2))
    y = X @ np.array([1.0, -2.0]) + 0.5
    data = Dataset(X, y)
    model = LinearRegression(2)
    problem = FederatedProblem(
        model, [data, data],
        [PrivacyBudget.fresh(0.1, 1e-4), PrivacyBudget.fresh(10.0, 1e-4)],
        data)
    settings = _settings(clients_per_round=1, total_rounds=10, estimation_rounds=4)
    res = run_dpfl_bcs(problem, settings, seed=8)
    plan = res.plan_stage2
    assert plan is not None
    assert plan.counts[1] > plan.counts[0]
    # enumeration cross-check on the integer problem the solver saw
    params = res.estimated_params
    total = plan.counts.sum()
    best = None
    for a in range(total + 1):
        counts = np.array([a, total - a])
        j = objective_value(counts, params.phi_n, params.gamma_hat_n,
                            params.omega_a, params.omega_b, 1)
        best = j if best is None else min(best, j)
    j_plan = objective_value(plan.counts, params.phi_n, params.gamma_hat_n,
                             params.omega_a, params.omega_b, 1)
    assert j_plan <= 1.02 * best + 1e-12


def test_uniform_dp_huge_budget_approaches_fedsgd():
    # In the large-budget limit the noise vanishes; only the participation
    # caps (T_n = KT/N) remain, and once both runs have converged they land
    # on final losses within 1e-3 of each other.
    problem = _problem(num_clients=4, eps=[1e6] * 4, samples_per=60)
    settings = _settings(total_rounds=120, estimation_rounds=3,
                         schedule=LearningRateSchedule("experiment_decay",
                                                       eta0=0.1,
                                                       decay_horizon=120.0))
    dp = run_baseline("uniform_dp", problem, settings, seed=12)
    fed = run_baseline("fedsgd", problem, settings, seed=12)
    assert abs(dp.final_test_loss - fed.final_test_loss) < 1e-3


def test_weiavg_equal_budgets_matches_uniform_dp():
    # Equal budgets collapse the epsilon weights to 1/K whenever a full K
    # clients respond. With accounting off no client is ever capped, so the
    # whole trajectories coincide.
    problem = _problem(num_clients=4, eps=[2.0] * 4)
    settings = _settings(total_rounds=10, estimation_rounds=3, dp_enabled=False)
    wa = run_baseline("weiavg", problem, settings, seed=21)
    ud = run_baseline("uniform_dp", problem, settings, seed=21)
    assert [r.test_loss for r in wa.rounds] == pytest.approx(
        [r.test_loss for r in ud.rounds], rel=1e-12)
    # with accounting on, the runs agree exactly while |S_t| = K; they may
    # part ways once slot caps shrink a round below K responders
    settings_dp = _settings(total_rounds=10, estimation_rounds=3)
    wa = run_baseline("weiavg", problem, settings_dp, seed=21)
    ud = run_baseline("uniform_dp", problem, settings_dp, seed=21)
    k = settings_dp.clients_per_round
    full = 0
    for a, b in zip(wa.rounds, ud.rounds):
        if len(a.selected) < k or len(b.selected) < k:
            break
        full += 1
    assert full >= 3
    for a, b in zip(wa.rounds[:full], ud.rounds[:full]):
        assert a.selected == b.selected
        assert a.test_loss == pytest.approx(b.test_loss, rel=1e-12)


def test_fedsgd_mean_training_loss_decreases():
    curves = []
    for seed in range(5):
        problem = _problem(num_clients=4, samples_per=50, seed=100 + seed)
        settings = _settings(total_rounds=15, estimation_rounds=3,
                             schedule=LearningRateSchedule("experiment_decay",
                                                           eta0=0.08),
                             record_weights=True)
        res = run_baseline("fedsgd", problem, settings, seed=seed)
        model = problem.model
        X = np.vstack([d.features for d in problem.client_data])
        y = np.concatenate([d.targets for d in problem.client_data])
        losses = [model.per_sample_losses(w, X, y).mean()
                  for w in res.weight_trajectory]
        curves.append(losses)
    mean_curve = np.mean(curves, axis=0)
    assert np.all(np.diff(mean_curve) <= 1e-12)


def test_run_validation_errors():
    problem = _problem()
    with pytest.raises(ParameterError):
        run_dpfl_bcs(problem, _settings(estimation_rounds=1), seed=0)
    with pytest.raises(ParameterError):
        run_baseline("adamw", problem, _settings(), seed=0)
    with pytest.raises(ParameterError):
        _settings(total_rounds=3, estimation_rounds=3)
