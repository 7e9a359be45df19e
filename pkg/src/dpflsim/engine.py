"""Federated training loops with per-round DP noise.

One round: the server samples K clients from the candidate set by plan
probability, each selected client takes one clipped-SGD step on its data,
noises the step (and during stage one, two distorted loss values), and the
server applies the mean update divided by the nominal K.

The two-stage algorithm runs an approximate plan for the first T0 rounds while
collecting noisy losses, then estimates the convergence-bound parameters once
and switches to the plan that minimizes the bound on the remaining horizon
with the remaining budgets. Baselines run a single uniform stage.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ParameterError
from .mechanisms import (
    ClipConfig,
    MechanismKind,
    NoiseSpec,
    PrivacyBudget,
    clip_gradient_matrix,
    consume_budget,
    gaussian_sigma,
    gradient_sensitivity,
    laplace_scale,
    sample_noise,
)
from .models import LinearRegression, LogisticRegression, ModelState
from .selection import (
    ClientMeta,
    EstimatedParams,
    SelectionPlan,
    StageOneLog,
    approximate_plan,
    compute_phi_lambda,
    estimate_gamma_n,
    estimate_problem_params,
    estimate_rho_min,
    largest_remainder_round,
    observed_stage_loss,
    optimal_plan,
    winsorize_upper,
)

logger = logging.getLogger(__name__)

BASELINE_KINDS = ("fedsgd", "uniform_dp", "weiavg")
ALGORITHMS = ("dpfl_bcs",) + BASELINE_KINDS

# How often per-client remaining budgets are snapshotted into round records.
BUDGET_SNAPSHOT_EVERY = 10


def _stream(seed: int, *key) -> np.random.Generator:
    """Independent generator derived from (master seed, domain key...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(k) for k in key]))


@dataclass(frozen=True)
class LearningRateSchedule:
    """eta_t for t >= 1: constant eta0, eta0/(1 + t/h), or 2/(mu (t + gamma))."""

    kind: str
    eta0: float = 0.05
    decay_horizon: float = 200.0
    mu: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "experiment_decay", "theory_decay"):
            raise ParameterError(f"unknown schedule kind {self.kind!r}")
        if self.kind in ("constant", "experiment_decay") and not self.eta0 > 0:
            raise ParameterError("eta0 must be positive")
        if self.kind == "experiment_decay" and not self.decay_horizon > 0:
            raise ParameterError("decay_horizon must be positive")
        if self.kind == "theory_decay":
            if not self.mu > 0:
                raise ParameterError("theory_decay needs mu > 0")
            if self.gamma < 0:
                raise ParameterError("theory_decay needs gamma >= 0")

    def rate(self, t: int) -> float:
        if t < 1:
            raise ParameterError(f"round index must be >= 1, got {t}")
        if self.kind == "constant":
            return self.eta0
        if self.kind == "experiment_decay":
            return self.eta0 / (1.0 + t / self.decay_horizon)
        return 2.0 / (self.mu * (t + self.gamma))


@dataclass(frozen=True)
class RunSettings:
    """Everything a training loop needs besides the data and budgets."""

    mechanism: MechanismKind
    clients_per_round: int
    total_rounds: int
    estimation_rounds: int
    clip_bound: float
    loss_cap: float
    schedule: LearningRateSchedule
    c2: float = 1.0
    momentum: float = 0.0
    weight_decay: float = 0.0
    aggregate_by_count: bool = False
    # dp_enabled=False zeroes all noise AND disables budget accounting and
    # participation caps, so the biased algorithm under a uniform plan reduces
    # bit-exactly to FedSGD (diagnostic mode, not a privacy mode).
    dp_enabled: bool = True
    force_uniform_plan: bool = False
    record_weights: bool = False
    winsorize_percentile: float = 95.0

    def __post_init__(self):
        if not isinstance(self.mechanism, MechanismKind):
            raise ParameterError("mechanism must be a MechanismKind")
        if self.clients_per_round < 1:
            raise ParameterError("clients_per_round must be >= 1")
        if self.total_rounds < 1:
            raise ParameterError("total_rounds must be >= 1")
        if not 1 <= self.estimation_rounds < self.total_rounds:
            raise ParameterError(
                f"need 1 <= estimation_rounds < total_rounds, got "
                f"{self.estimation_rounds} vs {self.total_rounds}")
        if self.clip_bound <= 0:
            raise ParameterError("clip_bound must be positive")
        if self.loss_cap < 0:
            raise ParameterError("loss_cap must be nonnegative")
        if self.c2 <= 0:
            raise ParameterError("c2 must be positive")
        if not 0 <= self.momentum < 1:
            raise ParameterError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ParameterError("weight_decay must be nonnegative")
        if not 0 < self.winsorize_percentile <= 100:
            raise ParameterError("winsorize_percentile must lie in (0, 100]")

    @property
    def clip(self) -> ClipConfig:
        return ClipConfig.for_mechanism(self.mechanism, self.clip_bound)


@dataclass
class FederatedProblem:
    """A model kind, partitioned client data, budgets, and the server test set."""

    model: LinearRegression | LogisticRegression
    client_data: list
    budgets: list
    test_data: Dataset

    def __post_init__(self):
        if len(self.client_data) == 0:
            raise ParameterError("need at least one client")
        if len(self.client_data) != len(self.budgets):
            raise ParameterError("client_data and budgets length mismatch")
        for i, d in enumerate(self.client_data):
            if d.feature_dim != self.model.feature_dim:
                raise ParameterError(
                    f"client {i} feature_dim {d.feature_dim} != model {self.model.feature_dim}")

    @property
    def num_clients(self) -> int:
        return len(self.client_data)

    @property
    def metas(self) -> list:
        return [
            ClientMeta(i, b.epsilon, b.delta, d.num_samples)
            for i, (b, d) in enumerate(zip(self.budgets, self.client_data))
        ]


@dataclass(frozen=True)
class RoundRecord:
    t: int
    stage: int
    selected: tuple
    losses: dict | None
    gradient_norms: dict
    noise_scales: dict
    counters: np.ndarray
    test_loss: float
    test_accuracy: float | None
    budget_remaining: dict | None


@dataclass
class ClientLedger:
    """Post-run accounting for one client."""

    client_id: int
    epsilon_total: float
    delta_total: float
    epsilon_remaining: float
    delta_remaining: float
    epsilon_consumed: float
    slice_sum: float
    participations: int
    stage1_participations: int
    stage2_participations: int
    stage1_planned: int
    stage2_planned: int | None
    stage2_per_round_epsilon: float | None
    epsilon_remaining_at_replan: float | None
    exhausted: bool
    trained_after_exhaustion: bool


@dataclass
class RunResult:
    algorithm: str
    seed: int
    rounds: list
    final_state: ModelState
    final_test_loss: float
    final_test_accuracy: float | None
    plan_stage1: SelectionPlan
    plan_stage2: SelectionPlan | None
    estimated_params: EstimatedParams | None
    ledger: list
    ended_early: bool
    settings: RunSettings
    metas: list
    weight_trajectory: np.ndarray | None = None


def local_loss(model: ModelState, data: Dataset, loss_cap: float) -> float:
    """Mean per-sample loss with each per-sample loss capped to [0, loss_cap]."""
    if data.feature_dim != model.model_kind.feature_dim:
        raise ParameterError(
            f"data feature_dim {data.feature_dim} != model {model.model_kind.feature_dim}")
    losses = model.model_kind.per_sample_losses(model.weights, data.features, data.targets)
    return float(np.mean(np.clip(losses, 0.0, loss_cap)))


def local_gradient(model: ModelState, data: Dataset, learning_rate: float,
                   clip: ClipConfig) -> np.ndarray:
    """eta_t times the mean of per-sample-clipped gradients; norm <= eta_t * bound."""
    if data.num_samples == 0:
        raise ParameterError("empty dataset")
    if data.feature_dim != model.model_kind.feature_dim:
        raise ParameterError(
            f"data feature_dim {data.feature_dim} != model {model.model_kind.feature_dim}")
    grads = model.model_kind.per_sample_gradients(model.weights, data.features, data.targets)
    clipped = clip_gradient_matrix(grads, clip)
    return learning_rate * clipped.mean(axis=0)


@dataclass(frozen=True)
class ClientRoundConfig:
    """Per-round stage parameters one client needs."""

    mechanism: MechanismKind
    clip: ClipConfig
    loss_cap: float
    c2: float
    learning_rate: float
    planned_rounds: int
    stage_epsilon: float
    stage_delta: float
    per_round_epsilon: float
    per_round_delta: float
    report_losses: bool
    noise_enabled: bool = True


@dataclass(frozen=True)
class ClientRoundResult:
    noisy_gradient: np.ndarray
    noisy_loss_current: float | None
    noisy_loss_updated: float | None
    budget: PrivacyBudget
    exhausted: bool
    noise_scale: float
    epsilon_charged: float
    delta_charged: float


def client_round(data: Dataset, budget: PrivacyBudget, model: ModelState, t: int,
                 cfg: ClientRoundConfig, rng: np.random.Generator,
                 gradient_override: np.ndarray | None = None) -> ClientRoundResult | None:
    """One client's contribution to round t; None refuses when exhausted.

    During a loss-reporting round the noise vector has d+2 coordinates drawn
    at the joint (gradient + two losses) sensitivity; the last two distort
    eta_t * F at the incoming and the locally updated model, then divide by
    eta_t. Otherwise d coordinates at the gradient-only sensitivity.
    """
    if cfg.noise_enabled and budget.exhausted:
        return None
    if gradient_override is not None:
        g = np.asarray(gradient_override, dtype=float)
    else:
        g = local_gradient(model, data, cfg.learning_rate, cfg.clip)
    d = len(g)
    sens = gradient_sensitivity(cfg.mechanism, cfg.learning_rate, cfg.clip.bound,
                                data.num_samples, cfg.loss_cap, cfg.report_losses)
    if cfg.noise_enabled:
        if cfg.mechanism is MechanismKind.GAUSSIAN:
            scale = gaussian_sigma(sens, cfg.stage_epsilon, cfg.stage_delta,
                                   cfg.planned_rounds, cfg.c2)
        else:
            scale = laplace_scale(sens, cfg.stage_epsilon, cfg.planned_rounds)
    else:
        scale = 0.0
    dim = d + 2 if cfg.report_losses else d
    if scale > 0.0:
        spec = NoiseSpec(cfg.mechanism, sens, scale, cfg.per_round_epsilon,
                         cfg.per_round_delta, cfg.planned_rounds)
        noise = sample_noise(spec, dim, rng)
    else:
        noise = np.zeros(dim)
    noisy_gradient = g + noise[:d]

    loss_current = loss_updated = None
    if cfg.report_losses:
        eta = cfg.learning_rate
        if eta <= 0:
            raise ParameterError("loss distortion needs a positive learning rate")
        f_current = local_loss(model, data, cfg.loss_cap)
        local_state = model.replaced(model.weights - g)
        f_updated = local_loss(local_state, data, cfg.loss_cap)
        loss_current = (eta * f_current + noise[d]) / eta
        loss_updated = (eta * f_updated + noise[d + 1]) / eta

    if cfg.noise_enabled:
        new_budget, exhausted = consume_budget(budget, cfg.per_round_epsilon,
                                               cfg.per_round_delta)
        eps_charged = budget.epsilon_remaining - new_budget.epsilon_remaining
        delta_charged = budget.delta_remaining - new_budget.delta_remaining
    else:
        new_budget, exhausted = budget, False
        eps_charged = delta_charged = 0.0
    return ClientRoundResult(noisy_gradient, loss_current, loss_updated, new_budget,
                             exhausted, scale, eps_charged, delta_charged)


def aggregate(gradients: list, k: int, divide_by_count: bool = False) -> np.ndarray:
    """Sum of noisy gradients over the nominal K (or the responder count)."""
    if not gradients:
        raise ParameterError("cannot aggregate an empty gradient list")
    if k < 1:
        raise ParameterError("k must be >= 1")
    divisor = len(gradients) if divide_by_count else k
    return np.sum(gradients, axis=0) / divisor


def sample_selection(probabilities: np.ndarray, candidates, k: int,
                     rng: np.random.Generator) -> list:
    """Weighted sampling without replacement from the candidate set.

    Weights renormalize over the candidates each draw. If the candidate set
    has at most k members they are all returned; an empty set yields an empty
    round. Returned ids are sorted.
    """
    if k < 1:
        raise ParameterError("k must be >= 1")
    probabilities = np.asarray(probabilities, dtype=float)
    cand = sorted(int(n) for n in candidates)
    if not cand:
        return []
    if len(cand) <= k:
        return cand
    ids = np.array(cand)
    weights = probabilities[ids].astype(float).copy()
    if np.any(weights < 0):
        raise ParameterError("selection probabilities must be nonnegative")
    positive = ids[weights > 0]
    if len(positive) <= k:
        return sorted(int(n) for n in positive)
    chosen = []
    for _ in range(k):
        total = weights.sum()
        r = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(weights), r, side="right"))
        idx = min(idx, len(ids) - 1)
        chosen.append(int(ids[idx]))
        ids = np.delete(ids, idx)
        weights = np.delete(weights, idx)
    return sorted(chosen)


@dataclass
class _ClientRuntime:
    data: Dataset
    budget: PrivacyBudget
    velocity: np.ndarray | None = None
    planned: int = 0
    stage_epsilon: float = 0.0
    stage_delta: float = 0.0
    slice_epsilon: float = 0.0
    slice_delta: float = 0.0
    stage_participations: int = 0
    stage1_participations: int = 0
    stage2_participations: int = 0
    stage1_planned: int = 0
    stage2_planned: int | None = None
    stage2_slice_epsilon: float | None = None
    epsilon_at_replan: float | None = None
    slice_sum: float = 0.0
    exhausted: bool = False
    trained_after_exhaustion: bool = False


def _uniform_plan(num_clients: int, horizon: int, k: int) -> SelectionPlan:
    total = horizon * k
    counts = largest_remainder_round(np.full(num_clients, total / num_clients), total)
    return SelectionPlan.from_counts(counts, horizon, k)


def _install_stage(runtimes: list, plan: SelectionPlan, dp: bool) -> None:
    for rt, planned in zip(runtimes, plan.counts):
        rt.planned = int(planned)
        rt.stage_participations = 0
        if dp and planned > 0 and not rt.exhausted:
            rt.stage_epsilon = rt.budget.epsilon_remaining
            rt.stage_delta = rt.budget.delta_remaining
            rt.slice_epsilon = rt.stage_epsilon / planned
            rt.slice_delta = rt.stage_delta / planned


def _eligible(runtimes: list, dp: bool) -> list:
    if not dp:
        return list(range(len(runtimes)))
    return [i for i, rt in enumerate(runtimes)
            if not rt.exhausted and rt.stage_participations < rt.planned]


def run_dpfl_bcs(problem: FederatedProblem, settings: RunSettings, seed: int,
                 on_round=None) -> RunResult:
    """Two-stage biased-selection run."""
    if settings.estimation_rounds < 2:
        raise ParameterError(
            "the estimators need estimation_rounds >= 2 "
            "(the skew estimate divides by estimation_rounds - 1)")
    return _run_loop(problem, settings, seed, "dpfl_bcs", on_round)


def run_baseline(kind: str, problem: FederatedProblem, settings: RunSettings, seed: int,
                 on_round=None) -> RunResult:
    """Single-stage reference run: fedsgd, uniform_dp, or weiavg."""
    if kind not in BASELINE_KINDS:
        raise ParameterError(f"unknown baseline {kind!r}; expected one of {BASELINE_KINDS}")
    return _run_loop(problem, settings, seed, kind, on_round)


def _run_loop(problem: FederatedProblem, settings: RunSettings, seed: int,
              algorithm: str, on_round=None) -> RunResult:
    if int(seed) < 0:
        raise ParameterError("seed must be nonnegative")
    model = problem.model
    num_clients = problem.num_clients
    k = settings.clients_per_round
    total_rounds = settings.total_rounds
    t0 = settings.estimation_rounds
    if k > num_clients:
        raise ParameterError(f"clients_per_round {k} exceeds num_clients {num_clients}")
    mech = settings.mechanism
    z = mech.noise_exponent
    two_stage = algorithm == "dpfl_bcs"
    dp = settings.dp_enabled and algorithm != "fedsgd"
    weighted_agg = algorithm == "weiavg"
    metas = problem.metas
    clip = settings.clip

    runtimes = [_ClientRuntime(data=d, budget=b)
                for d, b in zip(problem.client_data, problem.budgets)]

    if two_stage and not settings.force_uniform_plan:
        _, phi_initial = compute_phi_lambda(mech, model.dim, settings.clip_bound,
                                            settings.c2, metas)
        plan1 = approximate_plan(phi_initial, k * total_rounds, z, per_round_selected=k)
    else:
        plan1 = _uniform_plan(num_clients, total_rounds, k)
    uniform_probs = np.full(num_clients, 1.0 / num_clients)
    if two_stage and not settings.force_uniform_plan:
        select_probs = plan1.probabilities
    else:
        select_probs = uniform_probs
    _install_stage(runtimes, plan1, dp)
    for rt in runtimes:
        rt.stage1_planned = rt.planned

    state = ModelState(model.init_weights(), model)
    trajectory = [state.weights.copy()] if settings.record_weights else None
    records: list = []
    counters = np.zeros(num_clients, dtype=int)
    stage1_selected: list = []
    stage1_current: list = []
    stage1_updated: list = []
    plan2 = None
    est_params = None
    ended_early = False
    use_momentum = settings.momentum > 0 or settings.weight_decay > 0

    for t in range(1, total_rounds + 1):
        stage = 1 if (not two_stage or t <= t0) else 2
        eligible = _eligible(runtimes, dp)
        if not eligible:
            logger.info("round %d: candidate set empty, ending run early", t)
            ended_early = True
            break
        selected = sample_selection(select_probs, eligible, k, _stream(seed, 1, t))
        if not selected:
            logger.info("round %d: no selectable client, ending run early", t)
            ended_early = True
            break
        eta = settings.schedule.rate(t)
        report_losses = two_stage and t <= t0

        round_results: dict[int, ClientRoundResult] = {}
        for n in selected:
            rt = runtimes[n]
            was_exhausted = rt.exhausted
            cfg = ClientRoundConfig(
                mechanism=mech, clip=clip, loss_cap=settings.loss_cap, c2=settings.c2,
                learning_rate=eta, planned_rounds=max(1, rt.planned),
                stage_epsilon=rt.stage_epsilon, stage_delta=rt.stage_delta,
                per_round_epsilon=rt.slice_epsilon, per_round_delta=rt.slice_delta,
                report_losses=report_losses, noise_enabled=dp)
            override = None
            if use_momentum:
                base = local_gradient(state, rt.data, 1.0, clip)
                if settings.weight_decay > 0:
                    base = base + settings.weight_decay * state.weights
                if rt.velocity is None:
                    rt.velocity = np.zeros_like(base)
                rt.velocity = settings.momentum * rt.velocity + base
                override = eta * rt.velocity
            result = client_round(rt.data, rt.budget, state, t, cfg,
                                  _stream(seed, 2, n, t), gradient_override=override)
            if result is None:
                logger.warning("round %d: client %d refused (budget exhausted)", t, n)
                continue
            if was_exhausted:
                rt.trained_after_exhaustion = True
            rt.budget = result.budget
            if dp:
                rt.exhausted = rt.exhausted or result.exhausted
            rt.slice_sum += result.epsilon_charged
            rt.stage_participations += 1
            if stage == 1:
                rt.stage1_participations += 1
            else:
                rt.stage2_participations += 1
            counters[n] += 1
            round_results[n] = result

        responders = sorted(round_results)
        if responders:
            grads = [round_results[n].noisy_gradient for n in responders]
            if weighted_agg:
                eps = np.array([metas[n].epsilon for n in responders])
                update = np.sum([w * g for w, g in zip(eps / eps.sum(), grads)], axis=0)
            else:
                update = aggregate(grads, k, settings.aggregate_by_count)
            state = state.replaced(state.weights - update)
        else:
            logger.warning("round %d: no responders, aggregation skipped", t)
        if trajectory is not None:
            trajectory.append(state.weights.copy())

        test_loss, test_accuracy = model.metrics(
            state.weights, problem.test_data.features, problem.test_data.targets)
        losses = None
        if report_losses:
            stage1_selected.append(tuple(responders))
            stage1_current.append({n: round_results[n].noisy_loss_current for n in responders})
            stage1_updated.append({n: round_results[n].noisy_loss_updated for n in responders})
            losses = {n: (round_results[n].noisy_loss_current,
                          round_results[n].noisy_loss_updated) for n in responders}
        budget_remaining = None
        if dp and t % BUDGET_SNAPSHOT_EVERY == 0:
            budget_remaining = {i: rt.budget.epsilon_remaining
                                for i, rt in enumerate(runtimes)}
        record = RoundRecord(
            t=t, stage=stage, selected=tuple(responders), losses=losses,
            gradient_norms={n: float(np.linalg.norm(round_results[n].noisy_gradient))
                            for n in responders},
            noise_scales={n: round_results[n].noise_scale for n in responders},
            counters=counters.copy(), test_loss=test_loss, test_accuracy=test_accuracy,
            budget_remaining=budget_remaining)
        records.append(record)
        logger.info("round %d stage %d |S|=%d test_loss=%.6f", t, stage,
                    len(responders), test_loss)
        if on_round is not None:
            on_round(record)

        if two_stage and t == t0:
            plan2, est_params, select_probs = _replan(
                problem, settings, runtimes, metas,
                StageOneLog(tuple(stage1_selected), tuple(stage1_current),
                            tuple(stage1_updated)),
                dp, uniform_probs)
            if plan2 is None:
                logger.info("no client can fund stage two, ending run early")
                ended_early = True
                break
            _install_stage(runtimes, plan2, dp)
            for rt in runtimes:
                rt.stage2_planned = rt.planned
                rt.stage2_slice_epsilon = rt.slice_epsilon if rt.planned > 0 else None
                rt.epsilon_at_replan = rt.budget.epsilon_remaining

    if records:
        final_loss = records[-1].test_loss
        final_accuracy = records[-1].test_accuracy
    else:
        final_loss, final_accuracy = model.metrics(
            state.weights, problem.test_data.features, problem.test_data.targets)

    ledger = []
    for i, rt in enumerate(runtimes):
        b = rt.budget
        ledger.append(ClientLedger(
            client_id=i, epsilon_total=b.epsilon, delta_total=b.delta,
            epsilon_remaining=b.epsilon_remaining, delta_remaining=b.delta_remaining,
            epsilon_consumed=b.epsilon - b.epsilon_remaining, slice_sum=rt.slice_sum,
            participations=rt.stage1_participations + rt.stage2_participations,
            stage1_participations=rt.stage1_participations,
            stage2_participations=rt.stage2_participations,
            stage1_planned=rt.stage1_planned, stage2_planned=rt.stage2_planned,
            stage2_per_round_epsilon=rt.stage2_slice_epsilon,
            epsilon_remaining_at_replan=rt.epsilon_at_replan,
            exhausted=rt.exhausted,
            trained_after_exhaustion=rt.trained_after_exhaustion))

    return RunResult(
        algorithm=algorithm, seed=int(seed), rounds=records, final_state=state,
        final_test_loss=final_loss, final_test_accuracy=final_accuracy,
        plan_stage1=plan1, plan_stage2=plan2, estimated_params=est_params,
        ledger=ledger, ended_early=ended_early, settings=settings, metas=metas,
        weight_trajectory=np.array(trajectory) if trajectory is not None else None)


def _replan(problem: FederatedProblem, settings: RunSettings, runtimes: list,
            metas: list, log: StageOneLog, dp: bool, uniform_probs: np.ndarray):
    """Estimate bound parameters and solve the stage-two plan at t = T0."""
    model = problem.model
    mech = settings.mechanism
    z = mech.noise_exponent
    k = settings.clients_per_round
    num_clients = problem.num_clients
    t0 = settings.estimation_rounds
    horizon = settings.total_rounds - t0

    lam, phi_initial = compute_phi_lambda(mech, model.dim, settings.clip_bound,
                                          settings.c2, metas)
    gamma_hat = estimate_gamma_n(log, num_clients)
    rho_hat = estimate_rho_min(log, k, t0)
    observed = observed_stage_loss(log, t0)
    est = estimate_problem_params(observed, log, lam, phi_initial, gamma_hat,
                                  rho_hat, k, z)

    if settings.force_uniform_plan:
        plan2 = _uniform_plan(num_clients, horizon, k)
        return plan2, est, uniform_probs

    if dp:
        active = [i for i, rt in enumerate(runtimes)
                  if not rt.exhausted
                  and (mech is MechanismKind.LAPLACE or rt.budget.delta_remaining > 0)]
    else:
        active = list(range(num_clients))
    if not active:
        return None, est, uniform_probs

    if dp:
        remaining_metas = [
            ClientMeta(i, runtimes[i].budget.epsilon_remaining,
                       runtimes[i].budget.delta_remaining, runtimes[i].data.num_samples)
            for i in active
        ]
        _, phi_active = compute_phi_lambda(mech, model.dim, settings.clip_bound,
                                           settings.c2, remaining_metas)
    else:
        phi_active = phi_initial[active]
    gamma_for_plan = winsorize_upper(gamma_hat, settings.winsorize_percentile)
    from dataclasses import replace as _dc_replace
    params_active = _dc_replace(est, phi_n=phi_active, gamma_hat_n=gamma_for_plan[active])
    sub = optimal_plan(params_active, horizon, k, z)
    counts = np.zeros(num_clients, dtype=int)
    counts[active] = sub.counts
    plan2 = SelectionPlan.from_counts(counts, horizon, k)
    return plan2, est, plan2.probabilities
