"""Single-shot trajectory optimization, receding-horizon MPC, and the
fixed-constraint baseline on top of the consensus ADMM core.

Tracking costs are quadratic: Q weights 1 on positions and 0.1 on the
remaining states, R = 0.1 I, terminal weight 10 Q; goals are judged on
position coordinates within a 0.1 m tolerance.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .admm import LocalInfeasible, PenaltyStrategy, local_update, run_admm
from .constraints import LocalIndex, build_local_constraints, linearize_collision, verify_trajectories
from .delays import LG, DelayConfig, DelayState, StaleBuffer, channel_fetch, channel_send, sample_delays
from .dynamics import (Trajectory, control_dim, double_integrator_model,
                       drone_model, dubins_linearize, dubins_step,
                       position_dim, state_dim, wrap_angle)
from .qp import QpStatus, QuadraticProgram, SolverSettings, solve_qp
from .scenarios import Scenario, next_task

GOAL_TOL = 0.1
FC_ACTIVATION = 3.0          # collision rows activate within 3 * d_safe
ADMM_METHODS = ("da", "lb", "rb", "fp")


@dataclass
class TrackingCost:
    Q: np.ndarray      # diagonal state weights
    R: np.ndarray      # diagonal control weights
    Qf: np.ndarray
    goal: np.ndarray


def default_cost(model_kind, goal) -> TrackingCost:
    nx = state_dim(model_kind)
    nu = control_dim(model_kind)
    Q = np.full(nx, 0.1)
    Q[:position_dim(model_kind)] = 1.0
    # terminal weight must dominate the accumulated running cost, otherwise
    # the optimum arrives fast and parks outside the 0.1 goal tolerance
    Qf = 10.0 * Q
    Qf[:position_dim(model_kind)] = 100.0
    return TrackingCost(Q=Q, R=np.full(nu, 0.1), Qf=Qf, goal=np.asarray(goal, float))


def _lerp_guess(x0, goal, horizon, nu, bow=0.0):
    """Componentwise interpolation, optionally bowed sideways.

    The bow is a deterministic half-sine offset to the agent's left. On
    exactly symmetric instances (antipodal circle swaps) straight guesses
    make every collision linearization degenerate at the same timestep and
    consensus stalls at the mirror-symmetric deadlock; the bow selects one
    rotation direction for everyone up front.
    """
    alphas = np.linspace(0.0, 1.0, horizon + 1)[:, None]
    states = (1 - alphas) * np.asarray(x0, float) + alphas * np.asarray(goal, float)
    if bow > 0.0:
        d = np.asarray(goal, float)[:2] - np.asarray(x0, float)[:2]
        nd = np.linalg.norm(d)
        if nd > 1e-9:
            perp = np.array([-d[1], d[0]]) / nd
            states[:, :2] += (bow * np.sin(np.pi * np.linspace(0, 1, horizon + 1))[:, None]
                              * perp)
    return Trajectory(states=states, controls=np.zeros((horizon, nu)))


class TrajectoryConsensusProblem:
    """Adapts one scenario snapshot to the consensus ADMM driver."""

    def __init__(self, scenario, neighbors, models, x0s, goals=None,
                 initial=None, on_infeasible="raise", solver_cache=None,
                 qp_settings=None):
        self.scenario = scenario
        self.n_agents = scenario.n_agents
        self.horizon = scenario.horizon
        self.neighbors = neighbors
        self.models = models
        self.x0s = np.asarray(x0s, float)
        self.goals = np.asarray(scenario.goals if goals is None else goals, float)
        nx = state_dim(scenario.model)
        nu = control_dim(scenario.model)
        self._dims = {j: (nx, nu) for j in range(self.n_agents)}
        self.indices = {i: LocalIndex(neighbors[i], self._dims, self.horizon)
                        for i in range(self.n_agents)}
        self.costs = {i: default_cost(scenario.model, self.goals[i])
                      for i in range(self.n_agents)}
        self._initial = initial
        self.on_infeasible = on_infeasible
        self.infeasible_agents = set()
        self.solver_cache = {} if solver_cache is None else solver_cache
        # consensus-loop solves do not need the tight library default; the
        # outer residuals are orders of magnitude above 1e-4
        self.qp_settings = qp_settings or SolverSettings(feas_tol=1e-4,
                                                         opt_tol=1e-4)

    def dims(self, j):
        return self._dims[j]

    def initial_trajectory(self, j) -> Trajectory:
        if self._initial is not None:
            return self._initial[j]
        return _lerp_guess(self.x0s[j], self.goals[j], self.horizon,
                           self._dims[j][1], bow=1.5 * self.scenario.d_safe)

    def constraint_builder(self, i):
        def build(agent, refs):
            return build_local_constraints(
                agent, refs, self.scenario, self.models[agent],
                self.indices[agent], self.x0s[agent])
        return build

    def solve_local(self, i, views_i, y_i, lam_i, rho_row, mu_row,
                    sqp_iters, warm):
        key = (i, tuple(self.neighbors[i]))
        tmp = {}
        if key in self.solver_cache:
            tmp[i] = self.solver_cache[key]
        try:
            out = local_update(i, views_i, y_i, lam_i, rho_row, mu_row,
                               self.costs[i], self.constraint_builder(i),
                               self.indices[i], sqp_iters, warm,
                               settings=self.qp_settings, cache=tmp)
        except LocalInfeasible:
            if self.on_infeasible == "freeze":
                self.infeasible_agents.add(i)
                return warm
            raise
        self.solver_cache[key] = tmp[i]
        return out


@dataclass
class PlanRequest:
    scenario: Scenario
    method: str = "da"
    delay: DelayConfig = field(default_factory=lambda: DelayConfig(0.0, 0))
    mode: str = "trajopt"
    admm_iterations: int = 30
    sqp_iters: int = 5
    seed: int = 0
    n_neigh: int = 3
    rho_base: float = 0.1
    mu_base: float = 0.001
    goal_tol: float = GOAL_TOL
    time_limit: float | None = None
    record_history: bool = False

    def __post_init__(self):
        if self.admm_iterations < 1 or self.sqp_iters < 1:
            raise ValueError("iteration budgets must be >= 1")
        if self.method not in ADMM_METHODS + ("fc",):
            raise ValueError(f"unknown method {self.method!r}")
        if self.mode not in ("trajopt", "mpc"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.method == "fc" and self.mode == "trajopt":
            raise ValueError("fc is a planning baseline for MPC mode only")
        if self.delay.d_max >= self.scenario.horizon:
            raise ValueError("d_max must be smaller than the horizon")

    def strategy(self) -> PenaltyStrategy:
        return PenaltyStrategy(kind=self.method, rho_base=self.rho_base,
                               mu_base=self.mu_base, d_max=self.delay.d_max)


@dataclass
class TrialResult:
    success: bool
    makespan: float
    total_cost: float
    final_primal: float
    final_dual: float
    comp_time: float
    failure_reason: str | None = None
    extras: dict = field(default_factory=dict)


def nearest_neighbors(positions, n_neigh):
    """Per-agent neighbor sets (self included, sorted); Euclidean nearest
    with ties broken toward the lower index."""
    positions = np.asarray(positions, float)
    N = positions.shape[0]
    if n_neigh >= N:
        raise ValueError("n_neigh must be smaller than the agent count")
    out = []
    for i in range(N):
        d = np.linalg.norm(positions - positions[i], axis=1)
        order = np.lexsort((np.arange(N), d))
        picks = [int(j) for j in order if j != i][:n_neigh]
        out.append(sorted(picks + [i]))
    return out


def fallback_maneuver(state, scenario) -> np.ndarray:
    """Emergency stop: maximum deceleration, no steering, never reversing."""
    dt = scenario.dt
    if scenario.model == "dubins":
        v = state[3]
        a = max(scenario.u_lo[0], -v / dt)
        return np.array([a, 0.0])
    if scenario.model == "double_integrator":
        v = state[2:4]
        return np.clip(-v / dt, scenario.u_lo, scenario.u_hi)
    # drone: cancel lagged acceleration with the feed-forward channel
    v, acc = state[3:6], state[6:9]
    ff = np.clip(-v / dt - acc, scenario.u_lo[3:], scenario.u_hi[3:])
    return np.concatenate([np.zeros(3), ff])


def _stage_cost(cost, x, u):
    dx = x - cost.goal
    return float(dx @ (cost.Q * dx) + u @ (cost.R * u))


def _trajectory_cost(cost, states, controls):
    total = 0.0
    for k in range(controls.shape[0]):
        total += _stage_cost(cost, states[k], controls[k])
    dx = states[-1] - cost.goal
    total += float(dx @ (cost.Qf * dx))
    return total


def _goal_distances(states_row, goals, dim):
    return np.linalg.norm(states_row[:, :dim] - goals[:, :dim], axis=1)


def _completion_step(z, goals, dim, tol):
    """First step at which every agent is within tol of its goal."""
    T = z[0].shape[0]
    N = len(z)
    for k in range(T):
        if all(np.linalg.norm(z[i][k, :dim] - goals[i, :dim]) <= tol
               for i in range(N)):
            return k
    return None


def _make_models(scenario, refs=None):
    if scenario.model == "double_integrator":
        m = double_integrator_model(scenario.dt)
        return {i: m for i in range(scenario.n_agents)}
    if scenario.model == "drone":
        m = drone_model(scenario.dt)
        return {i: m for i in range(scenario.n_agents)}
    # Dubins linearizes around the per-agent reference
    return {i: dubins_linearize(refs[i], scenario.dt)
            for i in range(scenario.n_agents)}


def solve_trajopt(request: PlanRequest) -> TrialResult:
    """Single-shot consensus optimization, verified on the final consensus."""
    if request.mode != "trajopt":
        raise ValueError("request.mode must be 'trajopt'")
    scen = request.scenario
    N = scen.n_agents
    neighbors = [list(range(N)) for _ in range(N)]
    guesses = {i: _lerp_guess(scen.starts[i], scen.goals[i], scen.horizon,
                              control_dim(scen.model), bow=1.5 * scen.d_safe)
               for i in range(N)}
    models = _make_models(scen, guesses)
    problem = TrajectoryConsensusProblem(scen, neighbors, models,
                                         x0s=scen.starts)
    rng = np.random.default_rng(request.seed)
    t0 = time.perf_counter()
    res = run_admm(problem, request.strategy(), request.delay,
                   request.admm_iterations, request.sqp_iters, rng,
                   record_history=request.record_history)
    comp = time.perf_counter() - t0

    extras = {"result": res, "messages": res.messages,
              "delay_trace_hash": res.delay_trace_hash,
              "iterations": res.n_iterations}
    fp, fd = res.residuals[-1] if res.residuals else (np.nan, np.nan)
    if res.status == "infeasible":
        return TrialResult(False, np.nan, np.nan, fp, fd, comp,
                           "Infeasible", extras)
    z = [res.z[i] for i in range(N)]
    total = sum(_trajectory_cost(problem.costs[i], res.z[i], res.w[i])
                for i in range(N))
    report = verify_trajectories(z, scen.d_safe, scen.obstacles, scen.dim)
    goal_ok = np.all(_goal_distances(
        np.stack([res.z[i][-1] for i in range(N)]), scen.goals,
        scen.dim) <= request.goal_tol)
    failure = None
    if report.collided or report.obstacle_hit:
        failure = "Collision"
    elif not goal_ok:
        failure = "GoalNotReached"
    success = failure is None
    makespan = np.nan
    if success:
        k = _completion_step(z, scen.goals, scen.dim, request.goal_tol)
        makespan = k * scen.dt
    extras["min_distance"] = report.min_distance
    return TrialResult(success, makespan, total, fp, fd, comp, failure, extras)


def _shift_plan(plan: Trajectory, scenario) -> Trajectory:
    """Receding-horizon warm start: drop the first step, repeat the last
    control, extend the final state by one model step."""
    states = np.vstack([plan.states[1:], plan.states[-1:]])
    controls = np.vstack([plan.controls[1:], plan.controls[-1:]])
    last_u = controls[-1]
    if scenario.model == "dubins":
        nxt = dubins_step(plan.states[-1], last_u, scenario.dt)
    else:
        m = (double_integrator_model(scenario.dt)
             if scenario.model == "double_integrator" else drone_model(scenario.dt))
        nxt = m.A @ plan.states[-1] + m.B @ last_u
    states[-1] = nxt
    return Trajectory(states=states, controls=controls)


def _unwrap_dubins(x0, ref_theta):
    x = x0.copy()
    x[2] = ref_theta + wrap_angle(x[2] - ref_theta)
    return x


def fc_opt_step(agent, predictions, scenario, model, x0, goal, ref,
                sqp_iters, qp_settings=None, cache=None) -> Trajectory:
    """Single-agent solve with neighbors' predictions as fixed constraints.

    Collision rows are added only for (neighbor, timestep) pairs whose
    predicted separation falls inside the activation radius.
    """
    nx = state_dim(scenario.model)
    nu = control_dim(scenario.model)
    index = LocalIndex([agent], {agent: (nx, nu)}, scenario.horizon)
    cost = default_cost(scenario.model, goal)
    dim = scenario.dim
    K = scenario.horizon

    pdiag = np.zeros(index.n_total)
    q = np.zeros(index.n_total)
    qx = np.tile(2.0 * cost.Q, K + 1)
    qx[-nx:] = 2.0 * cost.Qf
    pdiag[index.x_block(agent)] += qx
    gx = np.tile(2.0 * cost.Q * cost.goal, K + 1)
    gx[-nx:] = 2.0 * cost.Qf * cost.goal
    q[index.x_block(agent)] -= gx
    pdiag[index.u_block(agent)] += np.tile(2.0 * cost.R, K)

    import scipy.sparse as sp
    settings = qp_settings or SolverSettings(feas_tol=1e-4, opt_tol=1e-4)
    cur = ref
    x_ws = np.concatenate([cur.states.ravel(), cur.controls.ravel()])
    y_ws = None
    activation = FC_ACTIVATION * scenario.d_safe
    d_plan = scenario.d_safe + scenario.plan_margin
    sol = None
    for _ in range(max(1, sqp_iters)):
        refs = {agent: cur}
        cset = build_local_constraints(agent, refs, scenario, model, index, x0)
        for j, pred in predictions.items():
            for k in range(1, K + 1):
                p_i = cur.states[k, :dim]
                p_j = pred.states[k, :dim]
                if np.linalg.norm(p_i - p_j) >= activation:
                    continue
                n = linearize_collision(p_i, p_j, d_plan, pair=(agent, j))
                cols = [index.x_idx(agent, k) + s for s in range(dim)]
                cset.add_row(cols, n, d_plan + float(n @ p_j),
                             np.inf, ("collision", (agent, j), k))
        A, lo, hi = cset.to_matrix()
        if y_ws is None or y_ws.shape[0] != A.shape[0]:
            y_ws = np.zeros(A.shape[0])
        st = SolverSettings(max_iterations=settings.max_iterations,
                            feas_tol=settings.feas_tol,
                            opt_tol=settings.opt_tol,
                            warm_start=(x_ws, y_ws))
        sol = solve_qp(QuadraticProgram(P=sp.diags(pdiag), q=q, A=A,
                                        lower=lo, upper=hi), st)
        if sol.status != QpStatus.SOLVED:
            raise LocalInfeasible(agent)
        x_ws, y_ws = sol.x, sol.y
        cur = Trajectory(sol.x[index.x_block(agent)].reshape(K + 1, nx).copy(),
                         sol.x[index.u_block(agent)].reshape(K, nu).copy())
    return cur


class MpcContext:
    """Mutable state threaded through the receding-horizon loop."""

    def __init__(self, request):
        scen = request.scenario
        self.goals = scen.goals.copy()
        self.seed_seq = np.random.SeedSequence(request.seed)
        self.solver_cache = {}
        self.fc_buffer = StaleBuffer()
        self.fc_ages = DelayState.fresh(scen.n_agents)
        self.cycle = 0
        self.messages = 0
        self.last_residuals = (np.nan, np.nan)
        self.fallback_agents = set()
        self.delay_hashes = []

    def next_rng(self):
        return np.random.default_rng(self.seed_seq.spawn(1)[0])


def mpc_step(states, plans, request: PlanRequest, ctx: MpcContext):
    """One planning cycle: rebuild neighborhoods, shift warm starts, run the
    budgeted consensus solve (or the fixed-constraint baseline), return the
    controls to apply plus diagnostics. Agents whose local problem turns
    infeasible brake via the fallback maneuver while the rest proceed."""
    scen = request.scenario
    N = scen.n_agents
    dim = scen.dim
    if plans is None:
        refs = {i: _lerp_guess(states[i], ctx.goals[i], scen.horizon,
                               control_dim(scen.model), bow=1.5 * scen.d_safe)
                for i in range(N)}
    else:
        refs = {i: _shift_plan(plans[i], scen) for i in range(N)}

    x0s = states.copy()
    goals = ctx.goals.copy()
    if scen.model == "dubins":
        for i in range(N):
            x0s[i] = _unwrap_dubins(states[i], refs[i].states[0, 2])
            goals[i] = goals[i].copy()
            goals[i][2] = x0s[i][2] + wrap_angle(goals[i][2] - x0s[i][2])

    models = _make_models(scen, refs)
    rng = ctx.next_rng()
    ctx.fallback_agents = set()

    if request.method == "fc":
        controls, new_plans = _fc_cycle(states, refs, x0s, goals, models,
                                        request, ctx, rng)
        diag = {"residuals": (np.nan, np.nan)}
    else:
        nn = (nearest_neighbors(states[:, :dim], min(request.n_neigh, N - 1))
              if N > 1 else [[0]])
        problem = TrajectoryConsensusProblem(
            scen, nn, models, x0s=x0s, goals=goals, initial=refs,
            on_infeasible="freeze", solver_cache=ctx.solver_cache)
        res = run_admm(problem, request.strategy(), request.delay,
                       request.admm_iterations, request.sqp_iters, rng)
        ctx.messages += res.messages
        ctx.delay_hashes.append(res.delay_trace_hash)
        ctx.last_residuals = res.residuals[-1] if res.residuals else (np.nan, np.nan)
        ctx.fallback_agents = set(problem.infeasible_agents)
        new_plans = {i: Trajectory(res.z[i].copy(), res.w[i].copy())
                     for i in range(N)}
        controls = np.zeros((N, control_dim(scen.model)))
        for i in range(N):
            if i in ctx.fallback_agents:
                controls[i] = fallback_maneuver(states[i], scen)
            else:
                controls[i] = np.clip(res.w[i][0], scen.u_lo, scen.u_hi)
        diag = {"residuals": ctx.last_residuals, "result": res}
    ctx.cycle += 1
    return controls, new_plans, diag


def _fc_cycle(states, refs, x0s, goals, models, request, ctx, rng):
    scen = request.scenario
    N = scen.n_agents
    ctx.fc_ages = sample_delays(ctx.fc_ages, request.delay, rng)
    for j in range(N):
        for i in range(N):
            if i != j and ctx.fc_ages.age_lg[j, i] == 0:
                channel_send(ctx.fc_buffer, (j, i), LG, refs[j], ctx.cycle)
        ctx.messages += 1
    nn = (nearest_neighbors(states[:, :scen.dim], min(request.n_neigh, N - 1))
          if N > 1 else [[0]])
    controls = np.zeros((N, control_dim(scen.model)))
    new_plans = {}
    for i in range(N):
        preds = {}
        for j in nn[i]:
            if j == i:
                continue
            payload, _age = channel_fetch(ctx.fc_buffer, (j, i), LG, ctx.cycle)
            preds[j] = payload
        try:
            plan = fc_opt_step(i, preds, scen, models[i], x0s[i], goals[i],
                               refs[i], request.sqp_iters)
            new_plans[i] = plan
            controls[i] = np.clip(plan.controls[0], scen.u_lo, scen.u_hi)
        except LocalInfeasible:
            ctx.fallback_agents.add(i)
            new_plans[i] = refs[i]
            controls[i] = fallback_maneuver(states[i], scen)
    return controls, new_plans


def _advance(states, controls, scenario):
    N = scenario.n_agents
    out = states.copy()
    if scenario.model == "dubins":
        for i in range(N):
            out[i] = dubins_step(states[i], controls[i], scenario.dt)
    else:
        m = (double_integrator_model(scenario.dt)
             if scenario.model == "double_integrator" else drone_model(scenario.dt))
        for i in range(N):
            out[i] = m.A @ states[i] + m.B @ controls[i]
    return out


def run_mpc(request: PlanRequest) -> TrialResult:
    """Receding-horizon loop until every agent reaches its goal (or, in the
    warehouse, finishes its task quota), with collision checks on realized
    states each step."""
    if request.mode != "mpc":
        raise ValueError("request.mode must be 'mpc'")
    scen = request.scenario
    N = scen.n_agents
    dim = scen.dim
    limit = request.time_limit
    if limit is None:
        limit = 19.9 if scen.model == "drone" else 40.0
    max_steps = int(round(limit / scen.dt))

    ctx = MpcContext(request)
    states = scen.starts.copy()
    plans = None
    costs = {i: default_cost(scen.model, ctx.goals[i]) for i in range(N)}
    tasks_done = np.zeros(N, dtype=int)
    is_warehouse = scen.task_source is not None

    total_cost = 0.0
    comp = 0.0
    success = False
    failure = "Timeout"
    makespan = np.nan
    realized = [states.copy()]

    for step in range(max_steps):
        t0 = time.perf_counter()
        controls, plans, diag = mpc_step(states, plans, request, ctx)
        comp += time.perf_counter() - t0
        for i in range(N):
            costs[i].goal = ctx.goals[i]
            total_cost += _stage_cost(costs[i], states[i], controls[i])
        states = _advance(states, controls, scen)
        realized.append(states.copy())

        report = verify_trajectories([s[None, :] for s in states],
                                     scen.d_safe, scen.obstacles, dim)
        if report.collided or report.obstacle_hit:
            failure = "Collision"
            break

        dists = _goal_distances(states, ctx.goals, dim)
        if is_warehouse:
            for i in range(N):
                if dists[i] <= request.goal_tol:
                    tasks_done[i] += 1
                    ctx.goals[i] = next_task(scen.task_source, i)
            if np.all(tasks_done >= scen.tasks_per_agent):
                success = True
                failure = None
                makespan = (step + 1) * scen.dt
                break
        else:
            if np.all(dists <= request.goal_tol):
                success = True
                failure = None
                makespan = (step + 1) * scen.dt
                break

    fp, fd = ctx.last_residuals
    extras = {"messages": ctx.messages, "steps": len(realized) - 1,
              "realized": realized,
              "delay_trace_hash": _combine_hashes(ctx.delay_hashes)}
    return TrialResult(success, makespan, total_cost, fp, fd, comp,
                       None if success else failure, extras)


def _combine_hashes(hashes):
    import hashlib
    h = hashlib.sha256()
    for x in hashes:
        h.update(x.encode())
    return h.hexdigest()
