"""Consensus ADMM over per-agent trajectory copies under communication delay.

Every agent keeps local copies of its whole neighborhood's state and control
trajectories. One iteration is: sample message ages, local-to-global round,
penalty adaptation, penalty-weighted global averaging, global-to-local round,
dual update, then the delay-weighted local solves (with inner SQP
re-linearization of collision rows). Four penalty strategies are provided:

* ``da``  -- delay-aware: rho[i][j] = rho_base / (1 + age of the (i -> j)
  local-to-global message), likewise mu; fresh data gets full weight.
* ``lb``  -- lower bound: constant rho_base / (1 + d_max) for the whole run.
* ``rb``  -- residual balancing: one global scalar pair scaled up or down by
  tau whenever primal and dual residual norms diverge past a ratio threshold.
* ``fp``  -- fixed parameter: constant rho_base.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .delays import (DelayState, GL, LG, StaleBuffer, channel_fetch,
                     channel_send, sample_delays)
from .dynamics import Trajectory
from .qp import QpStatus, QuadraticProgram, SolverSettings, solve_qp


class LocalInfeasible(Exception):
    def __init__(self, agent):
        self.agent = agent
        super().__init__(f"local problem infeasible for agent {agent}")


@dataclass
class PenaltyStrategy:
    kind: str                     # da | lb | rb | fp
    rho_base: float = 0.1
    mu_base: float = 0.001
    tau: float = 2.0              # rb scaling factor
    ratio_threshold: float = 10.0
    d_max: int = 0                # lb uses the configured delay bound

    def __post_init__(self):
        if self.kind not in ("da", "lb", "rb", "fp"):
            raise ValueError(f"unknown penalty strategy {self.kind!r}")
        if self.rho_base <= 0 or self.mu_base <= 0:
            raise ValueError("base penalties must be positive")
        if self.tau <= 1 or self.ratio_threshold <= 1:
            raise ValueError("rb parameters must exceed 1")


@dataclass
class PenaltyMatrix:
    """Current penalties per (viewer i, owner j), uniform over timesteps."""

    rho: np.ndarray
    mu: np.ndarray


def penalties_for_iteration(strategy, ages, prev_residuals, n_agents,
                            prev=None) -> PenaltyMatrix:
    """Penalty matrices for one iteration.

    `ages` is the sampled DelayState (da reads the LG ages), `prev_residuals`
    the previous iteration's (primal, dual) pair (rb needs it, absent before
    the first iteration), `prev` the previous PenaltyMatrix (rb accumulates).
    """
    n = n_agents
    if strategy.kind == "da":
        rho = strategy.rho_base / (1.0 + ages.age_lg)
        mu = strategy.mu_base / (1.0 + ages.age_lg)
    elif strategy.kind == "lb":
        rho = np.full((n, n), strategy.rho_base / (1.0 + strategy.d_max))
        mu = np.full((n, n), strategy.mu_base / (1.0 + strategy.d_max))
    elif strategy.kind == "fp":
        rho = np.full((n, n), strategy.rho_base)
        mu = np.full((n, n), strategy.mu_base)
    else:  # rb
        rho_s = prev.rho[0, 0] if prev is not None else strategy.rho_base
        mu_s = prev.mu[0, 0] if prev is not None else strategy.mu_base
        if prev_residuals is not None:
            r, s = prev_residuals
            if r > strategy.ratio_threshold * s:
                rho_s, mu_s = rho_s * strategy.tau, mu_s * strategy.tau
            elif s > strategy.ratio_threshold * r:
                rho_s, mu_s = rho_s / strategy.tau, mu_s / strategy.tau
        rho = np.full((n, n), rho_s)
        mu = np.full((n, n), mu_s)
    return PenaltyMatrix(rho=rho, mu=mu)


def global_update_weighted(estimates, penalties):
    """Penalty-weighted averaging of the delivered local copies.

    estimates[l] is a list of (viewer, (states, controls)) giving each
    viewer's (possibly stale) copy of owner l's trajectory. Returns the new
    consensus dictionaries z (states) and w (controls).
    """
    z, w = {}, {}
    for owner, ests in estimates.items():
        zsum = wsum = None
        rtot = mtot = 0.0
        for viewer, (xs, us) in ests:
            r = penalties.rho[viewer, owner]
            m = penalties.mu[viewer, owner]
            zsum = r * xs if zsum is None else zsum + r * xs
            wsum = m * us if wsum is None else wsum + m * us
            rtot += r
            mtot += m
        assert rtot > 0 and mtot > 0, "penalty positivity violated"
        z[owner] = zsum / rtot
        w[owner] = wsum / mtot
    return z, w


def dual_update(duals, locals_, views, penalties, neighbors):
    """y += rho (x - z~), lambda += mu (u - w~), against each viewer's own
    stale consensus snapshot."""
    y, lam = duals
    y_new = {i: {} for i in y}
    lam_new = {i: {} for i in lam}
    for i in y:
        for j in neighbors[i]:
            zt, wt = views[i][j]
            y_new[i][j] = y[i][j] + penalties.rho[i, j] * (locals_[i][j].states - zt)
            lam_new[i][j] = lam[i][j] + penalties.mu[i, j] * (locals_[i][j].controls - wt)
    return (y_new, lam_new)


def compute_residuals(locals_, views, z_prev, w_prev, z, w, penalties,
                      neighbors):
    """(primal, dual) norms: stacked local-vs-stale-consensus gaps, and the
    penalty-scaled consensus change."""
    p2 = 0.0
    for i, nbrs in enumerate(neighbors):
        for j in nbrs:
            zt, wt = views[i][j]
            p2 += float(np.sum((locals_[i][j].states - zt) ** 2))
            p2 += float(np.sum((locals_[i][j].controls - wt) ** 2))
    d2 = 0.0
    for owner in z:
        dz2 = float(np.sum((z[owner] - z_prev[owner]) ** 2))
        dw2 = float(np.sum((w[owner] - w_prev[owner]) ** 2))
        for i, nbrs in enumerate(neighbors):
            if owner in nbrs:
                d2 += penalties.rho[i, owner] ** 2 * dz2
                d2 += penalties.mu[i, owner] ** 2 * dw2
    return (float(np.sqrt(p2)), float(np.sqrt(d2)))


def local_update(agent, views_i, y_i, lam_i, rho_row, mu_row, cost,
                 constraint_builder, index, sqp_iters, warm,
                 settings=None, cache=None):
    """Delay-weighted local subproblem with inner SQP re-linearization.

    Minimizes the agent's tracking cost plus per-neighbor consensus penalty
    terms subject to the builder's constraint rows. The first collision
    linearization is taken around the agent's current consensus view (so
    that, absent delays, all agents share one constraint geometry); the SQP
    loop then re-linearizes around each inner iterate, warm-starting every
    QP from the last. Raises LocalInfeasible when the QP reports
    infeasibility or hits its iteration cap.
    """
    K = index.K
    n = index.n_total
    pdiag = np.zeros(n)
    q = np.zeros(n)

    nx, nu = index.dims[agent]
    xb = index.x_block(agent)
    qx = np.tile(2.0 * cost.Q, K + 1)
    qx[-nx:] = 2.0 * cost.Qf
    pdiag[xb] += qx
    gx = np.tile(2.0 * cost.Q * cost.goal, K + 1)
    gx[-nx:] = 2.0 * cost.Qf * cost.goal
    q[xb] -= gx
    pdiag[index.u_block(agent)] += np.tile(2.0 * cost.R, K)

    for j in index.owners:
        rho = rho_row[j]
        mu = mu_row[j]
        zt, wt = views_i[j]
        xb = index.x_block(j)
        ub = index.u_block(j)
        pdiag[xb] += rho
        q[xb] += y_i[j].ravel() - rho * zt.ravel()
        pdiag[ub] += mu
        q[ub] += lam_i[j].ravel() - mu * wt.ravel()

    P = sp.diags(pdiag)
    if settings is None:
        settings = SolverSettings()

    ref = {j: Trajectory(views_i[j][0], views_i[j][1]) for j in index.owners}
    ws = cache.get(agent) if cache is not None else None
    if ws is None:
        x0 = np.concatenate(
            [warm[j].states.ravel() for j in index.owners]
            + [warm[j].controls.ravel() for j in index.owners])
        y0 = None
    else:
        x0, y0 = ws

    sol = None
    for _ in range(max(1, sqp_iters)):
        cset = constraint_builder(agent, ref)
        A, lo, hi = cset.to_matrix()
        if y0 is None or y0.shape[0] != A.shape[0]:
            y0 = np.zeros(A.shape[0])
        st = SolverSettings(max_iterations=settings.max_iterations,
                            feas_tol=settings.feas_tol,
                            opt_tol=settings.opt_tol,
                            warm_start=(x0, y0))
        sol = solve_qp(QuadraticProgram(P=P, q=q, A=A, lower=lo, upper=hi), st)
        if sol.status != QpStatus.SOLVED:
            raise LocalInfeasible(agent)
        x0, y0 = sol.x, sol.y
        ref = {j: Trajectory(
            sol.x[index.x_block(j)].reshape(K + 1, index.dims[j][0]).copy(),
            sol.x[index.u_block(j)].reshape(K, index.dims[j][1]).copy())
            for j in index.owners}
    if cache is not None:
        cache[agent] = (x0, y0)
    return ref


@dataclass
class ConsensusResult:
    status: str                 # converged | completed | infeasible
    z: dict
    w: dict
    locals_: dict
    duals: tuple
    residuals: list
    penalties: PenaltyMatrix
    n_iterations: int
    messages: int
    delay_trace_hash: str
    failed_agent: int | None = None
    z_history: list = field(default_factory=list)


def run_admm(problem, strategy, delay_config, iterations, sqp_iters, rng,
             record_history=False, eps_pri=None) -> ConsensusResult:
    """Drive the full iteration on any consensus problem object.

    The problem provides n_agents, horizon, neighbors (sorted, including
    self), dims(j), initial_trajectory(j) and solve_local(...). Iteration 0
    is primed delay-free from the initial trajectories with zero duals; the
    loop stops early once the primal residual drops below eps_pri.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    N = problem.n_agents
    K = problem.horizon
    neighbors = problem.neighbors
    viewers = [[i for i in range(N) if l in neighbors[i]] for l in range(N)]

    if eps_pri is None:
        total_dim = sum(
            problem.dims(j)[0] * (K + 1) + problem.dims(j)[1] * K
            for i in range(N) for j in neighbors[i])
        eps_pri = 1e-3 * np.sqrt(total_dim)

    # pre-sample the whole delay trace so it only depends on (seed, config)
    trace = []
    st = DelayState.fresh(N)
    for _ in range(iterations):
        st = sample_delays(st, delay_config, rng)
        trace.append(st)
    h = hashlib.sha256()
    for st in trace:
        h.update(st.age_lg.tobytes())
        h.update(st.age_gl.tobytes())
    trace_hash = h.hexdigest()

    init = {j: problem.initial_trajectory(j) for j in range(N)}
    z = {j: init[j].states.copy() for j in range(N)}
    w = {j: init[j].controls.copy() for j in range(N)}

    y = {i: {j: np.zeros((K + 1, problem.dims(j)[0])) for j in neighbors[i]}
         for i in range(N)}
    lam = {i: {j: np.zeros((K, problem.dims(j)[1])) for j in neighbors[i]}
           for i in range(N)}
    duals = (y, lam)

    if strategy.kind == "lb":
        strategy.d_max = delay_config.d_max

    pen = penalties_for_iteration(strategy, DelayState.fresh(N), None, N)

    # iteration 0: delay-free local update from the straight-line guesses
    locals_ = {}
    views = {i: {j: (z[j], w[j]) for j in neighbors[i]} for i in range(N)}
    for i in range(N):
        warm = {j: init[j] for j in neighbors[i]}
        locals_[i] = problem.solve_local(
            i, views[i], y[i], lam[i], pen.rho[i], pen.mu[i], sqp_iters, warm)
    messages = 2 * N

    buf = StaleBuffer()
    for i in range(N):
        for j in neighbors[i]:
            channel_send(buf, (i, j), LG,
                         (locals_[i][j].states, locals_[i][j].controls), 0)
    for l in range(N):
        for i in viewers[l]:
            channel_send(buf, (l, i), GL, (z[l], w[l]), 0)

    residuals = []
    z_history = []
    status = "completed"
    failed = None
    t = 0
    for t in range(1, iterations + 1):
        ages = trace[t - 1]

        for i in range(N):
            for j in neighbors[i]:
                if ages.age_lg[i, j] == 0:
                    channel_send(buf, (i, j), LG,
                                 (locals_[i][j].states, locals_[i][j].controls), t)
            messages += 1
        estimates = {l: [] for l in range(N)}
        for i in range(N):
            for j in neighbors[i]:
                payload, age = channel_fetch(buf, (i, j), LG, t)
                estimates[j].append((i, payload))

        pen = penalties_for_iteration(
            strategy, ages, residuals[-1] if residuals else None, N, pen)

        z_prev, w_prev = z, w
        z, w = global_update_weighted(estimates, pen)

        for l in range(N):
            for i in viewers[l]:
                if ages.age_gl[l, i] == 0:
                    channel_send(buf, (l, i), GL, (z[l], w[l]), t)
            messages += 1
        views = {i: {} for i in range(N)}
        for l in range(N):
            for i in viewers[l]:
                payload, age = channel_fetch(buf, (l, i), GL, t)
                views[i][l] = payload

        duals = dual_update(duals, locals_, views, pen, neighbors)

        try:
            new_locals = {}
            for i in range(N):
                new_locals[i] = problem.solve_local(
                    i, views[i], duals[0][i], duals[1][i],
                    pen.rho[i], pen.mu[i], sqp_iters, locals_[i])
            locals_ = new_locals
        except LocalInfeasible as exc:
            status = "infeasible"
            failed = exc.agent
            break

        res = compute_residuals(locals_, views, z_prev, w_prev, z, w, pen,
                                neighbors)
        residuals.append(res)
        if record_history:
            z_history.append({j: z[j].copy() for j in range(N)})
        if res[0] <= eps_pri:
            status = "converged"
            break

    return ConsensusResult(
        status=status, z=z, w=w, locals_=locals_, duals=duals,
        residuals=residuals, penalties=pen, n_iterations=t,
        messages=messages, delay_trace_hash=trace_hash,
        failed_agent=failed, z_history=z_history)
