"""Constraint assembly for the local trajectory subproblems.

Builds actuation boxes, obstacle keep-out half-spaces, dynamics equalities
and linearized inter-agent collision half-spaces over a stacked neighborhood
decision vector, plus the post-hoc collision verifier used to judge trials.
Rows are stored in homogeneous blocks so assembly stays vectorized; these
QPs are rebuilt at every SQP re-linearization.
"""

from dataclasses import dataclass

import numpy as np

from .qp import INF
from .dynamics import Trajectory

DEGENERATE_EPS = 1e-6   # below this pair distance the normal is ill-defined
VERIFY_TOL = 1e-4       # slack absorbed by the collision verdict, meters


@dataclass
class Box:
    """Axis-aligned obstacle, lo/hi corners of matching dimension."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if np.any(self.lo >= self.hi):
            raise ValueError("box must have lo < hi on every axis")

    def contains(self, p):
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))


class LocalIndex:
    """Layout of one agent's stacked decision vector.

    All state blocks come first (one per neighborhood member, in neighbor
    order), then all control blocks. States span K+1 steps, controls K.
    """

    def __init__(self, owners, dims, horizon):
        self.owners = list(owners)
        self.dims = dict(dims)  # owner -> (n_x, n_u)
        self.K = horizon
        self._x_off = {}
        self._u_off = {}
        off = 0
        for j in self.owners:
            self._x_off[j] = off
            off += self.dims[j][0] * (horizon + 1)
        for j in self.owners:
            self._u_off[j] = off
            off += self.dims[j][1] * horizon
        self.n_total = off
        self.state_dim_per_step = sum(self.dims[j][0] for j in self.owners)
        self.control_dim_per_step = sum(self.dims[j][1] for j in self.owners)

    def x_idx(self, j, k):
        """First index of owner j's state at step k."""
        return self._x_off[j] + k * self.dims[j][0]

    def u_idx(self, j, k):
        return self._u_off[j] + k * self.dims[j][1]

    def x_block(self, j):
        nx = self.dims[j][0]
        return slice(self._x_off[j], self._x_off[j] + nx * (self.K + 1))

    def u_block(self, j):
        nu = self.dims[j][1]
        return slice(self._u_off[j], self._u_off[j] + nu * self.K)


class LinearConstraintSet:
    """Rows a'v in [lower, upper] over a stacked decision vector."""

    def __init__(self, n):
        self.n = n
        self._blocks = []   # (cols (r,c) int, vals (r,c) float, lo, hi)
        self.tags = []

    def add_block(self, cols, vals, lower, upper, tags):
        cols = np.atleast_2d(np.asarray(cols, dtype=np.int64))
        vals = np.atleast_2d(np.asarray(vals, dtype=float))
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if np.any(lower > upper):
            raise ValueError("block has lower > upper on some row")
        if not (cols.shape == vals.shape
                and cols.shape[0] == lower.shape[0] == upper.shape[0] == len(tags)):
            raise ValueError("inconsistent block shapes")
        self._blocks.append((cols, vals, lower, upper))
        self.tags.extend(tags)

    def add_row(self, cols, vals, lower, upper, tag):
        self.add_block([cols], [vals], [lower], [upper], [tag])

    def __len__(self):
        return len(self.tags)

    def count(self, kind):
        return sum(1 for t in self.tags if t[0] == kind)

    def to_matrix(self):
        import scipy.sparse as sp
        m = len(self.tags)
        if m == 0:
            return sp.csc_matrix((0, self.n)), np.zeros(0), np.zeros(0)
        rows = []
        cols = []
        vals = []
        lo = []
        hi = []
        base = 0
        for (c, v, l, u) in self._blocks:
            r, w = c.shape
            rows.append(np.repeat(np.arange(base, base + r), w))
            cols.append(c.ravel())
            vals.append(v.ravel())
            lo.append(l)
            hi.append(u)
            base += r
        A = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(m, self.n)).tocsc()
        return A, np.concatenate(lo), np.concatenate(hi)


def linearize_collision(p_ref_i, p_ref_j, d_safe, pair=(0, 1)):
    """Supporting half-space n'(p_i - p_j) >= d_safe with n the unit vector
    from p_ref_j toward p_ref_i.

    Coincident references fall back to a deterministic coordinate axis
    selected by the pair indices, so the row is always finite.
    """
    p_ref_i = np.asarray(p_ref_i, dtype=float)
    p_ref_j = np.asarray(p_ref_j, dtype=float)
    if p_ref_i.shape != p_ref_j.shape:
        raise ValueError("reference positions must share dimension")
    d = p_ref_i - p_ref_j
    nrm = np.linalg.norm(d)
    if nrm < DEGENERATE_EPS:
        n = np.zeros(p_ref_i.shape[0])
        n[(pair[0] + pair[1]) % p_ref_i.shape[0]] = 1.0
        return n
    return d / nrm


def _obstacle_faces(box, dim):
    """(normal, offset) per face of the keep-out region: outside iff
    n'p >= b for at least one face."""
    normals = np.zeros((2 * dim, dim))
    offsets = np.zeros(2 * dim)
    for ax in range(dim):
        normals[2 * ax, ax] = 1.0
        offsets[2 * ax] = box.hi[ax]
        normals[2 * ax + 1, ax] = -1.0
        offsets[2 * ax + 1] = -box.lo[ax]
    return normals, offsets


def build_local_constraints(agent, refs, scenario, model, index, x0):
    """All rows of agent's local problem, linearized around `refs`.

    refs maps every neighborhood member to its reference Trajectory. Own
    trajectory gets dynamics, initial-state, actuation and obstacle rows;
    collision rows cover every unordered pair in the neighborhood for
    k >= 1 (initial states are fixed, so k=0 rows would be vacuous).
    """
    for j in index.owners:
        if j not in refs:
            raise ValueError(f"missing reference trajectory for neighbor {j}")
    K = index.K
    dim = scenario.dim
    nx, nu = index.dims[agent]
    cs = LinearConstraintSet(index.n_total)

    # own dynamics: x_{k+1} - A_k x_k - B_k u_k = c_k, all k in one block
    if model.time_varying:
        Astk, Bstk, cstk = model.A[:K], model.B[:K], model.c[:K]
    else:
        Astk = np.broadcast_to(model.A, (K, nx, nx))
        Bstk = np.broadcast_to(model.B, (K, nx, nu))
        cstk = np.broadcast_to(model.c, (K, nx))
    x_of = np.array([index.x_idx(agent, k) for k in range(K + 1)])
    u_of = np.array([index.u_idx(agent, k) for k in range(K)])
    cols = np.zeros((K, nx, 1 + nx + nu), dtype=np.int64)
    vals = np.zeros((K, nx, 1 + nx + nu))
    cols[:, :, 0] = x_of[1:, None] + np.arange(nx)[None, :]
    vals[:, :, 0] = 1.0
    cols[:, :, 1:1 + nx] = (x_of[:K, None] + np.arange(nx)[None, :])[:, None, :]
    vals[:, :, 1:1 + nx] = -Astk
    cols[:, :, 1 + nx:] = (u_of[:, None] + np.arange(nu)[None, :])[:, None, :]
    vals[:, :, 1 + nx:] = -Bstk
    c_flat = np.asarray(cstk).reshape(-1)
    cs.add_block(cols.reshape(K * nx, -1), vals.reshape(K * nx, -1),
                 c_flat, c_flat,
                 [("dynamics", k) for k in range(K) for _ in range(nx)])

    # own initial state
    cs.add_block(np.arange(index.x_idx(agent, 0), index.x_idx(agent, 0) + nx)[:, None],
                 np.ones((nx, 1)), np.asarray(x0[:nx], float),
                 np.asarray(x0[:nx], float), [("initial",)] * nx)

    # own actuation box over all steps
    ucols = (u_of[:, None] + np.arange(nu)[None, :]).reshape(-1, 1)
    cs.add_block(ucols, np.ones_like(ucols, dtype=float),
                 np.tile(scenario.u_lo, K), np.tile(scenario.u_hi, K),
                 [("actuation", k) for k in range(K) for _ in range(nu)])
    # own state bounds (e.g. Dubins speed), k >= 1
    for (sidx, lo, hi) in scenario.state_bounds:
        scols = (x_of[1:] + sidx)[:, None]
        cs.add_block(scols, np.ones_like(scols, dtype=float),
                     np.full(K, lo), np.full(K, hi),
                     [("actuation", k) for k in range(1, K + 1)])

    # obstacle keep-out: 2*dim faces per obstacle per step, only the face
    # nearest the reference point carries an active bound (convexity)
    margin = scenario.d_safe / 2.0
    ref_own = refs[agent].states
    pos_cols = x_of[1:, None] + np.arange(dim)[None, :]   # (K, dim)
    for b_i, box in enumerate(scenario.obstacles):
        normals, offsets = _obstacle_faces(box, dim)
        nf = normals.shape[0]
        p = ref_own[1:K + 1, :dim]
        gaps = p @ normals.T - offsets[None, :]           # (K, nf)
        best = np.argmax(gaps, axis=1)
        lo = np.full((K, nf), -INF)
        lo[np.arange(K), best] = offsets[best] + margin
        cols_o = np.repeat(pos_cols[:, None, :], nf, axis=1)  # (K, nf, dim)
        vals_o = np.broadcast_to(normals, (K, nf, dim))
        cs.add_block(cols_o.reshape(K * nf, dim), vals_o.reshape(K * nf, dim),
                     lo.reshape(-1), np.full(K * nf, INF),
                     [("obstacle", b_i, k) for k in range(1, K + 1) for _ in range(nf)])

    # pairwise collision half-spaces within the neighborhood; the planner
    # demands extra clearance so the penalty-averaged consensus still clears
    # d_safe at a finite iteration budget
    d_plan = scenario.d_safe + getattr(scenario, "plan_margin", 0.0)
    owners = index.owners
    n_own = len(owners)
    if n_own > 1:
        pos = np.stack([refs[j].states[1:K + 1, :dim] for j in owners])
        ia, ib = np.triu_indices(n_own, 1)
        diff = pos[ia] - pos[ib]                      # (n_pairs, K, dim)
        nrm = np.linalg.norm(diff, axis=2)
        normals = np.zeros_like(diff)
        ok = nrm >= DEGENERATE_EPS
        normals[ok] = diff[ok] / nrm[ok][:, None]
        for p_i in range(len(ia)):
            axis = (owners[ia[p_i]] + owners[ib[p_i]]) % dim
            bad = ~ok[p_i]
            normals[p_i, bad, :] = 0.0
            normals[p_i, bad, axis] = 1.0
        xa = np.stack([np.array([index.x_idx(owners[a], k) for k in range(1, K + 1)])
                       for a in ia])
        xb = np.stack([np.array([index.x_idx(owners[b], k) for k in range(1, K + 1)])
                       for b in ib])
        cols_c = np.concatenate(
            [xa[:, :, None] + np.arange(dim)[None, None, :],
             xb[:, :, None] + np.arange(dim)[None, None, :]], axis=2)
        vals_c = np.concatenate([normals, -normals], axis=2)
        n_rows = len(ia) * K
        tags = [("collision", (owners[a], owners[b]), k)
                for a, b in zip(ia, ib) for k in range(1, K + 1)]
        cs.add_block(cols_c.reshape(n_rows, 2 * dim),
                     vals_c.reshape(n_rows, 2 * dim),
                     np.full(n_rows, d_plan), np.full(n_rows, INF), tags)
    return cs


@dataclass
class CollisionReport:
    collided: bool
    min_distance: float
    first_violation: tuple | None = None     # ((i, j), k)
    obstacle_hit: tuple | None = None        # (agent, k)


def verify_trajectories(trajectories, d_safe, obstacles=(), dim=2) -> CollisionReport:
    """Pointwise pairwise-distance and obstacle-containment check."""
    pos = []
    for tr in trajectories:
        states = tr.states if isinstance(tr, Trajectory) else np.asarray(tr)
        pos.append(states[:, :dim])
    T = pos[0].shape[0]
    if any(p.shape[0] != T for p in pos):
        raise ValueError("trajectories must share length")
    N = len(pos)
    min_d = np.inf
    first = None
    for k in range(T):
        for i in range(N):
            for j in range(i + 1, N):
                d = float(np.linalg.norm(pos[i][k] - pos[j][k]))
                if d < min_d:
                    min_d = d
                if first is None and d < d_safe - VERIFY_TOL:
                    first = ((i, j), k)
    obstacle_hit = None
    for i in range(N):
        for k in range(T):
            for box in obstacles:
                if box.contains(pos[i][k]):
                    obstacle_hit = (i, k)
                    break
            if obstacle_hit:
                break
        if obstacle_hit:
            break
    collided = min_d < d_safe - VERIFY_TOL
    return CollisionReport(collided=collided, min_distance=min_d,
                           first_violation=first, obstacle_hit=obstacle_hit)
