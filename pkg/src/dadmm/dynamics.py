"""Discrete-time linear and linearized dynamics models.

Three agent models are supported:

* double integrator, state (px, py, vx, vy), control (ax, ay), exact
  zero-order-hold discretization;
* Dubins car, state (px, py, theta, v), control (a, omega), forward-Euler
  discretization linearized around a reference trajectory;
* point drone, 9 states / 6 controls: three decoupled axes, each with
  (position, velocity, lagged acceleration) driven by an acceleration
  command through a first-order actuator lag plus a direct feed-forward
  velocity command.
"""

from dataclasses import dataclass

import numpy as np

DRONE_LAG_TAU = 0.2  # actuator lag time constant, seconds


@dataclass
class Trajectory:
    """States (K+1, n_x) and controls (K, n_u) over one horizon."""

    states: np.ndarray
    controls: np.ndarray

    @property
    def horizon(self):
        return self.controls.shape[0]

    def copy(self):
        return Trajectory(self.states.copy(), self.controls.copy())


@dataclass
class LinearModel:
    """x_{k+1} = A_k x_k + B_k u_k + c_k.

    A, B, c are either single matrices (time-invariant, c defaults to 0)
    or stacked per-timestep arrays of length equal to the horizon.
    """

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    n_x: int
    n_u: int
    dt: float

    @property
    def time_varying(self):
        return self.A.ndim == 3

    @property
    def horizon(self):
        return self.A.shape[0] if self.time_varying else None

    def step_matrices(self, k):
        if self.time_varying:
            return self.A[k], self.B[k], self.c[k]
        return self.A, self.B, self.c


def double_integrator_model(dt: float) -> LinearModel:
    """Exact ZOH discretization: p' = p + dt v + dt^2/2 u, v' = v + dt u."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    A = np.eye(4)
    A[0, 2] = dt
    A[1, 3] = dt
    B = np.array([
        [dt * dt / 2, 0.0],
        [0.0, dt * dt / 2],
        [dt, 0.0],
        [0.0, dt],
    ])
    return LinearModel(A=A, B=B, c=np.zeros(4), n_x=4, n_u=2, dt=dt)


def dubins_step(state, control, dt):
    """Nonlinear forward-Euler Dubins step; theta wrapped to (-pi, pi]."""
    px, py, th, v = state
    a, om = control
    nxt = np.array([
        px + dt * v * np.cos(th),
        py + dt * v * np.sin(th),
        th + dt * om,
        v + dt * a,
    ])
    nxt[2] = wrap_angle(nxt[2])
    return nxt


def wrap_angle(th):
    """Wrap to (-pi, pi]."""
    w = (th + np.pi) % (2 * np.pi) - np.pi
    if isinstance(w, np.ndarray):
        w[w == -np.pi] = np.pi
    elif w == -np.pi:
        w = np.pi
    return w


def dubins_linearize(reference: Trajectory, dt: float, horizon: int | None = None) -> LinearModel:
    """Time-varying affine model from first-order expansion of the Dubins ODE.

    The offset c_k is chosen so that the reference trajectory satisfies the
    linear model exactly, which keeps the expansion point feasible even when
    the reference itself is not Euler-consistent.
    """
    K = reference.horizon if horizon is None else horizon
    if reference.horizon < K or reference.states.shape[0] < K + 1:
        raise ValueError(f"reference covers {reference.horizon} steps, need {K}")
    A = np.zeros((K, 4, 4))
    B = np.zeros((K, 4, 2))
    c = np.zeros((K, 4))
    for k in range(K):
        _, _, th, v = reference.states[k]
        Ak = np.eye(4)
        Ak[0, 2] = -dt * v * np.sin(th)
        Ak[0, 3] = dt * np.cos(th)
        Ak[1, 2] = dt * v * np.cos(th)
        Ak[1, 3] = dt * np.sin(th)
        Bk = np.zeros((4, 2))
        Bk[3, 0] = dt   # v' <- a
        Bk[2, 1] = dt   # theta' <- omega
        A[k] = Ak
        B[k] = Bk
        c[k] = reference.states[k + 1] - Ak @ reference.states[k] - Bk @ reference.controls[k]
    return LinearModel(A=A, B=B, c=c, n_x=4, n_u=2, dt=dt)


def drone_model(dt: float) -> LinearModel:
    """9-state / 6-control point drone, three decoupled axes.

    State (px,py,pz, vx,vy,vz, ax,ay,az); controls are three acceleration
    commands followed by three feed-forward commands. Euler discretized with
    actuator lag tau; all eigenvalues of A lie in the closed unit disk.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    A = np.eye(9)
    B = np.zeros((9, 6))
    for i in range(3):
        A[i, 3 + i] = dt                      # position <- velocity
        A[3 + i, 6 + i] = dt                  # velocity <- lagged accel
        A[6 + i, 6 + i] = 1.0 - dt / DRONE_LAG_TAU
        B[6 + i, i] = dt / DRONE_LAG_TAU      # accel command through lag
        B[3 + i, 3 + i] = dt                  # feed-forward on velocity
    return LinearModel(A=A, B=B, c=np.zeros(9), n_x=9, n_u=6, dt=dt)


def rollout(model: LinearModel, x0, controls) -> Trajectory:
    """Roll the linear model forward; len(controls)+1 states."""
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.shape[0] != model.n_x:
        raise ValueError(f"x0 has dimension {x0.shape[0]}, model expects {model.n_x}")
    if controls.shape[1] != model.n_u:
        raise ValueError(f"controls have dimension {controls.shape[1]}, model expects {model.n_u}")
    T = controls.shape[0]
    if model.time_varying and T > model.horizon:
        raise ValueError("control sequence longer than model horizon")
    states = np.zeros((T + 1, model.n_x))
    states[0] = x0
    for k in range(T):
        A, B, c = model.step_matrices(k)
        states[k + 1] = A @ states[k] + B @ controls[k] + c
    return Trajectory(states=states, controls=controls)


# Position coordinates are the leading state entries for every model.
def position_dim(model_kind: str) -> int:
    return 3 if model_kind == "drone" else 2


def state_dim(model_kind: str) -> int:
    return {"double_integrator": 4, "dubins": 4, "drone": 9}[model_kind]


def control_dim(model_kind: str) -> int:
    return {"double_integrator": 2, "dubins": 2, "drone": 6}[model_kind]
