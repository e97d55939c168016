"""The four benchmark scenarios plus the JSON scenario-config loader.

Circle formation (antipodal swap) for double integrators or Dubins cars,
the 3D drone analogue on a sphere, and the conveyor-to-conveyor warehouse
with continuous round-robin task assignment.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .constraints import Box
from .dynamics import control_dim, position_dim, state_dim

# control bounds per model; Dubins additionally bounds speed as a state
_LIMITS = {
    "double_integrator": (np.array([-2.0, -2.0]), np.array([2.0, 2.0]), []),
    "dubins": (np.array([-2.0, -2.0]), np.array([2.0, 2.0]),
               [(3, 0.0, 2.0)]),
    "drone": (np.full(6, -3.0), np.full(6, 3.0), []),
}


@dataclass
class TaskSource:
    """Two opposing conveyor strips with round-robin slot assignment."""

    slots_a: np.ndarray      # x positions of side-A slots
    slots_b: np.ndarray
    y_a: float
    y_b: float
    side: dict = field(default_factory=dict)       # agent -> 0 (A) or 1 (B)
    occupied: list = field(default_factory=lambda: [{}, {}])  # slot -> agent
    rr: list = field(default_factory=lambda: [0, 0])

    def goal_state(self, side_idx, slot_idx):
        x = (self.slots_a, self.slots_b)[side_idx][slot_idx]
        y = (self.y_a, self.y_b)[side_idx]
        theta = np.pi / 2 if side_idx == 0 else -np.pi / 2
        return np.array([x, y, theta, 0.0])

    def assign_initial(self, agent, slot_idx):
        self.side[agent] = 0
        self.occupied[0][slot_idx] = agent
        return self.goal_state(0, slot_idx)


def next_task(source: TaskSource, agent) -> np.ndarray:
    """Free the reached slot and hand out one on the opposite conveyor."""
    old_side = source.side[agent]
    new_side = 1 - old_side
    for slot, a in list(source.occupied[old_side].items()):
        if a == agent:
            del source.occupied[old_side][slot]
    slots = (source.slots_a, source.slots_b)[new_side]
    n = len(slots)
    for off in range(n):
        cand = (source.rr[new_side] + off) % n
        if cand not in source.occupied[new_side]:
            source.occupied[new_side][cand] = agent
            source.rr[new_side] = (cand + 1) % n
            source.side[agent] = new_side
            return source.goal_state(new_side, cand)
    raise RuntimeError("no free slot on the opposite conveyor")


@dataclass
class Scenario:
    name: str
    model: str
    n_agents: int
    starts: np.ndarray
    goals: np.ndarray
    obstacles: list
    d_safe: float
    horizon: int
    dt: float
    dim: int
    u_lo: np.ndarray
    u_hi: np.ndarray
    state_bounds: list
    task_source: TaskSource | None = None
    tasks_per_agent: int = 3
    # extra separation demanded by the planner's collision rows; absorbs the
    # consensus disagreement left at a finite iteration budget, while
    # verification still judges at d_safe
    plan_margin: float = 0.0

    def __post_init__(self):
        if self.plan_margin == 0.0:
            self.plan_margin = 0.5 * self.d_safe
        dists = [np.linalg.norm(self.starts[i, :self.dim] - self.starts[j, :self.dim])
                 for i in range(self.n_agents) for j in range(i + 1, self.n_agents)]
        if dists and min(dists) < self.d_safe:
            raise ValueError(
                f"starts are only {min(dists):.3f} m apart, need >= {self.d_safe}")
        for box in self.obstacles:
            for s in self.starts:
                if box.contains(s[:self.dim]):
                    raise ValueError("an agent starts inside an obstacle")


def circle_formation(n, radius=None, model="double_integrator", dt=0.075,
                     horizon=40, d_safe=0.3) -> Scenario:
    """Equally spaced starts on a circle, each goal the antipodal start.

    The default radius differs by model: the double-integrator circle is
    solved single-shot, so the crossing (plus avoidance detour) must be
    reachable within K*dt under the actuation bounds; the Dubins circle is
    driven by a replanning MPC and uses a larger arena.
    """
    if radius is None:
        radius = 1.25 if model == "double_integrator" else 2.5
    if n < 2 or n % 2 != 0:
        raise ValueError("circle formation needs an even agent count >= 2")
    if radius <= n * d_safe / np.pi:
        raise ValueError(f"radius {radius} too small to pack {n} agents")
    nx = state_dim(model)
    starts = np.zeros((n, nx))
    angles = 2 * np.pi * np.arange(n) / n
    starts[:, 0] = radius * np.cos(angles)
    starts[:, 1] = radius * np.sin(angles)
    goals = np.zeros((n, nx))
    opposite = (np.arange(n) + n // 2) % n
    goals[:, :2] = starts[opposite, :2]
    if model == "dubins":
        heading = np.arctan2(goals[:, 1] - starts[:, 1],
                             goals[:, 0] - starts[:, 0])
        starts[:, 2] = heading
        goals[:, 2] = heading
    u_lo, u_hi, sb = _LIMITS[model]
    return Scenario(name="circle", model=model, n_agents=n, starts=starts,
                    goals=goals, obstacles=[], d_safe=d_safe, horizon=horizon,
                    dt=dt, dim=2, u_lo=u_lo, u_hi=u_hi, state_bounds=sb)


def drone_scenario(n, radius=2.5, dt=0.075, horizon=40, d_safe=0.5) -> Scenario:
    """Antipodal position swap on a sphere (equatorial great circle), so the
    arrangement stays symmetric under the rotation mapping agent i to i+1."""
    if n < 2:
        raise ValueError("need at least two drones")
    nx = state_dim("drone")
    starts = np.zeros((n, nx))
    angles = 2 * np.pi * np.arange(n) / n
    starts[:, 0] = radius * np.cos(angles)
    starts[:, 1] = radius * np.sin(angles)
    goals = np.zeros((n, nx))
    goals[:, :3] = -starts[:, :3]
    u_lo, u_hi, sb = _LIMITS["drone"]
    return Scenario(name="sphere", model="drone", n_agents=n, starts=starts,
                    goals=goals, obstacles=[], d_safe=d_safe, horizon=horizon,
                    dt=dt, dim=3, u_lo=u_lo, u_hi=u_hi, state_bounds=sb)


def warehouse(n=5, width=8.0, height=8.0, dt=0.075, horizon=40, d_safe=0.3,
              n_slots=None, tasks_per_agent=3) -> Scenario:
    """Dubins fleet shuttling between two opposing conveyor belts.

    The conveyors are 0.5 m deep boxes along the +y and -y walls; goal slots
    sit 0.5 m clear of the conveyor faces and tasks alternate sides.
    """
    if n_slots is None:
        n_slots = max(n, 2)
    if n > n_slots:
        raise ValueError(f"{n} agents need at least {n} slots per conveyor")
    hw, hh = width / 2, height / 2
    belt_a = Box([-hw + 1.0, hh - 0.5], [hw - 1.0, hh])
    belt_b = Box([-hw + 1.0, -hh], [hw - 1.0, -hh + 0.5])
    slot_x = np.linspace(-hw + 1.5, hw - 1.5, n_slots)
    source = TaskSource(slots_a=slot_x, slots_b=slot_x.copy(),
                        y_a=hh - 1.0, y_b=-hh + 1.0)
    starts = np.zeros((n, 4))
    starts[:, 0] = np.linspace(-hw + 1.0, hw - 1.0, n)
    starts[:, 2] = np.pi / 2
    goals = np.zeros((n, 4))
    for i in range(n):
        goals[i] = source.assign_initial(i, i % n_slots)
    u_lo, u_hi, sb = _LIMITS["dubins"]
    return Scenario(name="warehouse", model="dubins", n_agents=n,
                    starts=starts, goals=goals, obstacles=[belt_a, belt_b],
                    d_safe=d_safe, horizon=horizon, dt=dt, dim=2,
                    u_lo=u_lo, u_hi=u_hi, state_bounds=sb,
                    task_source=source, tasks_per_agent=tasks_per_agent)


# ---------------------------------------------------------------------------
# JSON config

_SCENARIO_ALIASES = {
    "circle2d": ("circle", "double_integrator"),
    "circle": ("circle", None),
    "dubins_circle": ("circle", "dubins"),
    "warehouse": ("warehouse", "dubins"),
    "drone3d": ("sphere", "drone"),
    "sphere": ("sphere", "drone"),
}

_SCHEMA = {
    "scenario": str,
    "n_agents": int,
    "radius": (int, float),
    "d_safe": (int, float),
    "dt": (int, float),
    "horizon": int,
    "model": str,
    "seed": int,
    "obstacles": list,
    "method": (str, list),
    "p_delay": (int, float, list),
    "d_max": (int, list),
    "iterations": int,
    "sqp_iters": int,
}


@dataclass
class ScenarioConfig:
    scenario: Scenario
    mode: str                 # trajopt | mpc
    method: object            # str or list of str
    p_delay: object
    d_max: object
    iterations: int
    sqp_iters: int
    seed: int
    raw: dict


def build_scenario(cfg: dict) -> Scenario:
    name = cfg.get("scenario")
    kind, default_model = _SCENARIO_ALIASES[name]
    model = cfg.get("model", default_model)
    kwargs = {}
    for key, param in (("n_agents", "n"), ("radius", "radius"),
                       ("d_safe", "d_safe"), ("dt", "dt"),
                       ("horizon", "horizon")):
        if key in cfg:
            kwargs[param] = cfg[key]
    if kind == "circle":
        kwargs.setdefault("n", 8)
        scen = circle_formation(model=model or "double_integrator", **kwargs)
    elif kind == "sphere":
        kwargs.setdefault("n", 10)
        scen = drone_scenario(**kwargs)
    else:
        kwargs.setdefault("n", 5)
        kwargs.pop("radius", None)
        scen = warehouse(**kwargs)
    if cfg.get("obstacles"):
        extra = [Box(o["lo"], o["hi"]) for o in cfg["obstacles"]]
        scen.obstacles = scen.obstacles + extra
    return scen


def load_scenario(text: str) -> ScenarioConfig:
    """Parse and validate a scenario config document.

    Unknown keys are rejected; malformed values raise errors that name the
    offending key; scenario invariants (packing, obstacle overlap) are
    enforced by the constructors.
    """
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValueError("config must be a JSON object")
    if "scenario" not in cfg:
        raise ValueError("config is missing required key 'scenario'")
    for key, val in cfg.items():
        if key not in _SCHEMA:
            raise ValueError(f"unknown config key: {key!r}")
        if not isinstance(val, _SCHEMA[key]) or isinstance(val, bool):
            raise ValueError(
                f"config key {key!r} has invalid value {val!r} "
                f"(expected {_SCHEMA[key]})")
    if cfg["scenario"] not in _SCENARIO_ALIASES:
        raise ValueError(f"unknown scenario {cfg['scenario']!r} "
                         f"(choose from {sorted(_SCENARIO_ALIASES)})")

    scen = build_scenario(cfg)
    mode = "trajopt" if scen.model == "double_integrator" else "mpc"
    iterations = cfg.get("iterations", 30 if mode == "trajopt" else 10)
    sqp_iters = cfg.get("sqp_iters", 5 if mode == "trajopt" else 1)
    d_max = cfg.get("d_max", 1)
    for dm in (d_max if isinstance(d_max, list) else [d_max]):
        if not 0 <= dm < scen.horizon:
            raise ValueError(f"config key 'd_max' must satisfy 0 <= d_max < K, got {dm}")
    p_delay = cfg.get("p_delay", 0.0)
    for p in (p_delay if isinstance(p_delay, list) else [p_delay]):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"config key 'p_delay' must lie in [0, 1], got {p}")
    return ScenarioConfig(
        scenario=scen, mode=mode, method=cfg.get("method", "da"),
        p_delay=p_delay, d_max=d_max, iterations=iterations,
        sqp_iters=sqp_iters, seed=cfg.get("seed", 0), raw=cfg)
