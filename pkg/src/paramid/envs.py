"""Deterministic 2-D simulators with ground-truth parameter-influence graphs.

Four environments, all integrated with explicit Euler where velocities see the
forces and positions advance from the pre-update velocity. That ordering keeps
the one-step Jacobian of positions free of parameter entries, so the dependency
graphs stay exactly the documented ones.

State layout is object-contiguous: ``[px, py, vx, vy]`` per object,
concatenated over objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .graphs import AdjacencyMatrix, GraphFamily

__all__ = [
    "ENV_NAMES",
    "EnvConstants",
    "SystemSpec",
    "Trajectory",
    "make_spec",
    "sample_params",
    "init_state",
    "step",
    "step_events",
    "rollout",
    "ground_truth_global_graph",
    "local_graph_at",
    "local_graph_family",
    "jacobian_fd",
    "theta_boundary_gap",
    "SimulationError",
    "InfeasibleStateError",
]

ENV_NAMES = ("dual-particle", "local-particle", "springs", "bounce")

# spring pairings for the 4-object springs env, column order of the graph
SPRING_PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


class SimulationError(ValueError):
    """Non-finite state or malformed simulator input."""


class InfeasibleStateError(RuntimeError):
    """Rejection sampling could not place a valid initial configuration."""


@dataclass(frozen=True)
class EnvConstants:
    ball_radius_factor: float = 0.05  # bounce: disc radius = factor * mass
    slack_radius: float = 0.3         # local-particle: spring dead zone
    box_half_width: float = 1.0       # particle/springs: positions in [-w, w]
    mass_clamp: tuple[float, float] = (0.2, 2.0)
    damping_range: tuple[float, float] = (0.1, 2.0)
    spring_active_prob: float = 0.7
    init_speed: float = 0.5


_ENV_LAYOUT = {
    # env: (objects, params)
    "dual-particle": (2, 3),
    "local-particle": (1, 3),
    "springs": (4, 6),
    "bounce": (5, 5),
}


@dataclass(frozen=True)
class SystemSpec:
    env: str
    dt: float = 0.05
    horizon: int = 50
    token_mode: str = "per-dim"
    constants: EnvConstants = field(default_factory=EnvConstants)

    def __post_init__(self):
        if self.env not in ENV_NAMES:
            raise SimulationError(f"unknown environment {self.env!r}")
        if self.dt <= 0:
            raise SimulationError("dt must be positive")
        if self.horizon < 2:
            raise SimulationError("horizon must be at least 2")
        if self.token_mode not in ("per-dim", "per-object"):
            raise SimulationError(f"unknown token mode {self.token_mode!r}")

    @property
    def num_objects(self) -> int:
        return _ENV_LAYOUT[self.env][0]

    @property
    def state_dim(self) -> int:
        return 4 * self.num_objects

    @property
    def param_dim(self) -> int:
        return _ENV_LAYOUT[self.env][1]

    @property
    def state_tokens(self) -> int:
        return self.num_objects if self.token_mode == "per-object" else self.state_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["constants"]["mass_clamp"] = list(d["constants"]["mass_clamp"])
        d["constants"]["damping_range"] = list(d["constants"]["damping_range"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SystemSpec":
        c = dict(d.get("constants", {}))
        if "mass_clamp" in c:
            c["mass_clamp"] = tuple(c["mass_clamp"])
        if "damping_range" in c:
            c["damping_range"] = tuple(c["damping_range"])
        return cls(
            env=d["env"],
            dt=d.get("dt", 0.05),
            horizon=d["horizon"],
            token_mode=d.get("token_mode", "per-dim"),
            constants=EnvConstants(**c),
        )


def make_spec(env: str, **overrides) -> SystemSpec:
    """Spec with the per-environment defaults (bounce runs longer, per-object)."""
    defaults = {"dt": 0.05, "horizon": 50, "token_mode": "per-dim"}
    if env == "springs":
        defaults["token_mode"] = "per-object"
    elif env == "bounce":
        defaults.update(horizon=100, token_mode="per-object")
    defaults.update(overrides)
    return SystemSpec(env=env, **defaults)


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray  # (horizon + 1, state_dim)
    params: np.ndarray  # (param_dim,)
    seed: int


# ---------------------------------------------------------------------------
# sampling


def sample_params(spec: SystemSpec, rng: np.random.Generator) -> np.ndarray:
    c = spec.constants
    if spec.env in ("dual-particle", "local-particle"):
        lo, hi = c.damping_range
        return rng.uniform(lo, hi, size=3)
    if spec.env == "springs":
        k = np.abs(rng.standard_normal(6))
        active = rng.random(6) < c.spring_active_prob
        return k * active
    # bounce
    m = rng.normal(1.0, 0.25, size=5)
    return np.clip(m, *c.mass_clamp)


def init_state(spec: SystemSpec, rng: np.random.Generator, params=None) -> np.ndarray:
    """Initial state draw; bounce needs the parameters (they set the disc radii)."""
    c = spec.constants
    n_obj = spec.num_objects
    if spec.env != "bounce":
        pos = rng.uniform(-c.box_half_width, c.box_half_width, size=(n_obj, 2))
        vel = rng.uniform(-c.init_speed, c.init_speed, size=(n_obj, 2))
        return _pack(pos, vel)
    if params is None:
        raise SimulationError("bounce initial states require params (disc radii)")
    return init_state_bounce(spec, np.asarray(params, dtype=float), rng)


def init_state_bounce(
    spec: SystemSpec, params: np.ndarray, rng: np.random.Generator, max_attempts: int = 10_000
) -> np.ndarray:
    """Place discs uniformly in the unit box, rejecting overlapping layouts."""
    radii = spec.constants.ball_radius_factor * np.asarray(params)
    n_obj = spec.num_objects
    if (radii >= 0.5).any():
        raise InfeasibleStateError("a disc is too large for the unit box")
    for _ in range(max_attempts):
        pos = np.stack(
            [rng.uniform(radii[i], 1.0 - radii[i], size=2) for i in range(n_obj)]
        )
        d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
        min_sep = radii[:, None] + radii[None, :]
        iu = np.triu_indices(n_obj, k=1)
        if (d[iu] >= min_sep[iu]).all():
            vel = rng.uniform(-spec.constants.init_speed, spec.constants.init_speed, size=(n_obj, 2))
            return _pack(pos, vel)
    raise InfeasibleStateError(f"no overlap-free layout found in {max_attempts} attempts")


def initial_condition(spec: SystemSpec, rng: np.random.Generator):
    """(params, x0) drawn in a fixed order so one generator drives both."""
    params = sample_params(spec, rng)
    x0 = init_state(spec, rng, params)
    return params, x0


def _pack(pos: np.ndarray, vel: np.ndarray) -> np.ndarray:
    return np.concatenate([pos, vel], axis=1).reshape(-1)


def _unpack(spec: SystemSpec, x: np.ndarray):
    obj = np.asarray(x, dtype=float).reshape(spec.num_objects, 4)
    return obj[:, :2], obj[:, 2:]


# ---------------------------------------------------------------------------
# dynamics


def step(spec: SystemSpec, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return step_events(spec, x, theta)[0]


def step_events(spec: SystemSpec, x: np.ndarray, theta: np.ndarray):
    """One transition plus the contact events that shaped it.

    Events are ``("pair", i, j)`` for a ball-ball impulse and
    ``("wall", i, axis)`` for a wall reflection; empty for the smooth
    environments.
    """
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if x.shape != (spec.state_dim,):
        raise SimulationError(f"state must have shape ({spec.state_dim},), got {x.shape}")
    if theta.shape != (spec.param_dim,):
        raise SimulationError(f"theta must have shape ({spec.param_dim},), got {theta.shape}")
    if not (np.isfinite(x).all() and np.isfinite(theta).all()):
        raise SimulationError("non-finite simulator input")

    pos, vel = _unpack(spec, x)
    dt = spec.dt
    events: list[tuple] = []

    if spec.env == "dual-particle":
        k, cx, cy = theta
        force = np.empty_like(vel)
        force[0] = -k * pos[0] - np.array([cx * vel[0, 0], cy * vel[0, 1]])
        force[1] = -np.array([cx * vel[1, 0], cy * vel[1, 1]])
        new_vel = vel + dt * force
        new_pos = pos + dt * vel
    elif spec.env == "local-particle":
        k, cx, cy = theta
        spring_on = np.linalg.norm(pos[0]) > spec.constants.slack_radius
        force = -np.array([cx * vel[0, 0], cy * vel[0, 1]])
        if spring_on:
            force = force - k * pos[0]
        new_vel = vel + dt * force[None, :]
        new_pos = pos + dt * vel
    elif spec.env == "springs":
        force = np.zeros_like(pos)
        for s, (i, j) in enumerate(SPRING_PAIRS):
            f = -theta[s] * (pos[i] - pos[j])
            force[i] += f
            force[j] -= f
        new_vel = vel + dt * force
        new_pos = pos + dt * vel
    else:
        new_pos, new_vel, events = _bounce_step(spec, pos, vel, theta)

    return _pack(new_pos, new_vel), events


def _bounce_step(spec: SystemSpec, pos, vel, masses):
    """Free flight + elastic wall/disc handling.

    Impulses for every overlapping, approaching pair are computed from the
    *input* velocities and applied additively, so simultaneous contacts stay
    pairwise-local in their mass dependencies. Wall penetration of the
    position advanced by the old velocity is resolved by reflection about the
    radius-inset wall, which is what makes the step genuinely depend on the
    contacting ball's radius.
    """
    dt = spec.dt
    radii = spec.constants.ball_radius_factor * masses
    n_obj = pos.shape[0]
    events = []

    dv = np.zeros_like(vel)
    for i in range(n_obj):
        for j in range(i + 1, n_obj):
            delta = pos[i] - pos[j]
            dist = float(np.hypot(delta[0], delta[1]))
            if dist <= 0.0 or dist >= radii[i] + radii[j]:
                continue
            normal = delta / dist
            closing = float(np.dot(vel[i] - vel[j], normal))
            if closing >= 0.0:
                continue
            m_i, m_j = masses[i], masses[j]
            dv[i] += -(2.0 * m_j / (m_i + m_j)) * closing * normal
            dv[j] += +(2.0 * m_i / (m_i + m_j)) * closing * normal
            events.append(("pair", i, j))
    new_vel = vel + dv
    new_pos = pos + dt * vel

    for i in range(n_obj):
        lo, hi = radii[i], 1.0 - radii[i]
        for axis in range(2):
            if new_pos[i, axis] < lo:
                new_pos[i, axis] = 2.0 * lo - new_pos[i, axis]
                if new_vel[i, axis] < 0.0:
                    new_vel[i, axis] = -new_vel[i, axis]
                events.append(("wall", i, axis))
            elif new_pos[i, axis] > hi:
                new_pos[i, axis] = 2.0 * hi - new_pos[i, axis]
                if new_vel[i, axis] > 0.0:
                    new_vel[i, axis] = -new_vel[i, axis]
                events.append(("wall", i, axis))
    return new_pos, new_vel, events


def rollout(
    spec: SystemSpec, x0: np.ndarray, theta: np.ndarray, quantize32: bool = False
) -> np.ndarray:
    """Autoregressive application of ``step`` over the spec horizon.

    With ``quantize32`` every stored row (including row 0 and the parameters
    as used) is rounded to float32 before the next step consumes it, making
    float32-stored trajectories re-validate bit-exactly.
    """
    x = np.asarray(x0, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if quantize32:
        x = x.astype(np.float32).astype(np.float64)
        theta = theta.astype(np.float32).astype(np.float64)
    states = np.empty((spec.horizon + 1, spec.state_dim))
    states[0] = x
    for t in range(spec.horizon):
        x = step(spec, x, theta)
        if quantize32:
            x = x.astype(np.float32).astype(np.float64)
        states[t + 1] = x
    return states


# ---------------------------------------------------------------------------
# ground-truth graphs


def _collapse_per_object(spec: SystemSpec, per_dim: np.ndarray) -> np.ndarray:
    return per_dim.reshape(spec.num_objects, 4, spec.param_dim).any(axis=1)


def _graph_at_granularity(spec: SystemSpec, per_dim: np.ndarray) -> AdjacencyMatrix:
    if spec.token_mode == "per-object":
        return AdjacencyMatrix(_collapse_per_object(spec, per_dim))
    return AdjacencyMatrix(per_dim)


def _vel_rows(obj: int) -> tuple[int, int]:
    return 4 * obj + 2, 4 * obj + 3


def _per_dim_global(spec: SystemSpec) -> np.ndarray:
    g = np.zeros((spec.state_dim, spec.param_dim), dtype=bool)
    if spec.env == "dual-particle":
        g[list(_vel_rows(0)), 0] = True                    # spring -> particle-1 velocities
        g[[_vel_rows(0)[0], _vel_rows(1)[0]], 1] = True    # x damping -> both vx
        g[[_vel_rows(0)[1], _vel_rows(1)[1]], 2] = True    # y damping -> both vy
    elif spec.env == "local-particle":
        g[list(_vel_rows(0)), 0] = True
        g[_vel_rows(0)[0], 1] = True
        g[_vel_rows(0)[1], 2] = True
    elif spec.env == "springs":
        for s, (i, j) in enumerate(SPRING_PAIRS):
            g[list(_vel_rows(i) + _vel_rows(j)), s] = True
    else:  # bounce: velocities may feel any mass, positions only their own radius
        for i in range(spec.num_objects):
            g[list(_vel_rows(i)), :] = True
            g[4 * i, i] = g[4 * i + 1, i] = True
    return g


def ground_truth_global_graph(spec: SystemSpec) -> AdjacencyMatrix:
    return _graph_at_granularity(spec, _per_dim_global(spec))


def local_graph_at(spec: SystemSpec, x: np.ndarray, theta: np.ndarray) -> AdjacencyMatrix:
    """Active edges of the transition out of state ``x``.

    Smooth environments return their global graph (no state dependence in
    dual-particle/springs; the local-particle spring drops inside the slack
    ball). Bounce edges come from the contact events of this exact step.
    """
    if spec.env == "dual-particle":
        return ground_truth_global_graph(spec)
    if spec.env == "springs":
        return ground_truth_global_graph(spec)
    if spec.env == "local-particle":
        per_dim = _per_dim_global(spec)
        pos, _ = _unpack(spec, x)
        if np.linalg.norm(pos[0]) <= spec.constants.slack_radius:
            per_dim = per_dim.copy()
            per_dim[:, 0] = False
        return _graph_at_granularity(spec, per_dim)

    _, events = step_events(spec, x, theta)
    per_dim = np.zeros((spec.state_dim, spec.param_dim), dtype=bool)
    for ev in events:
        if ev[0] == "pair":
            _, i, j = ev
            rows = list(_vel_rows(i) + _vel_rows(j))
            per_dim[np.ix_(rows, [i, j])] = True
        else:
            _, i, axis = ev
            per_dim[4 * i + axis, i] = True
    return _graph_at_granularity(spec, per_dim)


def local_graph_family(spec: SystemSpec) -> GraphFamily:
    """Canonical partition family used by the criterion checks."""
    if spec.env in ("dual-particle", "springs"):
        return GraphFamily((ground_truth_global_graph(spec),), ("global",))
    if spec.env == "local-particle":
        per_dim = _per_dim_global(spec)
        inside = per_dim.copy()
        inside[:, 0] = False
        return GraphFamily(
            (
                _graph_at_granularity(spec, inside),
                _graph_at_granularity(spec, per_dim),
            ),
            ("inside-ball", "outside-ball"),
        )
    graphs = []
    labels = []
    n_obj = spec.num_objects
    for i in range(n_obj):
        for j in range(i + 1, n_obj):
            per_dim = np.zeros((spec.state_dim, spec.param_dim), dtype=bool)
            rows = list(_vel_rows(i) + _vel_rows(j))
            per_dim[np.ix_(rows, [i, j])] = True
            graphs.append(_graph_at_granularity(spec, per_dim))
            labels.append(f"pair-{i}-{j}")
    for i in range(n_obj):
        per_dim = np.zeros((spec.state_dim, spec.param_dim), dtype=bool)
        per_dim[4 * i, i] = per_dim[4 * i + 1, i] = True
        graphs.append(_graph_at_granularity(spec, per_dim))
        labels.append(f"wall-{i}")
    graphs.append(AdjacencyMatrix.zeros(graphs[0].rows, graphs[0].cols))
    labels.append("free-flight")
    return GraphFamily(tuple(graphs), tuple(labels))


# ---------------------------------------------------------------------------
# numerical checks


def jacobian_fd(spec: SystemSpec, x, theta, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of step w.r.t. each parameter, (d, n)."""
    theta = np.asarray(theta, dtype=float)
    out = np.empty((spec.state_dim, spec.param_dim))
    for j in range(spec.param_dim):
        up = theta.copy()
        dn = theta.copy()
        up[j] += h
        dn[j] -= h
        out[:, j] = (step(spec, x, up) - step(spec, x, dn)) / (2.0 * h)
    return out


def theta_boundary_gap(spec: SystemSpec, x, theta) -> float:
    """Distance of this state to the nearest parameter-dependent partition edge.

    Only bounce has boundaries that move with theta (disc radii). Finite
    differences across such an edge are meaningless, so samplers reject
    states with a small gap.
    """
    if spec.env != "bounce":
        return np.inf
    pos, vel = _unpack(spec, x)
    radii = spec.constants.ball_radius_factor * np.asarray(theta)
    gaps = []
    n_obj = spec.num_objects
    for i in range(n_obj):
        for j in range(i + 1, n_obj):
            dist = float(np.linalg.norm(pos[i] - pos[j]))
            gaps.append(abs(dist - (radii[i] + radii[j])))
    probe = pos + spec.dt * vel  # wall detection happens on the advanced position
    for i in range(n_obj):
        for axis in range(2):
            gaps.append(abs(probe[i, axis] - radii[i]))
            gaps.append(abs(probe[i, axis] - (1.0 - radii[i])))
    return min(gaps)


def sample_probe_state(spec: SystemSpec, rng: np.random.Generator, margin: float = 1e-4):
    """Random (state, theta) in the interior of its partition.

    Positions are drawn over the whole box (bounce states may legitimately
    overlap, i.e. be mid-collision) so every partition gets probed.
    """
    for _ in range(1000):
        theta = sample_params(spec, rng)
        n_obj = spec.num_objects
        if spec.env == "bounce":
            pos = rng.uniform(0.0, 1.0, size=(n_obj, 2))
        else:
            w = spec.constants.box_half_width
            pos = rng.uniform(-w, w, size=(n_obj, 2))
        vel = rng.uniform(-spec.constants.init_speed, spec.constants.init_speed, size=(n_obj, 2))
        x = _pack(pos, vel)
        if theta_boundary_gap(spec, x, theta) > margin:
            return x, theta
    raise InfeasibleStateError("could not sample an interior probe state")
