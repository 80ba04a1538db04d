"""Mixed-autonomy traffic merge simulator at desk scale.

Two single-lane roads join into one. Human-driven vehicles follow the
Intelligent Driver Model; a varying subset of vehicles is controlled through
raw accelerations. Merge precedence is first-come-first-served by position,
with a gap gate at the junction so overlaps are impossible by construction.

The observation vector and reward are reconstructions chosen for this
artifact (normalized kinematic features; normalized mean speed minus an
action-energy penalty), not values inherited from any external benchmark.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .graph import AgentGraph, ObservationBatch, apply_edge_dropout
from .numerics import Rng

MAIN, RAMP, MERGED = "main", "ramp", "merged"

ACTION_LOW = -3.0
ACTION_HIGH = 3.0
GAP_MIN = 1.0          # smallest bumper-to-bumper gap the integrator allows
HOLD_BACK = 0.5        # how far short of the junction a gated vehicle waits


class SimulationError(RuntimeError):
    """Raised when the simulator violates its own physical invariants."""


@dataclass(frozen=True)
class IdmParams:
    """Intelligent Driver Model constants (standard literature defaults)."""

    v0: float = 30.0         # desired speed, m/s
    t_headway: float = 1.0   # desired time headway, s
    a_max: float = 1.0       # maximum acceleration, m/s^2
    b_comf: float = 1.5      # comfortable deceleration, m/s^2
    delta: float = 4.0       # acceleration exponent
    s0: float = 2.0          # jam distance, m

    def __post_init__(self):
        for name in ("v0", "t_headway", "a_max", "b_comf", "delta", "s0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"IdmParams.{name} must be positive")


def idm_accel(v: float, v_lead: float, gap: float, p: IdmParams) -> float:
    """Car-following acceleration. Use gap=inf, v_lead=v for a free road."""
    if gap <= 0.0:
        raise SimulationError(f"idm_accel called with non-positive gap {gap}")
    s_star = p.s0 + max(0.0, v * p.t_headway
                        + v * (v - v_lead) / (2.0 * math.sqrt(p.a_max * p.b_comf)))
    return p.a_max * (1.0 - (v / p.v0) ** p.delta - (s_star / gap) ** 2)


@dataclass
class Vehicle:
    vid: int
    route: str        # MAIN | RAMP | MERGED
    pos: float        # meters along the current edge
    speed: float
    controlled: bool


@dataclass(frozen=True)
class EnvConfig:
    """Geometry, demand, control and graph settings for one scenario."""

    main_len: float = 250.0
    ramp_len: float = 120.0
    out_len: float = 200.0
    veh_len: float = 5.0
    inflow_main: float = 0.5       # veh/s
    inflow_ramp: float = 0.25
    penetration: float = 0.3       # probability a spawned vehicle is controlled
    max_controlled: int = 5
    control_slots: int | None = None  # MLP runs: policy drives only this many
    dt: float = 0.5
    horizon: int = 300
    warmup_steps: int = 150
    accel_penalty: float = 0.1     # reward weight on mean squared action
    max_rel_pos: int = 3           # saturation rank p; C = 2p + 1
    edge_dropout: float = 0.0
    merge_zone: float = 60.0       # cross-lane visibility window before the junction
    spawn_headway: float = 15.0    # entry stays blocked below this front gap
    max_gap_norm: float = 100.0    # observation normalizer for gaps
    idm: IdmParams = field(default_factory=IdmParams)

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.inflow_main < 0 or self.inflow_ramp < 0:
            raise ValueError("inflow rates must be non-negative")
        if max(self.inflow_main, self.inflow_ramp) * self.dt > 1.0:
            raise ValueError("inflow rate times dt must not exceed one arrival per step")
        if not (0.0 <= self.penetration <= 1.0):
            raise ValueError("penetration must lie in [0, 1]")
        if self.max_rel_pos < 0:
            raise ValueError("max_rel_pos must be non-negative")
        if not (0.0 <= self.edge_dropout <= 1.0):
            raise ValueError("edge_dropout must lie in [0, 1]")

    @property
    def num_classes(self) -> int:
        return 2 * self.max_rel_pos + 1


@dataclass
class SimState:
    """Complete simulator state; one instance per episode, never shared."""

    config: EnvConfig
    vehicles: list
    time: float = 0.0
    step_idx: int = 0
    next_vid: int = 0
    queue_main: int = 0
    queue_ramp: int = 0
    spawned: int = 0
    exited: int = 0
    rng_main: Rng = None
    rng_ramp: Rng = None
    rng_ctrl: Rng = None
    rng_graph: Rng = None


def x_net(v: Vehicle, cfg: EnvConfig) -> float:
    """Global longitudinal coordinate; the junction sits at main_len for both
    approaches and the merged edge continues beyond it."""
    if v.route == MAIN:
        return v.pos
    if v.route == RAMP:
        return v.pos + (cfg.main_len - cfg.ramp_len)
    return cfg.main_len + v.pos


def _lane(state: SimState, route: str):
    return sorted((v for v in state.vehicles if v.route == route), key=lambda v: v.pos)


def _relation_maps(state: SimState):
    """Leader/follower maps for the whole fleet in one pass.

    Leaders constrain car-following: same-lane nearest ahead; an approach
    lane's front vehicle additionally sees the merged-edge tail (queue
    spillback) and, inside the merge zone, the nearest cross-lane vehicle
    ahead of it. Followers mirror the same visibility.
    """
    cfg = state.config
    lanes = {MAIN: _lane(state, MAIN), RAMP: _lane(state, RAMP),
             MERGED: _lane(state, MERGED)}
    leaders, followers = {}, {}
    for route, lane in lanes.items():
        for rear, front in zip(lane, lane[1:]):
            leaders[rear.vid] = front
            followers[front.vid] = rear
    merged_tail = lanes[MERGED][0] if lanes[MERGED] else None
    for route in (MAIN, RAMP):
        lane = lanes[route]
        if not lane:
            continue
        front = lane[-1]
        vx = x_net(front, cfg)
        cands = []
        if merged_tail is not None:
            cands.append(merged_tail)
        if cfg.main_len - vx < cfg.merge_zone:
            other = lanes[RAMP if route == MAIN else MAIN]
            cands += [u for u in other
                      if x_net(u, cfg) > vx
                      and cfg.main_len - x_net(u, cfg) < cfg.merge_zone]
        cands = [u for u in cands if x_net(u, cfg) > vx]
        if cands:
            leaders[front.vid] = min(cands, key=lambda u: x_net(u, cfg))
        # follower for the lane rear: nearest in-zone cross-lane vehicle behind
        rear = lane[0]
        rx = x_net(rear, cfg)
        other = lanes[RAMP if route == MAIN else MAIN]
        behind = [u for u in other
                  if x_net(u, cfg) < rx
                  and cfg.main_len - x_net(u, cfg) < cfg.merge_zone]
        if behind:
            followers[rear.vid] = max(behind, key=lambda u: x_net(u, cfg))
    if merged_tail is not None and merged_tail.vid not in followers:
        behind = [u for v_route in (MAIN, RAMP) for u in lanes[v_route]
                  if x_net(u, cfg) < x_net(merged_tail, cfg)]
        if behind:
            followers[merged_tail.vid] = max(behind, key=lambda u: x_net(u, cfg))
    return leaders, followers


def _leader_of(v: Vehicle, state: SimState):
    return _relation_maps(state)[0].get(v.vid)


def _follower_of(v: Vehicle, state: SimState):
    return _relation_maps(state)[1].get(v.vid)


def _gap_between(rear_x: float, front_x: float, cfg: EnvConfig) -> float:
    return front_x - cfg.veh_len - rear_x


def controlled_in_order(state: SimState):
    """Controlled vehicles sorted upstream-first; this fixes observation row
    order, action row order and graph agent order everywhere."""
    cfg = state.config
    ctrl = [v for v in state.vehicles if v.controlled]
    return sorted(ctrl, key=lambda v: (x_net(v, cfg), v.route, v.vid))


def n_action_rows(state: SimState) -> int:
    k = len(controlled_in_order(state))
    slots = state.config.control_slots
    return k if slots is None else min(k, slots)


def _idm_for(v: Vehicle, state: SimState, leaders=None) -> float:
    cfg = state.config
    lead = leaders.get(v.vid) if leaders is not None else _leader_of(v, state)
    if lead is None:
        return idm_accel(v.speed, v.speed, math.inf, cfg.idm)
    gap = _gap_between(x_net(v, cfg), x_net(lead, cfg), cfg)
    # cross-lane leaders can sit side by side (non-positive gap along the
    # projected coordinate); floor the gap so the model brakes hard instead
    # of treating lane geometry as a collision
    return idm_accel(v.speed, lead.speed, max(gap, 0.1), cfg.idm)


def step(state: SimState, actions: np.ndarray, build_outputs: bool = True):
    """Advance one timestep.

    ``actions`` holds one acceleration per policy-driven vehicle in
    upstream-first order (clipped to the actuator bounds); remaining controlled
    vehicles and all humans follow the IDM. Returns
    (state, obs, graph, reward, done); the state object is mutated in place.
    ``build_outputs=False`` skips observation/graph/reward assembly for
    warmup-style stepping.
    """
    cfg = state.config
    if actions is None:
        # warmup / pure-IDM stepping: every vehicle behaves as human-driven
        actions = np.zeros(0)
        ordered_ctrl = []
    else:
        actions = np.asarray(actions, dtype=np.float64).reshape(-1)
        k_expected = n_action_rows(state)
        if actions.size != k_expected:
            raise ValueError(f"expected {k_expected} actions, got {actions.size}")
        actions = np.clip(actions, ACTION_LOW, ACTION_HIGH)
        ordered_ctrl = controlled_in_order(state)

    accel = {}
    for rank, v in enumerate(ordered_ctrl):
        if rank < actions.size:
            accel[v.vid] = float(actions[rank])
    leaders, _ = _relation_maps(state)
    for v in state.vehicles:
        if v.vid not in accel:
            accel[v.vid] = _idm_for(v, state, leaders)   # humans and slot overflow

    # semi-implicit Euler with a hard speed floor at 0 and cap at the limit v0
    moves = {}
    for v in state.vehicles:
        new_speed = min(max(v.speed + accel[v.vid] * cfg.dt, 0.0), cfg.idm.v0)
        moves[v.vid] = (v.pos + new_speed * cfg.dt, new_speed)

    def settle(v, new_pos, new_speed, limit_x):
        """Clamp a tentative move so the vehicle stays behind limit_x (a
        global coordinate); speeds are recomputed from actual displacement."""
        offset = x_net(v, cfg) - v.pos
        allowed_local = (limit_x - cfg.veh_len - GAP_MIN) - offset
        if new_pos <= allowed_local:
            return new_pos, new_speed
        tgt = max(min(new_pos, allowed_local), v.pos)  # never move backwards
        return tgt, min((tgt - v.pos) / cfg.dt, new_speed)

    # merged edge: exits first, then front-to-back gap enforcement
    tail_x = math.inf
    for v in sorted((u for u in state.vehicles if u.route == MERGED),
                    key=lambda u: -u.pos):
        new_pos, new_speed = moves[v.vid]
        if new_pos > cfg.out_len:
            state.exited += 1
            state.vehicles.remove(v)
            continue
        v.pos, v.speed = settle(v, new_pos, new_speed, tail_x)
        tail_x = x_net(v, cfg)

    # junction: approach vehicles that crossed this step enter first-come-
    # first-served by arrival position, gated on room behind the merged tail
    crossing = [v for v in state.vehicles if v.route != MERGED
                and moves[v.vid][0] >= (cfg.main_len if v.route == MAIN else cfg.ramp_len)]
    held = set()
    for v in sorted(crossing, key=lambda u: -(x_net(u, cfg) - u.pos + moves[u.vid][0])):
        edge_len = cfg.main_len if v.route == MAIN else cfg.ramp_len
        new_pos, new_speed = moves[v.vid]
        old_x = x_net(v, cfg)
        allowed = tail_x - cfg.veh_len - GAP_MIN
        if allowed <= cfg.main_len:
            # no room past the junction: wait at the stop line
            v.pos = min(v.pos, edge_len - HOLD_BACK)
            v.speed = 0.0
            held.add(v.vid)
            continue
        enter_x = min(cfg.main_len + (new_pos - edge_len), allowed)
        v.route = MERGED
        v.pos = enter_x - cfg.main_len
        v.speed = min(new_speed, (enter_x - old_x) / cfg.dt)
        tail_x = enter_x

    # approach lanes: front-to-back clamping, the lane front against the
    # merged tail (queue spillback crosses the junction)
    for route in (MAIN, RAMP):
        front_x = tail_x
        for v in sorted((u for u in state.vehicles if u.route == route),
                        key=lambda u: -u.pos):
            if v.vid in held:
                front_x = x_net(v, cfg)
                continue
            new_pos, new_speed = moves[v.vid]
            v.pos, v.speed = settle(v, new_pos, new_speed, front_x)
            front_x = x_net(v, cfg)

    _check_ordering(state)
    _spawn_inflows(state)
    state.time += cfg.dt
    state.step_idx += 1
    done = state.step_idx >= cfg.horizon

    if not build_outputs:
        return state, None, None, 0.0, done
    obs = observe(state)
    graph = build_graph(state, cfg.max_rel_pos, cfg.edge_dropout, state.rng_graph)
    rew = reward(state, actions)
    return state, obs, graph, rew, done


def _check_ordering(state: SimState):
    """Simulator-bug tripwire: strict positive gaps along every physical lane."""
    cfg = state.config
    for route in (MAIN, RAMP, MERGED):
        lane = _lane(state, route)
        for rear, front in zip(lane, lane[1:]):
            if _gap_between(rear.pos, front.pos, cfg) <= 0.0:
                raise SimulationError(
                    f"overlap on {route}: vehicle {rear.vid} at {rear.pos:.2f} "
                    f"behind {front.vid} at {front.pos:.2f}")


def _spawn_inflows(state: SimState):
    cfg = state.config
    state.queue_main += int(state.rng_main.uniform() < cfg.inflow_main * cfg.dt)
    state.queue_ramp += int(state.rng_ramp.uniform() < cfg.inflow_ramp * cfg.dt)
    for route in (MAIN, RAMP):
        queued = state.queue_main if route == MAIN else state.queue_ramp
        if queued == 0:
            continue
        lane = _lane(state, route)
        lead = lane[0] if lane else None
        if lead is not None and lead.pos < cfg.spawn_headway:
            continue
        # the controlled-flag stream advances on every spawn so that demand
        # patterns stay identical across penetration settings
        flag_draw = state.rng_ctrl.uniform()
        n_ctrl = sum(1 for u in state.vehicles if u.controlled)
        controlled = (flag_draw < cfg.penetration) and (n_ctrl < cfg.max_controlled)
        speed = cfg.idm.v0 if lead is None or lead.pos > 50.0 \
            else min(cfg.idm.v0, lead.speed)
        state.vehicles.append(Vehicle(vid=state.next_vid, route=route, pos=0.0,
                                      speed=speed, controlled=controlled))
        state.next_vid += 1
        state.spawned += 1
        if route == MAIN:
            state.queue_main -= 1
        else:
            state.queue_ramp -= 1


def observe(state: SimState) -> ObservationBatch:
    """Per-controlled-vehicle feature rows, upstream-first.

    [own speed, leader gap, leader speed, follower gap, distance to junction],
    all scaled to roughly [0, 1]; absent neighbors read as max-range (1.0).
    """
    cfg = state.config
    ctrl = controlled_in_order(state)
    rows = np.zeros((len(ctrl), 5))
    dist_norm = max(cfg.main_len, cfg.ramp_len)
    leaders, followers = _relation_maps(state)
    for r, v in enumerate(ctrl):
        lead = leaders.get(v.vid)
        fol = followers.get(v.vid)
        vx = x_net(v, cfg)
        # projected cross-lane gaps can be negative for side-by-side vehicles
        lead_gap = 1.0 if lead is None else np.clip(
            _gap_between(vx, x_net(lead, cfg), cfg), 0.0, cfg.max_gap_norm) / cfg.max_gap_norm
        lead_speed = 1.0 if lead is None else lead.speed / cfg.idm.v0
        fol_gap = 1.0 if fol is None else np.clip(
            _gap_between(x_net(fol, cfg), vx, cfg), 0.0, cfg.max_gap_norm) / cfg.max_gap_norm
        dist = max(0.0, cfg.main_len - vx) / dist_norm
        rows[r] = (v.speed / cfg.idm.v0, lead_gap, lead_speed, fol_gap, dist)
    return ObservationBatch(obs=rows, valid_mask=np.ones(len(ctrl), dtype=bool))


def build_graph(state: SimState, max_rel_pos: int, dropout: float,
                rng: Rng) -> AgentGraph:
    """Complete classed digraph over controlled vehicles.

    The class of (i, j) encodes j's signed positional rank relative to i,
    saturated at +-max_rel_pos, giving C = 2p + 1 classes with the self class
    in the middle; non-self edges are then dropped independently at the
    requested rate.
    """
    cfg = state.config
    ctrl = controlled_in_order(state)
    k = len(ctrl)
    p = max_rel_pos
    edges = []
    for i in range(k):
        for j in range(k):
            d = max(-p, min(p, j - i))
            edges.append((i, j, d + p + 1))
    g = AgentGraph(agent_ids=tuple(v.vid for v in ctrl), edges=tuple(edges),
                   num_classes=2 * p + 1)
    if dropout > 0.0 and k > 1:
        g = apply_edge_dropout(g, dropout, rng.split(f"step{state.step_idx}"))
    return g


def reward(state: SimState, actions: np.ndarray) -> float:
    """Normalized mean speed of every vehicle minus an action-energy penalty;
    an empty network scores zero."""
    cfg = state.config
    if state.vehicles:
        speed_term = float(np.mean([v.speed for v in state.vehicles])) / cfg.idm.v0
    else:
        speed_term = 0.0
    actions = np.asarray(actions, dtype=np.float64).reshape(-1)
    penalty = cfg.accel_penalty * float(np.mean(actions ** 2)) if actions.size else 0.0
    return speed_term - penalty


def reset(config: EnvConfig, rng: Rng) -> SimState:
    """Fresh state warmed up with inflow-only steps (every vehicle IDM-driven)
    so episodes start populated; fully determined by (config, rng)."""
    state = SimState(config=config, vehicles=[],
                     rng_main=rng.split("arrivals-main"),
                     rng_ramp=rng.split("arrivals-ramp"),
                     rng_ctrl=rng.split("ctrl-flags"),
                     rng_graph=rng.split("graph"))
    warm_cfg = replace(config, horizon=config.horizon + config.warmup_steps)
    state.config = warm_cfg
    for _ in range(config.warmup_steps):
        step(state, None, build_outputs=False)
    state.config = config
    state.step_idx = 0
    state.time = 0.0
    return state


def vehicle_records(state: SimState):
    """Flat per-vehicle rows for episode trace export."""
    cfg = state.config
    return [{"time": round(state.time, 6), "vid": v.vid, "route": v.route,
             "pos": round(v.pos, 4), "x_net": round(x_net(v, cfg), 4),
             "speed": round(v.speed, 4), "controlled": v.controlled}
            for v in sorted(state.vehicles, key=lambda u: u.vid)]


class MergeEnv:
    """Rollout-protocol adapter around the functional simulator core."""

    obs_dim = 5
    action_dim = 1

    def __init__(self, config: EnvConfig):
        self.config = config
        self.state = None

    @property
    def horizon(self):
        return self.config.horizon

    @property
    def num_classes(self):
        return self.config.num_classes

    def reset(self, rng: Rng):
        self.state = reset(self.config, rng)
        obs = observe(self.state)
        graph = build_graph(self.state, self.config.max_rel_pos,
                            self.config.edge_dropout, self.state.rng_graph)
        return obs, graph

    def step(self, actions):
        actions = np.asarray(actions, dtype=np.float64).reshape(-1)
        _, obs, graph, rew, done = step(self.state, actions)
        return obs, graph, rew, done


# ---------------------------------------------------------------------------
# scenario presets (desk-scale mirrors of the low/high-coordination settings)
# ---------------------------------------------------------------------------

def mini_merge_0(**overrides) -> EnvConfig:
    """Small scenario: at most 5 concurrent controlled vehicles.

    Demand sits just past the junction's breakdown point, so the human-only
    baseline congests on most seeds while leaving controllers real headroom.
    """
    base = dict(main_len=250.0, ramp_len=120.0, out_len=200.0,
                inflow_main=0.30, inflow_ramp=0.12, penetration=0.45,
                max_controlled=5, dt=0.5, horizon=300, warmup_steps=150,
                max_rel_pos=3, accel_penalty=0.02)
    base.update(overrides)
    return EnvConfig(**base)


def mini_merge_2(**overrides) -> EnvConfig:
    """Larger scenario: up to 17 concurrent controlled vehicles."""
    base = dict(main_len=350.0, ramp_len=180.0, out_len=250.0,
                inflow_main=0.30, inflow_ramp=0.15, penetration=0.55,
                max_controlled=17, dt=0.5, horizon=300, warmup_steps=150,
                max_rel_pos=3, accel_penalty=0.02)
    base.update(overrides)
    return EnvConfig(**base)
