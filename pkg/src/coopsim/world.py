"""Procedural 2D bird's-eye-view traffic world.

A scenario is a crossroad: a main road along x, a crossing road along y,
corner buildings and curbside parked rows as static occluders, and vehicles
following lanes at constant speed with optional stop and lane-change events.
Cross-traffic hidden behind corner buildings is what gives every scenario
fully occluded actors.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .config import WorldConfig
from .geometry import Pose2, SE2Transform, wrap_angle

VEHICLE = "vehicle"
PARKED = "parked_vehicle"
WALL = "wall"


class ScenarioGenerationError(RuntimeError):
    pass


@dataclass
class Actor:
    actor_id: int
    kind: str
    length: float
    width: float
    trajectory: np.ndarray  # [T,3] poses at fixed ticks starting at t=0
    tick: float
    is_candidate_sdv: bool = False

    @property
    def static(self):
        return bool(np.all(self.trajectory == self.trajectory[0]))

    def poses_at(self, times):
        """Interpolated [N,3] poses at arbitrary times (clamped to the span)."""
        times = np.atleast_1d(np.asarray(times, dtype=np.float64))
        traj = self.trajectory
        n = len(traj)
        s = np.clip(times / self.tick, 0.0, n - 1.0)
        i0 = np.minimum(s.astype(np.int64), n - 2) if n > 1 else np.zeros(len(s), dtype=np.int64)
        f = (s - i0)[:, None]
        p0 = traj[i0]
        p1 = traj[np.minimum(i0 + 1, n - 1)]
        out = p0 + f * (p1 - p0)
        dth = wrap_angle(p1[:, 2] - p0[:, 2])
        out[:, 2] = wrap_angle(p0[:, 2] + f[:, 0] * dth)
        return out

    def pose_at(self, t):
        p = self.poses_at([t])[0]
        return Pose2(p[0], p[1], p[2])

    def speed_at(self, t):
        h = self.tick
        p = self.poses_at([max(t - h, 0.0), t + h])
        return float(np.hypot(p[1, 0] - p[0, 0], p[1, 1] - p[0, 1]) / (2 * h - max(h - t, 0.0)))


@dataclass
class Scenario:
    seed: int
    duration: float
    tick: float
    extent: tuple  # (x_min, x_max, y_min, y_max)
    actors: list
    ego_id: int
    candidate_ids: list = field(default_factory=list)

    def __post_init__(self):
        self._by_id = {a.actor_id: a for a in self.actors}
        for cid in self.candidate_ids:
            a = self._by_id[cid]
            if a.kind != VEHICLE:
                raise ValueError(f"candidate {cid} is kind {a.kind}, must be a vehicle")

    def actor(self, actor_id):
        return self._by_id[actor_id]

    @property
    def vehicles(self):
        return [a for a in self.actors if a.kind == VEHICLE]

    @property
    def occluders(self):
        return [a for a in self.actors if a.kind in (PARKED, WALL)]


@dataclass
class ActorLabel:
    actor_id: int
    box: np.ndarray        # (cx, cy, length, width, theta) in world frame
    waypoints: np.ndarray  # [K,2] future centers in world frame
    speed: float


# ---------------------------------------------------------------------------
# trajectory builders
# ---------------------------------------------------------------------------


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _vehicle_trajectory(rng, cfg, axis, lane_offset, road_anchor, s0, direction,
                        speed, stop_at=None, change_to=None, change_at=None):
    """Poses at ticks for a lane follower.  axis 'x' runs along x with lateral
    y = lane_offset; axis 'y' runs along y at x = road_anchor + lane offset."""
    n = int(round(cfg.duration / cfg.tick)) + 1
    t = np.arange(n) * cfg.tick
    v = np.full(n, speed)
    if stop_at is not None:
        v = speed * np.clip(1.0 - (t - stop_at) / 1.5, 0.0, 1.0)
    s = s0 + direction * np.concatenate(([0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * cfg.tick)))
    lat = np.full(n, lane_offset)
    if change_to is not None:
        lat = lane_offset + (change_to - lane_offset) * _smoothstep((t - change_at) / 2.0)
    traj = np.zeros((n, 3))
    if axis == "x":
        traj[:, 0] = s
        traj[:, 1] = lat
        base = 0.0 if direction > 0 else np.pi
    else:
        traj[:, 0] = road_anchor + lat
        traj[:, 1] = s
        base = np.pi / 2 if direction > 0 else -np.pi / 2
    dx = np.gradient(traj[:, 0], cfg.tick)
    dy = np.gradient(traj[:, 1], cfg.tick)
    moving = np.hypot(dx, dy) > 0.3
    traj[:, 2] = np.where(moving, np.arctan2(dy, dx), base)
    traj[:, 2] = wrap_angle(traj[:, 2])
    return traj


def _static_trajectory(cfg, x, y, theta):
    n = int(round(cfg.duration / cfg.tick)) + 1
    return np.tile(np.array([x, y, wrap_angle(theta)]), (n, 1))


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _build_candidate_world(rng, cfg: WorldConfig):
    actors = []
    next_id = 0

    def add(kind, length, width, traj, candidate=False):
        nonlocal next_id
        actors.append(Actor(next_id, kind, length, width, traj, cfg.tick, candidate))
        next_id += 1
        return next_id - 1

    half = cfg.lane_count // 2
    main_lanes = [(-(i + 0.5) * cfg.lane_width, +1) for i in range(half)] + \
                 [((i + 0.5) * cfg.lane_width, -1) for i in range(half)]
    road_half = half * cfg.lane_width
    x_cross = float(rng.uniform(-15.0, 15.0))
    cross_lanes = [(-0.5 * cfg.lane_width, +1), (0.5 * cfg.lane_width, -1)]

    # ego: inner +x lane, stays inside the map for the whole snippet
    ego_speed = float(rng.uniform(5.0, 8.0))
    ego_x0 = float(rng.uniform(-30.0, -15.0))
    ego_id = add(VEHICLE, 4.8, 2.0,
                 _vehicle_trajectory(rng, cfg, "x", main_lanes[half - 1][0], 0.0,
                                     ego_x0, +1, ego_speed), candidate=True)

    n_actors = int(rng.integers(cfg.actor_count_min, cfg.actor_count_max + 1))
    n_cross = max(2, int(round(0.35 * n_actors)))
    n_main = n_actors - n_cross

    used = {("x", main_lanes[half - 1][0]): [ego_x0]}

    def place(axis, lane_key, lo, hi, min_gap=14.0):
        slots = used.setdefault((axis, lane_key), [])
        for _ in range(25):
            s = float(rng.uniform(lo, hi))
            if all(abs(s - o) >= min_gap for o in slots):
                slots.append(s)
                return s
        return None

    for _ in range(n_main):
        lane, direction = main_lanes[int(rng.integers(len(main_lanes)))]
        s0 = place("x", lane, -cfg.x_extent + 5, cfg.x_extent - 5)
        if s0 is None:
            continue
        stopped = rng.uniform() < cfg.stopped_fraction
        speed = 0.0 if stopped else float(rng.uniform(cfg.speed_min, cfg.speed_max))
        stop_at = None
        change_to = change_at = None
        if not stopped and rng.uniform() < cfg.lane_change_prob:
            others = [l for l, d in main_lanes if d == direction and l != lane]
            if others:
                change_to = others[int(rng.integers(len(others)))]
                change_at = float(rng.uniform(1.0, cfg.duration - 3.0))
        add(VEHICLE, float(rng.uniform(4.3, 5.2)), float(rng.uniform(1.8, 2.1)),
            _vehicle_trajectory(rng, cfg, "x", lane, 0.0, s0, direction, speed,
                                stop_at=stop_at, change_to=change_to, change_at=change_at))

    for _ in range(n_cross):
        lane, direction = cross_lanes[int(rng.integers(len(cross_lanes)))]
        s0 = place("y", lane, -38.0, 38.0)
        if s0 is None:
            continue
        speed = float(rng.uniform(cfg.speed_min, cfg.speed_max))
        add(VEHICLE, float(rng.uniform(4.3, 5.2)), float(rng.uniform(1.8, 2.1)),
            _vehicle_trajectory(rng, cfg, "y", lane, x_cross, s0, direction, speed))

    # corner buildings: the main source of full occlusion of cross traffic
    n_corners = min(4, int(round(4 * cfg.occluder_density)))
    corners = [(1, 1), (-1, 1), (-1, -1), (1, -1)]
    order = rng.permutation(4)
    for ci in order[:n_corners]:
        sx, sy = corners[ci]
        depth = float(rng.uniform(8.0, 14.0))
        span = float(rng.uniform(10.0, 18.0))
        cx = x_cross + sx * (cfg.lane_width + 2.0 + span / 2)
        cy = sy * (road_half + 2.0 + depth / 2)
        add(WALL, span, depth, _static_trajectory(cfg, cx, cy, 0.0))

    # curbside parked rows along the main road
    n_parked = int(round(10 * cfg.occluder_density))
    for _ in range(n_parked):
        side = 1 if rng.uniform() < 0.5 else -1
        px = float(rng.uniform(-cfg.x_extent + 5, cfg.x_extent - 5))
        if abs(px - x_cross) < cfg.lane_width + 6.0:
            continue  # keep the crossing clear
        py = side * (road_half + 1.3)
        add(PARKED, float(rng.uniform(4.4, 5.0)), 1.9,
            _static_trajectory(cfg, px, py, 0.0 if rng.uniform() < 0.5 else np.pi))

    # candidate SDVs among the non-ego moving vehicles
    movers = [a.actor_id for a in actors
              if a.kind == VEHICLE and a.actor_id != ego_id and not a.static]
    k = int(round(cfg.candidate_fraction * len(movers)))
    chosen = list(rng.choice(movers, size=min(k, len(movers)), replace=False)) if k else []
    for cid in chosen:
        actors[cid].is_candidate_sdv = True
    actors[ego_id].is_candidate_sdv = True

    extent = (-cfg.x_extent, cfg.x_extent, -45.0, 45.0)
    return actors, ego_id, sorted([ego_id] + [int(c) for c in chosen]), extent


def generate_scenario(cfg: WorldConfig, seed, require_occlusion=True,
                      eval_range=(-50.0, 50.0, -20.0, 20.0)):
    """Deterministic scenario for a seed; rejection-samples until some labeled
    actor is fully hidden from the ego by static occluders at some frame."""
    from . import sensor  # local import: sensor needs the types above

    rng = np.random.default_rng(np.random.SeedSequence([0x5EED, seed]))
    for attempt in range(cfg.occlusion_tries):
        actors, ego_id, candidates, extent = _build_candidate_world(rng, cfg)
        scn = Scenario(seed=seed, duration=cfg.duration, tick=cfg.tick,
                       extent=extent, actors=actors, ego_id=ego_id,
                       candidate_ids=candidates)
        if not require_occlusion:
            return scn
        if _has_static_occlusion(scn, eval_range):
            return scn
    raise ScenarioGenerationError(
        f"no fully occluded in-range actor after {cfg.occlusion_tries} tries; "
        "increase occluder_density")


def _has_static_occlusion(scn, eval_range):
    from . import sensor

    check_times = np.arange(1.0, scn.duration - 3.0, 1.0)
    targets = [a for a in scn.vehicles
               if a.actor_id not in scn.candidate_ids]
    ego = scn.actor(scn.ego_id)
    for t in check_times:
        ego_pose = ego.pose_at(t)
        for a in targets:
            p = a.pose_at(t)
            if not _in_range(p, ego_pose, eval_range):
                continue
            if sensor.occluded_by_statics(scn, a.actor_id, scn.ego_id, t):
                return True
    return False


def _in_range(pose, ego_pose, eval_range):
    rel = SE2Transform.from_pose(ego_pose).inverse().apply(np.array([pose.x, pose.y]))
    x0, x1, y0, y1 = eval_range
    return (x0 <= rel[0] <= x1) and (y0 <= rel[1] <= y1)


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------


def labels_at(scn: Scenario, t, horizon=3.0, interval=0.5,
              ego_pose=None, eval_range=None, exclude_ids=()):
    """Ground-truth boxes and future waypoints for every labelable actor.

    Vehicles (moving, stopped, or parked; never walls) that are not in
    exclude_ids are labeled, regardless of visibility.  When ego_pose and
    eval_range are given, only actors whose centers fall inside the ego-frame
    range rectangle are returned.  Waypoints are world-frame box centers at
    t + interval, ..., t + horizon.
    """
    if t < 0 or t + horizon > scn.duration + 1e-9:
        raise ValueError(f"labels_at: t={t} with horizon {horizon} outside [0, {scn.duration}]")
    steps = int(round(horizon / interval))
    future = t + interval * np.arange(1, steps + 1)
    out = []
    for a in scn.actors:
        if a.kind == WALL or a.actor_id in exclude_ids:
            continue
        p = a.pose_at(t)
        if ego_pose is not None and eval_range is not None:
            if not _in_range(p, ego_pose, eval_range):
                continue
        poses = a.poses_at(future)
        out.append(ActorLabel(
            actor_id=a.actor_id,
            box=np.array([p.x, p.y, a.length, a.width, p.theta]),
            waypoints=poses[:, :2].copy(),
            speed=a.speed_at(t),
        ))
    return out


# ---------------------------------------------------------------------------
# pose noise
# ---------------------------------------------------------------------------


def perturb_pose(pose, sigma_pos, kappa_heading, rng):
    """Gaussian position noise plus von Mises heading noise.

    kappa_heading <= 0 disables heading noise.  numpy's generator implements
    the Best-Fisher rejection sampler for the von Mises draw.
    """
    dx = rng.normal(0.0, sigma_pos) if sigma_pos > 0 else 0.0
    dy = rng.normal(0.0, sigma_pos) if sigma_pos > 0 else 0.0
    dth = rng.vonmises(0.0, kappa_heading) if kappa_heading > 0 else 0.0
    return Pose2(pose.x + dx, pose.y + dy, pose.theta + dth)


# ---------------------------------------------------------------------------
# scenario files: one JSON header line, then one JSON line per actor
# ---------------------------------------------------------------------------


def save_scenario(scn: Scenario, path):
    with open(path, "w") as f:
        header = {
            "format": "coopsim-scenario/1",
            "seed": scn.seed,
            "duration": scn.duration,
            "tick": scn.tick,
            "extent": list(scn.extent),
            "ego_id": scn.ego_id,
            "candidate_ids": list(scn.candidate_ids),
        }
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for a in scn.actors:
            rec = {
                "id": a.actor_id,
                "kind": a.kind,
                "length": a.length,
                "width": a.width,
                "candidate": a.is_candidate_sdv,
                "trajectory": [[float(v) for v in row] for row in a.trajectory],
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_scenario(path):
    with open(path) as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    header = json.loads(lines[0])
    if header.get("format") != "coopsim-scenario/1":
        raise ValueError(f"not a scenario file: {path}")
    actors = []
    for ln in lines[1:]:
        rec = json.loads(ln)
        actors.append(Actor(
            actor_id=rec["id"], kind=rec["kind"], length=rec["length"],
            width=rec["width"], trajectory=np.array(rec["trajectory"]),
            tick=header["tick"], is_candidate_sdv=rec["candidate"],
        ))
    return Scenario(
        seed=header["seed"], duration=header["duration"], tick=header["tick"],
        extent=tuple(header["extent"]), actors=actors, ego_id=header["ego_id"],
        candidate_ids=list(header["candidate_ids"]),
    )
