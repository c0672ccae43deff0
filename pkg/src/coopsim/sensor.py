"""Occlusion-aware 2D range sensor standing in for a LiDAR.

Rays spread uniformly over 360 degrees from the vehicle; each ray returns the
nearest rectangle-boundary intersection at that ray's firing time.  With the
rolling shutter enabled, ray times spread over the sweep period, so moving
actors smear; points are always expressed in the sensor frame at sweep start
(perfect ego-motion compensation within the sweep).
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .config import SensorConfig
from .geometry import SE2Transform
from .world import Scenario, WALL


@dataclass
class Sweep:
    sensor_id: int
    pose: object          # Pose2 of the sensor at sweep start
    t0: float             # sweep start time (GPS-style scenario clock)
    period: float
    n_rays: int
    points: np.ndarray    # [N,3] (x, y, intra-sweep time offset), sensor frame
    point_actor_ids: np.ndarray  # [N] actor attribution (simulator annotation)

    def points_world(self):
        if len(self.points) == 0:
            return np.zeros((0, 2))
        return SE2Transform.from_pose(self.pose).apply(self.points[:, :2])


def raycast_sweep(scn: Scenario, sdv_id, t, cfg: SensorConfig = None, actor_subset=None):
    """One sensor sweep from actor `sdv_id` starting at time t."""
    cfg = cfg or SensorConfig()
    sensing = scn.actor(sdv_id)
    r = cfg.rays

    if cfg.rolling_shutter:
        offsets = np.arange(r) * (cfg.period / r)
    else:
        offsets = np.zeros(r)
    times = t + offsets

    sensor_poses = sensing.poses_at(times) if cfg.rolling_shutter \
        else np.tile(sensing.poses_at([t]), (r, 1))
    angles = sensor_poses[:, 2] + 2.0 * np.pi * np.arange(r) / r
    dir_x, dir_y = np.cos(angles), np.sin(angles)

    actors = [a for a in (actor_subset if actor_subset is not None else scn.actors)
              if a.actor_id != sdv_id]
    a_n = len(actors)
    if a_n == 0:
        start = sensing.pose_at(t)
        return Sweep(sdv_id, start, t, cfg.period, r,
                     np.zeros((0, 3)), np.zeros(0, dtype=np.int64))

    bcx = np.empty((a_n, r))
    bcy = np.empty((a_n, r))
    bcos = np.empty((a_n, r))
    bsin = np.empty((a_n, r))
    half_len = np.empty(a_n)
    half_wid = np.empty(a_n)
    for i, a in enumerate(actors):
        if cfg.rolling_shutter and not a.static:
            p = a.poses_at(times)
        else:
            p = np.tile(a.poses_at([t]), (r, 1))
        bcx[i] = p[:, 0]
        bcy[i] = p[:, 1]
        bcos[i] = np.cos(p[:, 2])
        bsin[i] = np.sin(p[:, 2])
        half_len[i] = 0.5 * a.length
        half_wid[i] = 0.5 * a.width

    dist, idx = kernels.raycast(
        np.ascontiguousarray(sensor_poses[:, 0]), np.ascontiguousarray(sensor_poses[:, 1]),
        dir_x, dir_y, bcx, bcy, bcos, bsin, half_len, half_wid,
        np.ones(a_n, dtype=np.uint8), cfg.max_range)

    hit = idx >= 0
    start = sensing.pose_at(t)
    if not np.any(hit):
        return Sweep(sdv_id, start, t, cfg.period, r,
                     np.zeros((0, 3)), np.zeros(0, dtype=np.int64))

    wx = sensor_poses[hit, 0] + dist[hit] * dir_x[hit]
    wy = sensor_poses[hit, 1] + dist[hit] * dir_y[hit]
    to_sensor = SE2Transform.from_pose(start).inverse()
    local = to_sensor.apply(np.stack([wx, wy], axis=1))
    pts = np.concatenate([local, offsets[hit][:, None]], axis=1)
    ids = np.array([actors[j].actor_id for j in idx[hit]], dtype=np.int64)
    return Sweep(sdv_id, start, t, cfg.period, r, pts, ids)


def points_on_actor(sweeps, actor_id):
    """Total point count attributed to one actor across sweeps."""
    return int(sum(np.count_nonzero(s.point_actor_ids == actor_id) for s in sweeps))


def occluded_by_statics(scn: Scenario, target_id, sdv_id, t, cfg: SensorConfig = None):
    """True when static occluders alone fully hide the target from the sensor.

    Casts against {static occluders + target} and against {target} alone;
    occluded means the target collects zero points in the first world while
    being hittable in the second.  Moving vehicles are deliberately excluded
    so that zero occluder density can never produce a positive.
    """
    cfg = cfg or SensorConfig()
    target = scn.actor(target_id)
    solo = raycast_sweep(scn, sdv_id, t, cfg, actor_subset=[target])
    if points_on_actor([solo], target_id) == 0:
        return False
    world = scn.occluders + [target]
    shaded = raycast_sweep(scn, sdv_id, t, cfg, actor_subset=world)
    return points_on_actor([shaded], target_id) == 0
