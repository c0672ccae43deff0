"""Joint perception-and-prediction network over bird's-eye-view rasters.

Pipeline: multi-sweep occupancy raster -> three-conv stride-(2,1,2) encoder
producing the broadcastable feature map -> four multi-branch conv blocks ->
dense per-cell detection and forecast heads -> rotated-box NMS.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels, nn
from .autodiff import Tensor
from .config import ModelConfig
from .geometry import Pose2, SE2Transform, wrap_angle

DET_CHANNELS = 7   # logit, dx, dy, log w, log h, sin, cos
N_WAYPOINTS = 6
FC_CHANNELS = 2 * N_WAYPOINTS


@dataclass(frozen=True)
class GridSpec:
    """Feature-grid geometry in the ego frame: cell (row r, col c) center sits
    at (x_min + (c+0.5) res, y_min + (r+0.5) res)."""

    x_min: float
    y_min: float
    resolution: float
    h: int
    w: int

    @classmethod
    def for_features(cls, cfg: ModelConfig):
        res = 4.0 * cfg.raster_resolution
        h = int(round((cfg.y_max - cfg.y_min) / res))
        w = int(round((cfg.x_max - cfg.x_min) / res))
        return cls(cfg.x_min, cfg.y_min, res, h, w)

    def cell_centers(self):
        ys = self.y_min + (np.arange(self.h) + 0.5) * self.resolution
        xs = self.x_min + (np.arange(self.w) + 0.5) * self.resolution
        gx, gy = np.meshgrid(xs, ys)
        return gx, gy


@dataclass
class FeatureMap:
    data: Tensor           # [H,W,C]
    origin: Pose2          # world pose of cell (0,0) center, heading = grid heading
    resolution: float      # meters per feature cell
    frame: int             # producing vehicle id
    timestamp: float       # sweep start time of the newest input sweep

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")


@dataclass
class Detection:
    x: float
    y: float
    w: float
    h: float
    theta: float
    score: float

    def box(self):
        return np.array([self.x, self.y, self.w, self.h, self.theta])


@dataclass
class Forecast:
    waypoints: np.ndarray  # [N_WAYPOINTS, 2]


def grid_origin_pose(ego_pose: Pose2, grid: GridSpec):
    """World pose of feature cell (0,0) center for a map built in ego_pose's frame."""
    local = np.array([grid.x_min + 0.5 * grid.resolution,
                      grid.y_min + 0.5 * grid.resolution])
    x, y = SE2Transform.from_pose(ego_pose).apply(local)
    return Pose2(float(x), float(y), ego_pose.theta)


def label_to_ego(label, ego_pose: Pose2):
    """Label box/waypoints from world frame into the ego frame."""
    t = SE2Transform.from_pose(ego_pose).inverse()
    cx, cy = t.apply(label.box[:2])
    box = np.array([cx, cy, label.box[2], label.box[3],
                    wrap_angle(label.box[4] - ego_pose.theta)])
    return box, t.apply(label.waypoints)


class PnpModel:
    """Backbone, output headers, and their losses; parameters live in a flat
    name -> Tensor dict so training stages can freeze groups bit-exactly."""

    def __init__(self, cfg: ModelConfig, n_sweeps, params):
        self.cfg = cfg
        self.n_sweeps = n_sweeps
        self.params = params
        self.grid = GridSpec.for_features(cfg)
        rr = cfg.raster_resolution
        self.raster_h = int(round((cfg.y_max - cfg.y_min) / rr))
        self.raster_w = int(round((cfg.x_max - cfg.x_min) / rr))

    # -- parameters -----------------------------------------------------------

    @staticmethod
    def init_params(cfg: ModelConfig, n_sweeps, rng):
        c = cfg.channels
        c1 = max(c // 2, 4)
        p = {}
        p["backbone/conv1/w"] = nn.kaiming_conv(rng, 3, n_sweeps, c1)
        p["backbone/conv1/b"] = nn.zeros_bias(c1)
        p["backbone/conv2/w"] = nn.kaiming_conv(rng, 3, c1, c)
        p["backbone/conv2/b"] = nn.zeros_bias(c)
        p["backbone/conv3/w"] = nn.kaiming_conv(rng, 3, c, c)
        p["backbone/conv3/b"] = nn.zeros_bias(c)
        bc = cfg.branch_channels
        for i in range(1, cfg.head_blocks + 1):
            pre = f"head/block{i}"
            p[f"{pre}/b1/w"] = nn.kaiming_conv(rng, 1, c, bc)
            p[f"{pre}/b1/b"] = nn.zeros_bias(bc)
            p[f"{pre}/b2/w"] = nn.kaiming_conv(rng, 3, c, bc)
            p[f"{pre}/b2/b"] = nn.zeros_bias(bc)
            p[f"{pre}/b3a/w"] = nn.kaiming_conv(rng, 3, c, bc)
            p[f"{pre}/b3a/b"] = nn.zeros_bias(bc)
            p[f"{pre}/b3b/w"] = nn.kaiming_conv(rng, 3, bc, bc)
            p[f"{pre}/b3b/b"] = nn.zeros_bias(bc)
            p[f"{pre}/fuse/w"] = nn.kaiming_conv(rng, 1, 3 * bc, c)
            p[f"{pre}/fuse/b"] = nn.zeros_bias(c)
        p["head/det/w"] = nn.kaiming_conv(rng, 1, c, DET_CHANNELS)
        det_b = np.zeros(DET_CHANNELS)
        det_b[0] = cfg.logit_bias_init
        p["head/det/b"] = Tensor(det_b, requires_grad=True)
        p["head/fc/w"] = nn.kaiming_conv(rng, 1, c, FC_CHANNELS)
        p["head/fc/b"] = nn.zeros_bias(FC_CHANNELS)
        return p

    # -- raster + encoder -------------------------------------------------------

    def rasterize_merged(self, sweep_groups, ego_pose: Pose2):
        """Binary occupancy raster; channel k is the union of sweep_groups[k]."""
        cfg = self.cfg
        to_ego = SE2Transform.from_pose(ego_pose).inverse()
        raster = np.zeros((self.raster_h, self.raster_w, len(sweep_groups)))
        for k, group in enumerate(sweep_groups):
            for sw in group:
                if len(sw.points) == 0:
                    continue
                pts = to_ego.apply(sw.points_world())
                cols = np.floor((pts[:, 0] - cfg.x_min) / cfg.raster_resolution).astype(np.int64)
                rows = np.floor((pts[:, 1] - cfg.y_min) / cfg.raster_resolution).astype(np.int64)
                ok = (rows >= 0) & (rows < self.raster_h) & (cols >= 0) & (cols < self.raster_w)
                raster[rows[ok], cols[ok], k] = 1.0
        return raster

    def rasterize(self, sweeps, ego_pose: Pose2):
        """Binary occupancy raster, one channel per sweep (sweeps[0] newest)."""
        return self.rasterize_merged([[sw] for sw in sweeps], ego_pose)

    def encode_raster(self, raster):
        p = self.params
        x = Tensor(raster)
        x = nn.conv_layer(x, p["backbone/conv1/w"], p["backbone/conv1/b"], stride=2, activation="relu")
        x = nn.conv_layer(x, p["backbone/conv2/w"], p["backbone/conv2/b"], stride=1, activation="relu")
        x = nn.conv_layer(x, p["backbone/conv3/w"], p["backbone/conv3/b"], stride=2, activation="relu")
        return x

    def encode(self, sweeps, ego_pose: Pose2 = None):
        """Sweeps -> broadcastable intermediate feature map (4x downsampled)."""
        if not sweeps:
            raise ValueError("encode: empty sweep list")
        if len(sweeps) != self.n_sweeps:
            raise ValueError(f"encode: expected {self.n_sweeps} sweeps, got {len(sweeps)}")
        if ego_pose is None:
            ego_pose = sweeps[0].pose
        raster = self.rasterize(sweeps, ego_pose)
        z = self.encode_raster(raster)
        return FeatureMap(z, grid_origin_pose(ego_pose, self.grid),
                          self.grid.resolution, sweeps[0].sensor_id, sweeps[0].t0)

    # -- output network -----------------------------------------------------------

    def _block(self, x, pre):
        p = self.params
        b1 = nn.conv_layer(x, p[f"{pre}/b1/w"], p[f"{pre}/b1/b"], activation="relu")
        b2 = nn.conv_layer(x, p[f"{pre}/b2/w"], p[f"{pre}/b2/b"], activation="relu")
        b3 = nn.conv_layer(x, p[f"{pre}/b3a/w"], p[f"{pre}/b3a/b"], activation="relu")
        b3 = nn.conv_layer(b3, p[f"{pre}/b3b/w"], p[f"{pre}/b3b/b"], activation="relu")
        cat = ad.concat([b1, b2, b3], axis=2)
        return nn.conv_layer(cat, p[f"{pre}/fuse/w"], p[f"{pre}/fuse/b"], activation="relu")

    def output_network(self, z):
        """Post-aggregation features -> dense detection and forecast grids."""
        x = z.data if isinstance(z, FeatureMap) else z
        if not isinstance(x, Tensor):
            x = Tensor(x)
        for i in range(1, self.cfg.head_blocks + 1):
            x = self._block(x, f"head/block{i}")
        p = self.params
        det = nn.conv_layer(x, p["head/det/w"], p["head/det/b"])
        fc = nn.conv_layer(x, p["head/fc/w"], p["head/fc/b"])
        return det, fc

    # -- decoding -------------------------------------------------------------------

    def decode_and_nms(self, det_grid, fc_grid, score_threshold=None, iou_threshold=None):
        """Dense grids -> suppressed list of (Detection, Forecast), ego frame."""
        cfg = self.cfg
        score_threshold = cfg.score_threshold if score_threshold is None else score_threshold
        iou_threshold = cfg.nms_iou if iou_threshold is None else iou_threshold
        det = det_grid.data if isinstance(det_grid, Tensor) else det_grid
        fc = fc_grid.data if isinstance(fc_grid, Tensor) else fc_grid
        logits = det[..., 0]
        scores = 1.0 / (1.0 + np.exp(-logits))
        rows, cols = np.nonzero(scores >= score_threshold)
        if len(rows) == 0:
            return []
        gx, gy = self.grid.cell_centers()
        cx = gx[rows, cols] + det[rows, cols, 1]
        cy = gy[rows, cols] + det[rows, cols, 2]
        bw = np.exp(det[rows, cols, 3])
        bh = np.exp(det[rows, cols, 4])
        th = np.arctan2(det[rows, cols, 5], det[rows, cols, 6])
        sc = scores[rows, cols]
        boxes = np.stack([cx, cy, bw, bh, th], axis=1)
        wps = fc[rows, cols].reshape(-1, N_WAYPOINTS, 2) + boxes[:, None, :2]
        keep = nms_keep(boxes, sc, iou_threshold)
        out = []
        for i in keep:
            out.append((Detection(cx[i], cy[i], bw[i], bh[i], float(wrap_angle(th[i])), sc[i]),
                        Forecast(wps[i].copy())))
        return out

    # -- targets and loss -----------------------------------------------------------

    def encode_targets(self, ego_labels):
        """Per-cell targets from ego-frame (box, waypoints) label pairs.

        A cell is positive iff its center lies inside the box; ties go to the
        smaller box.  Returns (cls [H,W], reg [H,W,6], fcs [H,W,12]).
        """
        g = self.grid
        gx, gy = g.cell_centers()
        cls_t = np.zeros((g.h, g.w))
        reg_t = np.zeros((g.h, g.w, DET_CHANNELS - 1))
        fc_t = np.zeros((g.h, g.w, FC_CHANNELS))
        owner_area = np.full((g.h, g.w), np.inf)
        for box, wps in ego_labels:
            cx, cy, bl, bw, th = box
            rx, ry = gx - cx, gy - cy
            c, s = math.cos(th), math.sin(th)
            lx = c * rx + s * ry
            ly = -s * rx + c * ry
            inside = (np.abs(lx) <= bl / 2) & (np.abs(ly) <= bw / 2)
            area = bl * bw
            take = inside & (area < owner_area)
            if not take.any():
                continue
            owner_area[take] = area
            cls_t[take] = 1.0
            reg_t[take, 0] = cx - gx[take]
            reg_t[take, 1] = cy - gy[take]
            reg_t[take, 2] = math.log(bl)
            reg_t[take, 3] = math.log(bw)
            reg_t[take, 4] = math.sin(th)
            reg_t[take, 5] = math.cos(th)
            fc_t[take] = (wps - np.array([cx, cy])).reshape(-1)
        return cls_t, reg_t, fc_t

    def decode_cell(self, row, col, reg):
        """Inverse of the target encoding for one cell (used by round-trip tests)."""
        gx, gy = self.grid.cell_centers()
        cx = gx[row, col] + reg[0]
        cy = gy[row, col] + reg[1]
        return np.array([cx, cy, np.exp(reg[2]), np.exp(reg[3]),
                         wrap_angle(np.arctan2(reg[4], reg[5]))])

    def detection_loss(self, det_grid, fc_grid, ego_labels):
        """Hard-negative-mined classification + smooth-L1 box and forecast terms."""
        cfg = self.cfg
        cls_t, reg_t, fc_t = self.encode_targets(ego_labels)
        pos = cls_t > 0
        n_pos = int(pos.sum())

        logits = det_grid[..., 0]
        ce = ad.sigmoid_ce(logits, cls_t)
        k = max(cfg.hard_negative_ratio * n_pos, cfg.hard_negative_floor)
        neg_scores = np.where(pos, -np.inf, ce.data)
        k = min(k, int(np.isfinite(neg_scores).sum()))
        sel = pos.copy()
        if k > 0:
            flat = neg_scores.ravel()
            top = np.argpartition(flat, -k)[-k:]
            sel.ravel()[top] = True
        cls_loss = ad.tsum(ce * sel) * (1.0 / max(n_pos + k, 1))

        if n_pos > 0:
            box_res = det_grid[..., 1:] - reg_t
            box_loss = ad.tsum(ad.smooth_l1(box_res) * pos[..., None]) * (1.0 / n_pos)
            fc_res = fc_grid - fc_t
            fc_loss = ad.tsum(ad.smooth_l1(fc_res) * pos[..., None]) * (1.0 / n_pos)
        else:
            box_loss = Tensor(0.0)
            fc_loss = Tensor(0.0)

        total = cfg.cls_weight * cls_loss + cfg.box_weight * box_loss \
            + cfg.forecast_weight * fc_loss
        parts = {
            "cls": float(cls_loss.data),
            "box": float(box_loss.data),
            "forecast": float(fc_loss.data),
            "n_pos": n_pos,
        }
        return total, parts


def nms_keep(boxes, scores, iou_threshold):
    """Greedy rotated-IoU suppression; returns kept indices, descending score.

    Deterministic under input permutation: ties broken by box coordinates.
    """
    n = len(boxes)
    if n == 0:
        return []
    order = np.lexsort((boxes[:, 4], boxes[:, 1], boxes[:, 0], -scores))
    iou = kernels.rotated_iou_matrix(np.ascontiguousarray(boxes), np.ascontiguousarray(boxes))
    keep = []
    for i in order:
        if all(iou[i, j] < iou_threshold for j in keep):
            keep.append(int(i))
    return keep


def model_from_params(cfg: ModelConfig, n_sweeps, params):
    return PnpModel(cfg, n_sweeps, params)
