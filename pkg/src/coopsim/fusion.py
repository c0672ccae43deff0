"""End-to-end fusion strategies: map (own sweeps, delivered messages) to final
detections and forecasts in the receiver frame.

* none:    single-vehicle network only.
* raw:     decoded point sweeps merged into the receiver raster, then the
           single-vehicle network.
* output:  received boxes/trajectories transformed into the receiver frame,
           advanced by a piecewise-linear velocity model over the message
           age, merged, and re-suppressed.
* feature: decoded feature maps aggregated by the receiver-local GNN, then
           the fusion network's output headers.
* mixed:   per-sender heterogeneous payloads, consumed as raw -> feature ->
           output in one pass.

Claimed sender poses always come from the message envelope, never from the
payload, so localization noise enters exactly once.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import aggregation as agg
from . import codecs
from .channel import V2VMessage
from .config import CodecConfig, ModelConfig
from .geometry import Pose2, SE2Transform, relative_pose_transform, wrap_angle
from .model import Detection, Forecast, PnpModel, grid_origin_pose, nms_keep


STRATEGIES = ("none", "raw", "output", "feature", "mixed")


@dataclass
class FusionSystem:
    """Models and codecs backing every strategy.

    single: the pretrain-stage network (used by none/raw/output and as the
    sender-side network for output payloads).  fusion: the jointly finetuned
    network with aggregation parameters.  feature_codec: present once the
    compression stage has trained.
    """

    single: PnpModel
    fusion: PnpModel = None
    codec_cfg: CodecConfig = None
    feature_codec: codecs.FeatureCodec = None

    def __post_init__(self):
        if self.codec_cfg is None:
            self.codec_cfg = CodecConfig()
        self.point_codec = codecs.PointCodec(self.codec_cfg)
        self.output_codec = codecs.OutputCodec(self.codec_cfg)
        if self.fusion is not None:
            self.agg_cfg = agg.AggregationConfig.from_model(self.fusion.cfg)

    # -- strategies ------------------------------------------------------------

    def no_fusion(self, sweeps):
        """Single-vehicle pipeline: encoder straight into the output headers."""
        fm = self.single.encode(sweeps)
        det, fc = self.single.output_network(fm.data)
        return self.single.decode_and_nms(det, fc)

    def raw_fusion(self, sweeps, messages):
        """Merge decoded point payloads into the receiver raster and run the
        single-vehicle network on it."""
        groups = [[sw] for sw in sweeps]
        t0 = sweeps[0].t0
        period = sweeps[0].period
        for msg in _sorted_messages(messages):
            decoded = self.point_codec.decode(msg.payload)
            decoded = replace(decoded, pose=msg.pose)  # trust the envelope pose
            k = int(np.clip(np.round((t0 - decoded.t0) / period), 0, len(groups) - 1))
            groups[k].append(decoded)
        raster = self.single.rasterize_merged(groups, sweeps[0].pose)
        z = self.single.encode_raster(raster)
        det, fc = self.single.output_network(z)
        return self.single.decode_and_nms(det, fc)

    def output_fusion(self, sweeps, messages, recv_pose=None, recv_time=None):
        """Union of own outputs and transformed, delay-compensated received
        outputs, re-suppressed by NMS; received scores are kept as-is."""
        recv_pose = recv_pose or sweeps[0].pose
        recv_time = sweeps[0].t0 if recv_time is None else recv_time
        merged = list(self.no_fusion(sweeps))
        for msg in _sorted_messages(messages):
            dt = max(recv_time - msg.timestamp, 0.0)
            to_recv = relative_pose_transform(msg.pose, recv_pose)
            for det, fc in self.output_codec.decode(msg.payload):
                merged.append(_transform_output(det, fc, to_recv, dt))
        if not merged:
            return []
        boxes = np.stack([d.box() for d, _ in merged])
        scores = np.array([d.score for d, _ in merged])
        keep = nms_keep(boxes, scores, self.single.cfg.nms_iou)
        return [merged[i] for i in keep]

    def feature_fusion(self, sweeps, messages, recv_time=None, max_neighbors=6):
        """Decode feature payloads, aggregate them with the receiver's own map
        through the GNN, and run the fusion output headers."""
        if self.fusion is None:
            raise RuntimeError("feature fusion needs the finetuned fusion checkpoint")
        recv_time = sweeps[0].t0 if recv_time is None else recv_time
        recv_pose = sweeps[0].pose
        own = self.fusion.encode(sweeps)
        received = []
        for msg in _sorted_messages(messages):
            fm = codecs.decode_features(msg.payload, self.feature_codec)
            # anchor the grid to the claimed pose, not the payload metadata
            origin = grid_origin_pose(msg.pose, self.fusion.grid)
            fm = codecs.FeatureMap(fm.data, origin, self.fusion.grid.resolution,
                                   fm.frame, fm.timestamp)
            dt = max(recv_time - fm.timestamp, 0.0)
            dist = np.hypot(msg.pose.x - recv_pose.x, msg.pose.y - recv_pose.y)
            received.append((dist, fm, dt))
        received.sort(key=lambda r: (r[0], r[1].frame))
        received = [(fm, dt) for _, fm, dt in received[:max_neighbors]]
        z = agg.aggregate(own, received, self.fusion.params, self.agg_cfg)
        det, fc = self.fusion.output_network(z)
        return self.fusion.decode_and_nms(det, fc)

    def mixed_fleet(self, sweeps, messages, recv_pose=None, recv_time=None):
        """Consume heterogeneous payloads in one pass: raw points into the
        raster, features through the GNN, outputs merged at the end."""
        recv_pose = recv_pose or sweeps[0].pose
        recv_time = sweeps[0].t0 if recv_time is None else recv_time
        by_type = {codecs.FRAME_POINTS: [], codecs.FRAME_FEATURES: [], codecs.FRAME_OUTPUTS: []}
        for msg in _sorted_messages(messages):
            ptype = msg.payload[0]
            by_type[ptype].append(msg)

        if by_type[codecs.FRAME_FEATURES]:
            model = self.fusion
            groups = [[sw] for sw in sweeps]
            t0, period = sweeps[0].t0, sweeps[0].period
            for msg in by_type[codecs.FRAME_POINTS]:
                decoded = replace(self.point_codec.decode(msg.payload), pose=msg.pose)
                k = int(np.clip(np.round((t0 - decoded.t0) / period), 0, len(groups) - 1))
                groups[k].append(decoded)
            raster = model.rasterize_merged(groups, recv_pose)
            own = codecs.FeatureMap(model.encode_raster(raster),
                                    grid_origin_pose(recv_pose, model.grid),
                                    model.grid.resolution, sweeps[0].sensor_id, t0)
            received = []
            for msg in by_type[codecs.FRAME_FEATURES]:
                fm = codecs.decode_features(msg.payload, self.feature_codec)
                origin = grid_origin_pose(msg.pose, model.grid)
                fm = codecs.FeatureMap(fm.data, origin, model.grid.resolution,
                                       fm.frame, fm.timestamp)
                received.append((fm, max(recv_time - fm.timestamp, 0.0)))
            z = agg.aggregate(own, received, model.params, self.agg_cfg)
            det, fc = model.output_network(z)
            merged = list(model.decode_and_nms(det, fc))
            nms_iou = model.cfg.nms_iou
        else:
            merged = list(self.raw_fusion(sweeps, by_type[codecs.FRAME_POINTS]))
            nms_iou = self.single.cfg.nms_iou

        if not by_type[codecs.FRAME_OUTPUTS]:
            return merged
        for msg in by_type[codecs.FRAME_OUTPUTS]:
            dt = max(recv_time - msg.timestamp, 0.0)
            to_recv = relative_pose_transform(msg.pose, recv_pose)
            for det, fc in self.output_codec.decode(msg.payload):
                merged.append(_transform_output(det, fc, to_recv, dt))
        if not merged:
            return []
        boxes = np.stack([d.box() for d, _ in merged])
        scores = np.array([d.score for d, _ in merged])
        keep = nms_keep(boxes, scores, nms_iou)
        return [merged[i] for i in keep]

    def run(self, strategy, sweeps, messages, recv_pose=None, recv_time=None):
        if strategy == "none":
            return self.no_fusion(sweeps)
        if strategy == "raw":
            return self.raw_fusion(sweeps, messages)
        if strategy == "output":
            return self.output_fusion(sweeps, messages, recv_pose, recv_time)
        if strategy == "feature":
            return self.feature_fusion(sweeps, messages, recv_time)
        if strategy == "mixed":
            return self.mixed_fleet(sweeps, messages, recv_pose, recv_time)
        raise ValueError(f"unknown strategy {strategy!r}")


def _sorted_messages(messages):
    return sorted(messages, key=lambda m: (m.sender_id, m.timestamp))


def _transform_output(det: Detection, fc: Forecast, to_recv: SE2Transform, dt):
    """Sender-frame output into the receiver frame, advanced dt seconds along
    a piecewise-linear trajectory through its forecast waypoints."""
    center = to_recv.apply(np.array([det.x, det.y]))
    theta = wrap_angle(det.theta + to_recv.theta)
    wps = to_recv.apply(fc.waypoints) if fc is not None else None
    if dt > 0 and wps is not None:
        k = len(wps)
        times = np.arange(0, k + 1) * 0.5
        track = np.vstack([center, wps])
        center = _interp_track(times, track, dt)
        wps = np.stack([_interp_track(times, track, dt + (i + 1) * 0.5) for i in range(k)])
    new_fc = Forecast(wps) if wps is not None else Forecast(np.tile(center, (6, 1)))
    return Detection(float(center[0]), float(center[1]), det.w, det.h,
                     float(theta), det.score), new_fc


def _interp_track(times, track, t):
    """Piecewise-linear position on a waypoint track, extrapolating the last
    segment's velocity beyond the horizon."""
    if t <= times[-1]:
        x = np.interp(t, times, track[:, 0])
        y = np.interp(t, times, track[:, 1])
        return np.array([x, y])
    v = (track[-1] - track[-2]) / (times[-1] - times[-2])
    return track[-1] + v * (t - times[-1])
