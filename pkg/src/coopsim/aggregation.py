"""Receiver-local graph aggregation of broadcast feature maps.

Every vehicle in range (plus the receiver itself) becomes a node.  Node init
optionally runs a delay-compensation CNN fed the feature map and a constant
time-offset channel, then pads with zero channels to double the state width.
Each iteration warps every sender state into every receiver's grid with an
SE(2) resample, masks non-overlapping cells, mixes sender and receiver maps
with a conv, mean-pools messages per cell by coverage count, and applies a
convolutional GRU update.  A per-cell MLP emits the fused feature map.

Everything here is local to one receiver; nothing touches the channel.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .config import ModelConfig
from .geometry import Pose2, SE2Transform
from .model import FeatureMap


@dataclass(frozen=True)
class AggregationConfig:
    iterations: int = 3
    channels: int = 32
    message_kernel: int = 3
    gru_kernel: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")

    @classmethod
    def from_model(cls, cfg: ModelConfig):
        return cls(cfg.gnn_iterations, cfg.channels, cfg.message_kernel, cfg.gru_kernel)


@dataclass
class NodeState:
    h: Tensor            # [H,W,2C]
    origin: Pose2        # world pose of the node's grid cell (0,0)
    timestamp: float
    frame: int


def init_agg_params(cfg: AggregationConfig, rng):
    c = cfg.channels
    p = {}
    p["agg/msg/w"] = nn.kaiming_conv(rng, cfg.message_kernel, 4 * c, 2 * c)
    p["agg/msg/b"] = nn.zeros_bias(2 * c)
    p.update(nn.gru_params(rng, 2 * c, kernel=cfg.gru_kernel, prefix="agg/gru/"))
    p["agg/mlp/w1"] = nn.kaiming_conv(rng, 1, 2 * c, 2 * c)
    p["agg/mlp/b1"] = nn.zeros_bias(2 * c)
    p["agg/mlp/w2"] = nn.kaiming_conv(rng, 1, 2 * c, c)
    p["agg/mlp/b2"] = nn.zeros_bias(c)
    return p


def init_time_comp_params(channels, rng=None):
    """Delay-compensation CNN params, initialized to the identity map so the
    frozen downstream keeps working at zero offset before this stage trains."""
    c = channels
    w1 = np.zeros((3, 3, c + 1, c))
    w2 = np.zeros((3, 3, c, c))
    for i in range(c):
        w1[1, 1, i, i] = 1.0
        w2[1, 1, i, i] = 1.0
    return {
        "agg/time_comp/conv1/w": Tensor(w1, requires_grad=True),
        "agg/time_comp/conv1/b": nn.zeros_bias(c),
        "agg/time_comp/conv2/w": Tensor(w2, requires_grad=True),
        "agg/time_comp/conv2/b": nn.zeros_bias(c),
    }


def has_time_comp(params):
    return "agg/time_comp/conv1/w" in params


def init_node(feature_map: FeatureMap, time_offset, params):
    """Node state from a (decoded) feature map and its age.

    The compensated C channels are concatenated with C exact zeros; the extra
    capacity is filled in by message passing.
    """
    if time_offset < 0:
        raise ValueError(f"negative time offset {time_offset}")
    x = feature_map.data
    if not isinstance(x, Tensor):
        x = Tensor(x)
    h_in, w_in, c = x.data.shape
    if has_time_comp(params):
        dt_channel = Tensor(np.full((h_in, w_in, 1), float(time_offset)))
        y = ad.concat([x, dt_channel], axis=2)
        y = nn.conv_layer(y, params["agg/time_comp/conv1/w"],
                          params["agg/time_comp/conv1/b"], activation="relu")
        y = nn.conv_layer(y, params["agg/time_comp/conv2/w"],
                          params["agg/time_comp/conv2/b"])
    else:
        y = x
    h = ad.concat([y, Tensor(np.zeros((h_in, w_in, c)))], axis=2)
    return NodeState(h=h, origin=feature_map.origin,
                     timestamp=feature_map.timestamp, frame=feature_map.frame)


def relative_transform(sender_pose: Pose2, receiver_pose: Pose2, resolution):
    """SE(2) taking sender grid coordinates (col, row) into receiver grid
    coordinates, for two grids with a shared layout and cell size."""
    dth = sender_pose.theta - receiver_pose.theta
    c, s = np.cos(-receiver_pose.theta), np.sin(-receiver_pose.theta)
    dx = sender_pose.x - receiver_pose.x
    dy = sender_pose.y - receiver_pose.y
    tx = (c * dx - s * dy) / resolution
    ty = (s * dx + c * dy) / resolution
    return SE2Transform(dth, tx, ty)


def warp_to_grid(state: Tensor, transform: SE2Transform):
    """Resample a sender map onto the receiver grid given the sender->receiver
    cell transform.  Returns (warped Tensor, overlap mask array in {0,1})."""
    h, w = state.data.shape[:2]
    cols, rows = np.meshgrid(np.arange(w, dtype=np.float64),
                             np.arange(h, dtype=np.float64))
    pts = np.stack([cols, rows], axis=-1).reshape(-1, 2)
    src = transform.inverse().apply(pts)
    coords = np.stack([src[:, 1], src[:, 0]], axis=-1).reshape(h, w, 2)
    warped, valid = ad.bilinear_sample(state, coords)
    return warped, valid.astype(np.float64)


def gnn_message(sender: NodeState, receiver: NodeState, params, resolution):
    """Masked message from sender to receiver: warp, joint conv, mask."""
    xi = relative_transform(sender.origin, receiver.origin, resolution)
    warped, mask = warp_to_grid(sender.h, xi)
    cat = ad.concat([warped, receiver.h], axis=2)
    pad = params["agg/msg/w"].data.shape[0] // 2
    m = ad.conv2d(cat, params["agg/msg/w"], stride=1, padding=pad) + params["agg/msg/b"]
    m = m * mask[..., None]
    return m, mask


def pool_messages(messages, shape):
    """Coverage-weighted mean of masked (message, mask) pairs.

    Exactly zero wherever no message covers a cell; exactly permutation
    invariant because messages are summed in a canonical content order.
    """
    if not messages:
        return Tensor(np.zeros(shape))
    for m, mask in messages:
        if m.data.shape != shape:
            raise ad.ShapeError(f"message shape {m.data.shape} != node state {shape}")
    ordered = sorted(messages, key=lambda pair: pair[0].data.tobytes())
    total = ordered[0][0]
    count = ordered[0][1].copy()
    for m, mask in ordered[1:]:
        total = total + m
        count += mask
    return total * (1.0 / np.maximum(count, 1.0))[..., None]


def node_update(h: Tensor, messages, params):
    """Pool incoming masked messages and apply the conv-GRU state update."""
    pooled = pool_messages(messages, h.data.shape)
    return nn.conv_gru_step(
        h, pooled,
        params["agg/gru/wr"], params["agg/gru/br"],
        params["agg/gru/wu"], params["agg/gru/bu"],
        params["agg/gru/wc"], params["agg/gru/bc"])


def output_mlp(h: Tensor, params):
    y = nn.conv_layer(h, params["agg/mlp/w1"], params["agg/mlp/b1"], activation="relu")
    return nn.conv_layer(y, params["agg/mlp/w2"], params["agg/mlp/b2"])


def aggregate(own: FeatureMap, received, params, cfg: AggregationConfig):
    """Fuse the receiver's own feature map with decoded neighbor maps.

    received: list of (FeatureMap, time_offset) pairs.  Runs cfg.iterations
    rounds of synchronous message passing over the fully connected local
    graph and returns the receiver's updated [H,W,C] feature tensor.
    """
    received = sorted(received, key=lambda rx: (rx[0].frame, rx[0].timestamp))
    nodes = [init_node(own, 0.0, params)]
    nodes += [init_node(fm, dt, params) for fm, dt in received]
    res = own.resolution

    n = len(nodes)
    for it in range(cfg.iterations):
        last = it == cfg.iterations - 1
        updated = []
        for k in range(n):
            if last and k > 0:
                break  # only the receiver's final state feeds the output
            msgs = []
            if n > 1:
                msgs = [gnn_message(nodes[i], nodes[k], params, res)
                        for i in range(n) if i != k]
            updated.append(node_update(nodes[k].h, msgs, params))
        for k, new_h in enumerate(updated):
            nodes[k] = NodeState(new_h, nodes[k].origin, nodes[k].timestamp, nodes[k].frame)
    return output_mlp(nodes[0].h, params)
