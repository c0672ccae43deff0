"""V2V channel model: everything between sender compression and receiver
decoding.

A broadcast at receiver frame time t delivers, per in-range sender, the
sender's sweep as of t - delay with delay ~ U(0, delay_max): delayed messages
carry genuinely stale content, not just stale labels.  Claimed header poses
can be noise-perturbed; losses are Bernoulli.  Delivery never reorders one
sender's messages to one receiver (send times are clamped monotone).

Injected delay models sensor asynchrony; serialization-size transmission
delay is accounted separately via transmission_delay().
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import codecs
from .config import ChannelConfig
from .geometry import Pose2
from .world import perturb_pose

MAGIC = b"V2VM"
VERSION = 1
HEADER_BYTES = 41  # magic 4 + version 1 + sender 4 + pose 24 + timestamp 8


class WireFormatError(ValueError):
    pass


class TruncatedMessageError(WireFormatError):
    pass


class BadMagicError(WireFormatError):
    pass


class BadVersionError(WireFormatError):
    pass


@dataclass
class V2VMessage:
    sender_id: int
    pose: Pose2        # claimed sender pose at sweep time (possibly perturbed)
    timestamp: float   # sweep start time, shared GPS-style clock
    payload: bytes     # framed payload (see codecs.frame_payload)


def serialize(msg: V2VMessage):
    head = MAGIC + struct.pack(
        "<BIdddd", VERSION, msg.sender_id,
        msg.pose.x, msg.pose.y, msg.pose.theta, msg.timestamp)
    return head + msg.payload


def parse(buf: bytes):
    if len(buf) < HEADER_BYTES:
        raise TruncatedMessageError(f"message is {len(buf)} bytes, header needs {HEADER_BYTES}")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    version, sender, px, py, pth, ts = struct.unpack_from("<BIdddd", buf, 4)
    if version != VERSION:
        raise BadVersionError(f"unsupported message version {version}")
    payload = buf[HEADER_BYTES:]
    codecs.parse_frame(payload)  # validates length and checksum
    return V2VMessage(sender, Pose2(px, py, pth), ts, payload)


def transmission_delay(bits, rate_bps):
    """Seconds on air for a payload of the given size."""
    if rate_bps <= 0:
        raise ValueError(f"data rate must be positive, got {rate_bps}")
    return bits / rate_bps


class Channel:
    """Stateful broadcast fabric; per-pair send-time clamping keeps FIFO."""

    def __init__(self, cfg: ChannelConfig, rng):
        self.cfg = cfg
        self.rng = rng
        self._last_send = {}

    def broadcast(self, sources, receiver_id, receiver_pose, t):
        """Deliver one message per in-range sender for receiver frame time t.

        sources: iterable of (sender_id, source_fn); source_fn(send_time)
        must return (true_pose, framed_payload) for that sender's sweep
        starting at send_time.  Draw order per sender is fixed (delay, drop,
        pose noise) so results are deterministic given the generator state.
        """
        cfg = self.cfg
        out = []
        for sender_id, source_fn in sorted(sources, key=lambda s: s[0]):
            if sender_id == receiver_id:
                continue
            delay = float(self.rng.uniform(0.0, cfg.delay_max)) if cfg.delay_max > 0 else 0.0
            dropped = cfg.drop_prob > 0 and self.rng.uniform() < cfg.drop_prob
            send_t = t - delay
            key = (sender_id, receiver_id)
            send_t = max(send_t, self._last_send.get(key, -np.inf))
            true_pose, payload = source_fn(send_t)
            claimed = true_pose
            if cfg.pos_noise_sigma > 0 or cfg.heading_noise_kappa > 0:
                claimed = perturb_pose(true_pose, cfg.pos_noise_sigma,
                                       cfg.heading_noise_kappa, self.rng)
            in_range = np.hypot(true_pose.x - receiver_pose.x,
                                true_pose.y - receiver_pose.y) <= cfg.broadcast_range
            if dropped or not in_range:
                continue
            self._last_send[key] = send_t
            out.append(V2VMessage(sender_id, claimed, send_t, payload))
        return out


# -- message dump / replay files: length-prefixed concatenation ---------------


def write_dump(messages, path):
    with open(path, "wb") as f:
        for msg in messages:
            blob = serialize(msg)
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)


def read_dump(path):
    out = []
    with open(path, "rb") as f:
        buf = f.read()
    pos = 0
    while pos < len(buf):
        if pos + 4 > len(buf):
            raise TruncatedMessageError("dangling length prefix in dump")
        (ln,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + ln > len(buf):
            raise TruncatedMessageError("truncated message in dump")
        out.append(parse(buf[pos : pos + ln]))
        pos += ln
    return out
