import numpy as np
import pytest
from scipy import stats

from coopsim import channel, codecs
from coopsim.channel import (Channel, V2VMessage, parse, serialize,
                             transmission_delay, write_dump, read_dump,
                             BadMagicError, BadVersionError, TruncatedMessageError)
from coopsim.config import ChannelConfig
from coopsim.geometry import Pose2


def make_msg(sender=3, x=1.0, y=2.0, th=0.25, ts=12.5, body=b"hello world"):
    return V2VMessage(sender, Pose2(x, y, th), ts,
                      codecs.frame_payload(codecs.FRAME_OUTPUTS, body))


def dummy_source(pose=Pose2(0, 0, 0), body=b"payload"):
    payload = codecs.frame_payload(codecs.FRAME_OUTPUTS, body)
    return lambda send_t: (pose, payload)


def test_serialize_parse_roundtrip_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        msg = make_msg(sender=int(rng.integers(0, 1000)),
                       x=float(rng.uniform(-100, 100)), y=float(rng.uniform(-100, 100)),
                       th=float(rng.uniform(-np.pi, np.pi)), ts=float(rng.uniform(0, 1e6)),
                       body=bytes(rng.integers(0, 256, int(rng.integers(0, 200))).astype(np.uint8)))
        got = parse(serialize(msg))
        assert got == msg


def test_header_size_fixed():
    msg = make_msg(body=b"")
    blob = serialize(msg)
    assert len(blob) == channel.HEADER_BYTES + len(msg.payload)
    assert blob[:4] == b"V2VM"


def test_parse_distinct_errors():
    blob = serialize(make_msg())
    with pytest.raises(TruncatedMessageError):
        parse(blob[:20])
    bad_magic = b"XXXX" + blob[4:]
    with pytest.raises(BadMagicError):
        parse(bad_magic)
    bad_ver = blob[:4] + bytes([99]) + blob[5:]
    with pytest.raises(BadVersionError):
        parse(bad_ver)


def test_any_payload_bitflip_fails_checksum():
    blob = serialize(make_msg(body=b"0123456789"))
    rng = np.random.default_rng(1)
    for _ in range(30):
        i = int(rng.integers(channel.HEADER_BYTES, len(blob)))
        bad = bytearray(blob)
        bad[i] ^= 1 << int(rng.integers(8))
        with pytest.raises(codecs.FramingError):
            parse(bytes(bad))


def test_transmission_delay_values():
    assert transmission_delay(0, 25e6) == 0.0
    assert transmission_delay(225_000, 25e6) == 0.009
    assert transmission_delay(8e6, 1e7) == 0.8
    with pytest.raises(ValueError):
        transmission_delay(100, 0)


def test_broadcast_range_gating():
    cfg = ChannelConfig(broadcast_range=70.0)
    ch = Channel(cfg, np.random.default_rng(0))
    sources = [(1, dummy_source(Pose2(71.0, 0, 0))), (2, dummy_source(Pose2(69.5, 0, 0)))]
    got = ch.broadcast(sources, 0, Pose2(0, 0, 0), 1.0)
    assert [m.sender_id for m in got] == [2]


def test_broadcast_identity_when_impairments_off():
    cfg = ChannelConfig(delay_max=0.0, pos_noise_sigma=0.0, heading_noise_kappa=0.0, drop_prob=0.0)
    ch = Channel(cfg, np.random.default_rng(0))
    pose = Pose2(10.0, 5.0, 0.3)
    payload = codecs.frame_payload(codecs.FRAME_OUTPUTS, b"exact")
    got = ch.broadcast([(7, lambda st: (pose, payload))], 0, Pose2(0, 0, 0), 2.5)
    assert len(got) == 1
    assert got[0].pose == pose
    assert got[0].timestamp == 2.5
    assert got[0].payload == payload


def test_broadcast_delays_uniform():
    cfg = ChannelConfig(delay_max=0.1)
    ch = Channel(cfg, np.random.default_rng(7))
    delays = []
    t = 0.0
    for _ in range(10_000):
        t += 0.1
        (msg,) = ch.broadcast([(1, dummy_source())], 0, Pose2(0, 0, 0), t)
        delays.append(t - msg.timestamp)
    delays = np.array(delays)
    assert stats.kstest(delays, stats.uniform(0, 0.1).cdf).pvalue > 0.01


def test_broadcast_fifo_per_pair():
    cfg = ChannelConfig(delay_max=0.25)  # larger than the frame period on purpose
    ch = Channel(cfg, np.random.default_rng(3))
    last = -np.inf
    for k in range(500):
        t = 0.1 * (k + 1)
        (msg,) = ch.broadcast([(1, dummy_source())], 0, Pose2(0, 0, 0), t)
        assert msg.timestamp >= last
        last = msg.timestamp


def test_broadcast_drop_probability():
    cfg = ChannelConfig(drop_prob=0.3)
    ch = Channel(cfg, np.random.default_rng(11))
    n = sum(len(ch.broadcast([(1, dummy_source())], 0, Pose2(0, 0, 0), 0.1 * k))
            for k in range(5000))
    assert abs(n / 5000 - 0.7) < 0.02


def test_broadcast_pose_noise_applied_to_header_only():
    cfg = ChannelConfig(pos_noise_sigma=0.4, heading_noise_kappa=1.0 / 4.873e-3)
    ch = Channel(cfg, np.random.default_rng(5))
    pose = Pose2(3.0, 4.0, 0.1)
    xs = []
    for k in range(3000):
        (msg,) = ch.broadcast([(1, dummy_source(pose))], 0, Pose2(0, 0, 0), 0.1 * k)
        xs.append(msg.pose.x - pose.x)
    assert 0.36 < np.std(xs) < 0.44


def test_dump_roundtrip(tmp_path):
    msgs = [make_msg(sender=i, body=bytes([i] * i)) for i in range(5)]
    p = tmp_path / "dump.v2vd"
    write_dump(msgs, p)
    got = read_dump(p)
    assert got == msgs
    with pytest.raises(TruncatedMessageError):
        read_dump_path = tmp_path / "trunc.v2vd"
        read_dump_path.write_bytes(p.read_bytes()[:-3])
        read_dump(read_dump_path)
