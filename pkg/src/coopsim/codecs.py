"""Payload codecs for the three broadcast message types.

* feature maps: learned analysis/synthesis transforms around uniform scalar
  quantization, range-coded under a learned per-channel factorized prior,
  trained with a rate-distortion objective (uniform-noise relaxation).
* point sweeps: 1 cm coordinate quantization, sweep-order delta varints,
  adaptive range coding.
* detection/forecast outputs: fixed-point packing.

Every payload is framed as: type byte, u32 payload bit length, payload,
u32 CRC-32 over (type || bit length || payload).
"""

import struct
import zlib

import numpy as np

from . import autodiff as ad
from . import nn, rangecoder
from .autodiff import Tensor
from .config import CodecConfig
from .geometry import Pose2
from .model import Detection, Forecast, FeatureMap, N_WAYPOINTS
from .sensor import Sweep

FRAME_POINTS = 0x01
FRAME_FEATURES = 0x02
FRAME_OUTPUTS = 0x03


class FramingError(ValueError):
    pass


class PayloadChecksumError(FramingError):
    pass


def frame_payload(ptype, payload: bytes):
    head = struct.pack("<BI", ptype, 8 * len(payload))
    crc = zlib.crc32(head + payload) & 0xFFFFFFFF
    return head + payload + struct.pack("<I", crc)


def parse_frame(buf: bytes):
    if len(buf) < 9:
        raise FramingError(f"frame too short ({len(buf)} bytes)")
    ptype, bitlen = struct.unpack_from("<BI", buf, 0)
    if bitlen % 8 != 0 or len(buf) != 9 + bitlen // 8:
        raise FramingError(f"frame length mismatch: header says {bitlen} bits")
    payload = buf[5 : 5 + bitlen // 8]
    (crc,) = struct.unpack_from("<I", buf, 5 + bitlen // 8)
    if zlib.crc32(buf[: 5 + bitlen // 8]) & 0xFFFFFFFF != crc:
        raise PayloadChecksumError("payload checksum mismatch")
    return ptype, payload, bitlen


# ---------------------------------------------------------------------------
# learned feature-map codec
# ---------------------------------------------------------------------------


class SymbolModel:
    """Learned per-channel probability tables over quantization indices.

    Logits [C,K] map to floored, normalized probabilities: every index keeps
    at least 1e-6 mass so the range coder can always represent it.
    """

    FLOOR_EPS = 2e-6

    def __init__(self, logits):
        self.logits = logits if isinstance(logits, Tensor) else Tensor(logits)

    @property
    def bins(self):
        return self.logits.data.shape[1]

    def probs_tensor(self):
        z = self.logits - Tensor(self.logits.data.max(axis=1, keepdims=True))
        e = ad.exp(z)
        sm = e / e.sum(axis=1, keepdims=True)
        k = self.bins
        return (sm + self.FLOOR_EPS) * (1.0 / (1.0 + k * self.FLOOR_EPS))

    def probs(self):
        return self.probs_tensor().data

    def cum_tables(self):
        return rangecoder.build_cum_tables(self.probs())


class FeatureCodec:
    """Learned compressor for the broadcast intermediate representation."""

    def __init__(self, cfg: CodecConfig, channels, params):
        self.cfg = cfg
        self.channels = channels
        self.params = params

    @staticmethod
    def init_params(channels, bins, rng):
        c = channels
        p = {}
        p["codec/enc1/w"] = nn.kaiming_conv(rng, 3, c, c)
        p["codec/enc1/b"] = nn.zeros_bias(c)
        p["codec/enc2/w"] = nn.kaiming_conv(rng, 3, c, c)
        p["codec/enc2/b"] = nn.zeros_bias(c)
        p["codec/dec1/w"] = nn.kaiming_conv(rng, 3, c, c)
        p["codec/dec1/b"] = nn.zeros_bias(c)
        p["codec/dec2/w"] = nn.kaiming_conv(rng, 3, c, c)
        p["codec/dec2/b"] = nn.zeros_bias(c)
        p["codec/prior"] = Tensor(np.zeros((c, bins)), requires_grad=True)
        return p

    # latent values v map to indices v + bins/2; training clips v to the
    # interior so the noisy index never leaves [0.5, bins - 1.5]
    @property
    def _lo(self):
        return -(self.cfg.latent_bins // 2 - 1)

    @property
    def _hi(self):
        return self.cfg.latent_bins // 2 - 2

    def analysis(self, z):
        p = self.params
        x = nn.conv_layer(z, p["codec/enc1/w"], p["codec/enc1/b"], stride=2, activation="relu")
        return nn.conv_layer(x, p["codec/enc2/w"], p["codec/enc2/b"], stride=2)

    def synthesis(self, latent, out_hw):
        p = self.params
        x = ad.upsample2x(latent)
        x = nn.conv_layer(x, p["codec/dec1/w"], p["codec/dec1/b"], activation="relu")
        x = ad.upsample2x(x)
        x = nn.conv_layer(x, p["codec/dec2/w"], p["codec/dec2/b"], activation="relu")
        h, w = out_hw
        return x[:h, :w, :]

    def _quantize(self, latent_data):
        k = self.cfg.latent_bins
        return np.clip(np.round(latent_data), self._lo, self._hi).astype(np.int64) + k // 2

    def encode(self, fm: FeatureMap):
        """Feature map -> framed bitstream (metadata travels losslessly)."""
        z = fm.data if isinstance(fm.data, Tensor) else Tensor(fm.data)
        latent = self.analysis(z.detach()).data
        idx = self._quantize(latent)
        hl, wl, c = idx.shape
        table_ids = np.tile(np.arange(c, dtype=np.int64), hl * wl)
        bits = rangecoder.encode(idx.reshape(-1), table_ids,
                                 SymbolModel(self.params["codec/prior"]).cum_tables())
        h, w = z.data.shape[:2]
        head = struct.pack(
            _FEAT_HEADER, 1,
            fm.origin.x, fm.origin.y, fm.origin.theta, fm.timestamp, fm.resolution,
            fm.frame, h, w, c, hl, wl, c, len(idx.reshape(-1)))
        return frame_payload(FRAME_FEATURES, head + bits.data)

    def decode(self, framed: bytes):
        return decode_features(framed, self)

    HEADER_BYTES = None  # set below once _FEAT_HEADER exists

    def message_bits(self, fm: FeatureMap):
        """Actual payload size and the prior's predicted size (metadata header
        plus ideal code length plus flush) for the same symbols."""
        framed = self.encode(fm)
        _, payload, bitlen = parse_frame(framed)
        z = fm.data if isinstance(fm.data, Tensor) else Tensor(fm.data)
        latent = self.analysis(z.detach()).data
        idx = self._quantize(latent)
        hl, wl, c = idx.shape
        table_ids = np.tile(np.arange(c, dtype=np.int64), hl * wl)
        ideal = rangecoder.table_bits(idx.reshape(-1), table_ids,
                                      SymbolModel(self.params["codec/prior"]).cum_tables())
        return bitlen, 8 * self.HEADER_BYTES + ideal + rangecoder.FLUSH_BITS

    def rd_loss(self, fm: FeatureMap, lam, rng):
        """Differentiable rate-distortion objective with uniform-noise
        quantization relaxation: bits per latent element + lam * MSE."""
        z = fm.data if isinstance(fm.data, Tensor) else Tensor(fm.data)
        latent = self.analysis(z)
        clipped = ad.hard_clip(latent, float(self._lo), float(self._hi))
        noise = rng.uniform(-0.5, 0.5, size=latent.data.shape)
        noisy = clipped + noise
        k = self.cfg.latent_bins

        idx = noisy + float(k // 2)
        k0 = np.floor(idx.data).astype(np.int64)
        frac = idx - k0.astype(np.float64)
        probs = SymbolModel(self.params["codec/prior"]).probs_tensor()
        flat = probs.reshape(-1)
        chan = np.tile(np.arange(self.channels, dtype=np.int64),
                       idx.data.shape[0] * idx.data.shape[1])
        base = chan * k + k0.reshape(-1)
        p0 = ad.gather_flat(flat, base)
        p1 = ad.gather_flat(flat, base + 1)
        fr = frac.reshape(-1)
        p_hat = ad.clamp_min(p0 * (1.0 - fr) + p1 * fr, 1e-9)
        total_bits = -ad.tsum(ad.log(p_hat)) * (1.0 / np.log(2.0))
        rate = total_bits * (1.0 / idx.data.size)

        recon = self.synthesis(noisy, z.data.shape[:2])
        err = recon - z
        mse = ad.tsum(err * err) * (1.0 / err.size)
        loss = rate + lam * mse
        return loss, float(rate.data), float(mse.data)


# mode byte (1 = learned code, 0 = raw float64), grid origin pose, timestamp,
# cell size, producing frame, map dims, latent dims, symbol count
_FEAT_HEADER = "<B ddddd IHHH HHH I"
FeatureCodec.HEADER_BYTES = struct.calcsize(_FEAT_HEADER)


def encode_raw_features(fm: FeatureMap):
    """Uncompressed feature payload (float64 grid); no learned params needed."""
    data = fm.data.data if isinstance(fm.data, Tensor) else np.asarray(fm.data)
    h, w, c = data.shape
    head = struct.pack(
        _FEAT_HEADER, 0,
        fm.origin.x, fm.origin.y, fm.origin.theta, fm.timestamp, fm.resolution,
        fm.frame, h, w, c, 0, 0, 0, 0)
    return frame_payload(FRAME_FEATURES, head + np.ascontiguousarray(data, dtype="<f8").tobytes())


def decode_features(framed: bytes, codec: FeatureCodec = None):
    """Decode either feature payload mode; coded mode needs the codec."""
    ptype, payload, _ = parse_frame(framed)
    if ptype != FRAME_FEATURES:
        raise FramingError(f"expected feature frame, got type {ptype:#x}")
    fields = struct.unpack_from(_FEAT_HEADER, payload, 0)
    mode, ox, oy, oth, ts, res, frame, h, w, c, hl, wl, cl, n = fields
    off = struct.calcsize(_FEAT_HEADER)
    if mode == 0:
        data = np.frombuffer(payload, dtype="<f8", offset=off).reshape(h, w, c)
        return FeatureMap(Tensor(data.copy()), Pose2(ox, oy, oth), res, frame, ts)
    if codec is None:
        raise FramingError("coded feature payload needs a trained codec to decode")
    bits = rangecoder.Bitstream(payload[off:], 8 * (len(payload) - off))
    table_ids = np.tile(np.arange(cl, dtype=np.int64), hl * wl)
    idx = rangecoder.decode(bits, n, table_ids,
                            SymbolModel(codec.params["codec/prior"]).cum_tables())
    latent = idx.reshape(hl, wl, cl).astype(np.float64) - codec.cfg.latent_bins // 2
    recon = codec.synthesis(Tensor(latent), (h, w)).detach()
    return FeatureMap(recon, Pose2(ox, oy, oth), res, frame, ts)


def feature_compression_ratio(fm: FeatureMap, bit_length):
    """Coded size vs. the uncompressed float32 payload of the same map."""
    h, w, c = (fm.data.data if isinstance(fm.data, Tensor) else fm.data).shape
    return (h * w * c * 32) / bit_length


# ---------------------------------------------------------------------------
# point sweep codec
# ---------------------------------------------------------------------------


def _zigzag(v):
    return (v << 1) ^ (v >> 63)


def _unzigzag(u):
    return (u >> 1) ^ -(u & 1)


def _varint_bytes(values):
    out = []
    for v in values:
        u = int(_zigzag(int(v)))
        while True:
            b = u & 0x7F
            u >>= 7
            if u:
                out.append(b | 0x80)
            else:
                out.append(b)
                break
    return out


class _ByteReader:
    def __init__(self, symbols):
        self.symbols = symbols
        self.pos = 0

    def varint(self):
        shift = 0
        acc = 0
        while True:
            b = int(self.symbols[self.pos])
            self.pos += 1
            acc |= (b & 0x7F) << shift
            if not b & 0x80:
                return int(_unzigzag(acc))
            shift += 7


class PointCodec:
    """Sweep compressor: 1 cm grid, sweep-order linear-predictor deltas, and
    adaptive range coding of the residual varints (one stream per field).

    Lossy only through coordinate quantization (max error half a cell); ray
    time offsets ride along exactly, either as ray indices on the sweep's
    timing grid or verbatim as float64 when they do not fit the grid.
    """

    def __init__(self, cfg: CodecConfig):
        self.cfg = cfg

    @staticmethod
    def _residuals(q, ray_idx, on_grid):
        """dj plus second-order coordinate residuals, one list per field."""
        n = len(q)
        streams = ([], [], [])
        for i in range(n):
            if on_grid:
                streams[0].extend(_varint_bytes([ray_idx[i] - (ray_idx[i - 1] if i else 0)]))
            for ax in (0, 1):
                if i >= 2:
                    pred = 2 * q[i - 1, ax] - q[i - 2, ax]
                elif i == 1:
                    pred = q[0, ax]
                else:
                    pred = 0
                streams[1 + ax].extend(_varint_bytes([q[i, ax] - pred]))
        return streams

    def encode(self, sweep: Sweep):
        res = self.cfg.point_resolution
        n = len(sweep.points)
        q = np.round(sweep.points[:, :2] / res).astype(np.int64) if n else np.zeros((0, 2), np.int64)
        offs = sweep.points[:, 2] if n else np.zeros(0)
        ray_idx = np.round(offs * sweep.n_rays / sweep.period).astype(np.int64)
        on_grid = bool(n == 0 or np.abs(ray_idx * (sweep.period / sweep.n_rays) - offs).max() == 0.0)

        segments = []
        for syms in self._residuals(q, ray_idx, on_grid):
            arr = np.array(syms, dtype=np.int64) if syms else np.zeros(0, dtype=np.int64)
            bits = rangecoder.encode_adaptive(arr, 256)
            segments.append((len(arr), bits.data))

        head = struct.pack(
            "<dddd dII IB",
            sweep.pose.x, sweep.pose.y, sweep.pose.theta, sweep.t0,
            sweep.period, sweep.n_rays, sweep.sensor_id,
            n, 1 if on_grid else 0)
        parts = [head]
        for n_syms, data in segments:
            parts.append(struct.pack("<II", n_syms, len(data)))
            parts.append(data)
        if not on_grid:
            parts.append(np.ascontiguousarray(offs, dtype="<f8").tobytes())
        return frame_payload(FRAME_POINTS, b"".join(parts))

    def decode(self, framed: bytes):
        ptype, payload, _ = parse_frame(framed)
        if ptype != FRAME_POINTS:
            raise FramingError(f"expected point frame, got type {ptype:#x}")
        fmt = "<dddd dII IB"
        px, py, pth, t0, period, n_rays, sensor_id, n, on_grid = \
            struct.unpack_from(fmt, payload, 0)
        pos = struct.calcsize(fmt)
        readers = []
        for _ in range(3):
            n_syms, n_bytes = struct.unpack_from("<II", payload, pos)
            pos += 8
            bits = rangecoder.Bitstream(payload[pos : pos + n_bytes], 8 * n_bytes)
            pos += n_bytes
            readers.append(_ByteReader(rangecoder.decode_adaptive(bits, n_syms, 256)))

        pts = np.zeros((n, 3))
        q = np.zeros((n, 2), dtype=np.int64)
        ray = 0
        res = self.cfg.point_resolution
        for i in range(n):
            if on_grid:
                ray += readers[0].varint()
                pts[i, 2] = ray * (period / n_rays)
            for ax in (0, 1):
                if i >= 2:
                    pred = 2 * q[i - 1, ax] - q[i - 2, ax]
                elif i == 1:
                    pred = q[0, ax]
                else:
                    pred = 0
                q[i, ax] = pred + readers[1 + ax].varint()
            pts[i, :2] = q[i] * res
        if not on_grid:
            pts[:, 2] = np.frombuffer(payload[len(payload) - 8 * n:], dtype="<f8")
        return Sweep(sensor_id, Pose2(px, py, pth), t0, period, n_rays,
                     pts, np.full(n, -1, dtype=np.int64))


def point_compression_ratio(sweep: Sweep, bit_length):
    """Coded size vs. two float32 coordinates per point."""
    return (64 * max(len(sweep.points), 1)) / bit_length


# ---------------------------------------------------------------------------
# fixed-point output codec
# ---------------------------------------------------------------------------


class OutputCodec:
    """Detections and forecasts as fixed-point records: positions and sizes on
    a 1 cm grid, headings at 0.01 rad, scores in 1/255 steps."""

    def __init__(self, cfg: CodecConfig):
        self.cfg = cfg

    def _q(self, v, step, lo=-32768, hi=32767):
        return int(np.clip(np.round(v / step), lo, hi))

    def encode(self, outputs):
        """outputs: list of (Detection, Forecast or None)."""
        res = self.cfg.output_resolution
        ares = self.cfg.angle_resolution
        chunks = [struct.pack("<H", len(outputs))]
        for det, fc in outputs:
            chunks.append(struct.pack(
                "<hhHHhBB",
                self._q(det.x, res), self._q(det.y, res),
                self._q(det.w, res, 0, 65535), self._q(det.h, res, 0, 65535),
                self._q(det.theta, ares),
                int(np.clip(np.round(det.score * 255), 0, 255)),
                1 if fc is not None else 0))
            if fc is not None:
                rel = fc.waypoints - np.array([det.x, det.y])
                for k in range(N_WAYPOINTS):
                    chunks.append(struct.pack(
                        "<hh", self._q(rel[k, 0], res), self._q(rel[k, 1], res)))
        return frame_payload(FRAME_OUTPUTS, b"".join(chunks))

    def decode(self, framed: bytes):
        ptype, payload, _ = parse_frame(framed)
        if ptype != FRAME_OUTPUTS:
            raise FramingError(f"expected output frame, got type {ptype:#x}")
        res = self.cfg.output_resolution
        ares = self.cfg.angle_resolution
        (count,) = struct.unpack_from("<H", payload, 0)
        pos = 2
        out = []
        for _ in range(count):
            x, y, w, h, th, score, has_fc = struct.unpack_from("<hhHHhBB", payload, pos)
            pos += struct.calcsize("<hhHHhBB")
            det = Detection(x * res, y * res, w * res, h * res, th * ares, score / 255.0)
            fc = None
            if has_fc:
                wps = np.zeros((N_WAYPOINTS, 2))
                for k in range(N_WAYPOINTS):
                    ax, ay = struct.unpack_from("<hh", payload, pos)
                    pos += 4
                    wps[k] = det.x + ax * res, det.y + ay * res
                fc = Forecast(wps)
            out.append((det, fc))
        return out
