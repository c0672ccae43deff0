"""Binary parameter checkpoints.

Layout (little-endian): magic "PNPW", version u16, tensor count u32, then per
tensor: name length u16, name bytes (utf-8), rank u8, dims u32 * rank, and
the float64 payload in row-major order.
"""

import struct

import numpy as np

from .autodiff import Tensor

MAGIC = b"PNPW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_params(path, params):
    """Write dict name -> Tensor (or ndarray) to a checkpoint file."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(params)))
        for name in sorted(params):
            data = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
            data = np.asarray(data, dtype=np.float64)
            if data.ndim and not data.flags["C_CONTIGUOUS"]:
                data = np.ascontiguousarray(data)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_params(path, requires_grad=True):
    """Read a checkpoint back into dict name -> Tensor."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r}")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 10
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims)
        pos += 8 * n
        params[name] = Tensor(data.copy(), requires_grad=requires_grad)
    if pos != len(buf):
        raise CheckpointError("trailing bytes in checkpoint")
    return params
