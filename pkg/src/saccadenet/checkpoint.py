"""Named-tensor checkpoint format with a JSON config sidecar.

Layout (little-endian): magic "SANW", u16 version, u32 tensor count; per
tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 dims, raw float32
data; then a u32 length-prefixed JSON document holding the producing
configuration. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .autodiff import Tensor
from .errors import FileFormatError

CHECKPOINT_MAGIC = b"SANW"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, params: dict[str, Tensor], config: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(params)))
        for name, tensor in params.items():
            data = np.ascontiguousarray(
                tensor.data if isinstance(tensor, Tensor) else tensor, dtype="<f4"
            )
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())
        sidecar = json.dumps(config, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(sidecar)))
        fh.write(sidecar)


def load_checkpoint(path: str) -> tuple[dict[str, Tensor], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()

    def need(offset: int, count: int, what: str) -> None:
        if offset + count > len(blob):
            raise FileFormatError(f"{path}: truncated while reading {what} at offset {offset}")

    need(0, 10, "header")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FileFormatError(f"{path}: bad magic {blob[:4]!r} at offset 0")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    offset = 10
    params: dict[str, Tensor] = {}
    for i in range(count):
        need(offset, 2, f"tensor {i} name length")
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        need(offset, name_len, f"tensor {i} name")
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        need(offset, 1, f"tensor {name!r} rank")
        rank = blob[offset]
        offset += 1
        need(offset, 4 * rank, f"tensor {name!r} dims")
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        n_bytes = 4 * int(np.prod(dims, dtype=np.int64)) if rank else 4
        need(offset, n_bytes, f"tensor {name!r} data")
        data = np.frombuffer(blob, dtype="<f4", count=n_bytes // 4, offset=offset).reshape(dims)
        offset += n_bytes
        params[name] = Tensor(data.copy(), requires_grad=True)
    need(offset, 4, "config length")
    (cfg_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    need(offset, cfg_len, "config sidecar")
    config = json.loads(blob[offset : offset + cfg_len].decode("utf-8"))
    return params, config
