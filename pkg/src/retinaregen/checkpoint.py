"""Binary checkpoint container: named float32 arrays, round-trip exact.

Layout (little-endian): magic "RRGN1\\0", u32 entry count, then per entry
u16 name length + UTF-8 name, u8 dtype tag (0 = f32), u8 ndim,
ndim x u32 shape, row-major payload.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"RRGN1\x00"
DTYPE_F32 = 0


class CheckpointFormatError(Exception):
    pass


def save_arrays(arrays: dict, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            a = np.asarray(arr, dtype="<f4", order="C")  # keeps 0-d shape
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", DTYPE_F32, a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def load_arrays(path: str) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"bad magic at offset 0: {data[:6]!r}")
    off = len(MAGIC)
    if len(data) < off + 4:
        raise CheckpointFormatError(f"truncated header at offset {off}")
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays: dict = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + name_len].decode("utf-8")
            off += name_len
            dtype_tag, ndim = struct.unpack_from("<BB", data, off)
            off += 2
            if dtype_tag != DTYPE_F32:
                raise CheckpointFormatError(
                    f"unknown dtype tag {dtype_tag} at offset {off - 2}"
                )
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if ndim else 4
            if ndim == 0:
                nbytes = 4
            if off + nbytes > len(data):
                raise CheckpointFormatError(
                    f"truncated payload for '{name}' at offset {off}"
                )
            arrays[name] = np.frombuffer(
                data[off : off + nbytes], dtype="<f4"
            ).reshape(shape).copy()
            off += nbytes
        except struct.error as exc:
            raise CheckpointFormatError(f"truncated entry at offset {off}") from exc
    return arrays


def state_dict_to_arrays(state_dict, prefix: str = "") -> dict:
    """Flatten a torch state dict into name -> float32 numpy array."""
    out = {}
    for name, tensor in state_dict.items():
        out[prefix + name] = tensor.detach().cpu().numpy().astype(np.float32)
    return out


def arrays_to_state_dict(arrays: dict, prefix: str = ""):
    import torch

    out = {}
    for name, arr in arrays.items():
        if prefix and not name.startswith(prefix):
            continue
        out[name[len(prefix) :]] = torch.from_numpy(np.asarray(arr, dtype=np.float32))
    return out
