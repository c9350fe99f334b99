"""Self-describing binary checkpoints with bit-exact round-trips.

Layout: header (magic, version, endianness marker, record count), then one
record per tensor: name length, utf-8 name, dtype code, rank, dims, raw
little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CKPT"
VERSION = 1
ENDIAN_MARK = 0x0102  # written little-endian; readers on other byte orders must swap

_DTYPE_CODES: dict[torch.dtype, int] = {
    torch.float32: 0,
    torch.float64: 1,
    torch.int64: 2,
    torch.uint8: 3,
    torch.int32: 4,
}
_CODE_DTYPES = {code: (dt, np.dtype(str(dt).removeprefix("torch."))) for dt, code in _DTYPE_CODES.items()}


class CheckpointError(RuntimeError):
    """Malformed or incompatible checkpoint file."""


def save_tensors(path: str | Path, tensors: dict[str, torch.Tensor]) -> None:
    """Write named tensors to a checkpoint file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HHI", VERSION, ENDIAN_MARK, len(tensors)))
        for name, t in tensors.items():
            if t.dtype not in _DTYPE_CODES:
                raise CheckpointError(f"unsupported dtype {t.dtype} for '{name}'")
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise CheckpointError(f"tensor name too long: {name[:32]}...")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", _DTYPE_CODES[t.dtype], t.dim()))
            fh.write(struct.pack(f"<{t.dim()}I", *t.shape))
            arr = t.detach().cpu().contiguous().numpy()
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_tensors(path: str | Path) -> dict[str, torch.Tensor]:
    """Read a checkpoint file back into named tensors."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    version, endian, count = struct.unpack_from("<HHI", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if endian != ENDIAN_MARK:
        raise CheckpointError(f"unexpected endianness marker 0x{endian:04x}")
    off = 12
    out: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        code, rank = struct.unpack_from("<BB", data, off)
        off += 2
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for '{name}'")
        torch_dt, np_dt = _CODE_DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = n * np_dt.itemsize
        if off + nbytes > len(data):
            raise CheckpointError(f"truncated payload for '{name}'")
        arr = np.frombuffer(data, dtype=np_dt.newbyteorder("<"), count=n, offset=off)
        off += nbytes
        out[name] = torch.from_numpy(arr.astype(np_dt, copy=True)).reshape(dims)
    if off != len(data):
        raise CheckpointError(f"{len(data) - off} trailing bytes in {path}")
    return out


def save_module(path: str | Path, module: torch.nn.Module, extra: dict[str, torch.Tensor] | None = None) -> None:
    """Checkpoint a module's parameters and buffers, plus extra named tensors."""
    tensors = dict(module.state_dict())
    for key, value in (extra or {}).items():
        if key in tensors:
            raise CheckpointError(f"extra tensor name collides with module state: '{key}'")
        tensors[key] = value
    save_tensors(path, tensors)


def load_module(path: str | Path, module: torch.nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    """Restore a module from a checkpoint; returns tensors not consumed by it."""
    tensors = load_tensors(path)
    state = {}
    rest = {}
    wanted = {k: v for k, v in module.state_dict().items()}
    for name, t in tensors.items():
        key = name.removeprefix(prefix) if prefix and name.startswith(prefix) else name
        if key in wanted:
            if wanted[key].shape != t.shape:
                raise CheckpointError(
                    f"shape mismatch for '{key}': file {tuple(t.shape)} vs module {tuple(wanted[key].shape)}"
                )
            state[key] = t.to(wanted[key].dtype)
        else:
            rest[name] = t
    missing = set(wanted) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)[:8]}")
    module.load_state_dict(state)
    return rest
