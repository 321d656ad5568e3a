"""Named parameter store with trainable flags and binary checkpoints.

The store is the unit of auditing, optimization, and serialization:
every model parameter is registered exactly once under a unique dotted
name, optimizers touch only trainable entries, and checkpoints
round-trip bit-exactly.

Checkpoint layout (little-endian throughout):

    magic   4 bytes  "ADLB"
    version u16
    count   u32
    then per entry:
        name      u16 length + UTF-8 bytes
        trainable u8
        dtype     u8   (0 = float32, 1 = float64)
        rank      u8
        extents   u32 * rank
        values    raw little-endian floats, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

MAGIC = b"ADLB"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    """Malformed checkpoint file (bad magic, version, or truncation)."""


class DuplicateParamError(ValueError):
    pass


@dataclass
class ParamEntry:
    tensor: Tensor
    trainable: bool
    group: str  # "backbone" | "adapter" | "head"


class ParamStore:
    """Ordered map of parameter name -> (tensor, trainable flag, group)."""

    def __init__(self) -> None:
        self._entries: dict[str, ParamEntry] = {}

    def register(self, name: str, tensor: Tensor, trainable: bool, group: str = "backbone") -> Tensor:
        if name in self._entries:
            raise DuplicateParamError(f"parameter {name!r} registered twice")
        tensor.requires_grad = trainable
        self._entries[name] = ParamEntry(tensor, trainable, group)
        return tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def entry(self, name: str) -> ParamEntry:
        return self._entries[name]

    def items(self):
        return self._entries.items()

    def is_trainable(self, name: str) -> bool:
        return self._entries[name].trainable

    def set_trainable(self, name: str, flag: bool) -> None:
        e = self._entries[name]
        e.trainable = flag
        e.tensor.requires_grad = flag

    def trainable_items(self):
        return [(n, e) for n, e in self._entries.items() if e.trainable]

    def num_params(self, trainable_only: bool = True, exclude_groups: tuple[str, ...] = ()) -> int:
        total = 0
        for e in self._entries.values():
            if trainable_only and not e.trainable:
                continue
            if e.group in exclude_groups:
                continue
            total += e.tensor.size
        return total

    def zero_grads(self) -> None:
        for e in self._entries.values():
            e.tensor.grad = None

    # -- snapshots (in-memory, for best-checkpoint tracking) -----------

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: e.tensor.data.copy() for n, e in self._entries.items()}

    def restore(self, state: dict[str, np.ndarray]) -> None:
        for name, arr in state.items():
            self._entries[name].tensor.data = arr.copy()

    # -- binary checkpoint I/O ------------------------------------------

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<HI", VERSION, len(self._entries)))
            for name, e in self._entries.items():
                raw = name.encode("utf-8")
                arr = e.tensor.data
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<BBB", int(e.trainable), _DTYPE_CODES[arr.dtype], arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        store = cls()
        with open(path, "rb") as fh:
            blob = fh.read()
        view = memoryview(blob)
        off = 0

        def take(n: int) -> memoryview:
            nonlocal off
            if off + n > len(view):
                raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {off}")
            piece = view[off:off + n]
            off += n
            return piece

        if bytes(take(4)) != MAGIC:
            raise CheckpointError("bad magic: not an ADLB checkpoint")
        version, count = struct.unpack("<HI", take(6))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", take(2))
            name = bytes(take(name_len)).decode("utf-8")
            trainable, dcode, rank = struct.unpack("<BBB", take(3))
            if dcode not in _CODE_DTYPES:
                raise CheckpointError(f"unknown dtype code {dcode} for {name!r}")
            shape = struct.unpack(f"<{rank}I", take(4 * rank))
            dtype = _CODE_DTYPES[dcode]
            count_items = int(np.prod(shape, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(take(count_items * dtype.itemsize), dtype=dtype).reshape(shape)
            store.register(name, Tensor(arr.copy()), trainable=bool(trainable))
        if off != len(view):
            raise CheckpointError(f"trailing bytes after last entry: {len(view) - off}")
        return store

    def load_values_from(self, other: "ParamStore") -> None:
        """Copy values of identically named entries (shapes must match)."""
        for name, e in self._entries.items():
            if name not in other._entries:
                raise CheckpointError(f"checkpoint is missing parameter {name!r}")
            src = other._entries[name].tensor.data
            if src.shape != e.tensor.data.shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: model {e.tensor.data.shape}, "
                    f"checkpoint {src.shape}"
                )
            e.tensor.data = src.astype(e.tensor.data.dtype, copy=True)
