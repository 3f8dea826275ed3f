"""Named-tensor archive (safetensors layout) reader and writer.

Layout: 8-byte little-endian header length N, N bytes of UTF-8 JSON mapping
tensor names to ``{"dtype", "shape", "data_offsets": [begin, end]}`` (offsets
relative to the end of the header), optional ``"__metadata__"`` string map,
then one contiguous raw buffer.

Reads go through ``np.fromfile`` with an explicit offset so each tensor costs
exactly one allocation of its own size; nothing else of the file is resident.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

_DTYPES: dict[str, np.dtype] = {
    "F64": np.dtype("<f8"),
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "BF16": np.dtype("<u2"),  # decoded to float32 on read
    "I64": np.dtype("<i8"),
    "I32": np.dtype("<i4"),
    "I16": np.dtype("<i2"),
    "I8": np.dtype("i1"),
    "U8": np.dtype("u1"),
    "BOOL": np.dtype("?"),
}
_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items() if k != "BF16"}

_MAX_HEADER = 100 * 1024 * 1024


class ArchiveError(ValueError):
    """Malformed archive or a request the archive cannot satisfy."""


@dataclass(frozen=True)
class TensorInfo:
    name: str
    dtype: str
    shape: tuple[int, ...]
    begin: int
    end: int

    @property
    def nbytes(self) -> int:
        return self.end - self.begin

    @property
    def count(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


def bf16_to_f32(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.uint32) << 16).view(np.float32)


def f32_to_bf16(x: np.ndarray) -> np.ndarray:
    bits = np.ascontiguousarray(x, dtype=np.float32).view(np.uint32)
    # round to nearest even on the dropped 16 bits
    rounding = ((bits >> 16) & 1) + 0x7FFF
    return ((bits + rounding) >> 16).astype(np.uint16)


class TensorArchive:
    """Lazy view over an archive file. Only the header is parsed on open."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        with open(self.path, "rb") as fh:
            raw_len = fh.read(8)
            if len(raw_len) != 8:
                raise ArchiveError(f"{self.path}: truncated header length")
            (n,) = struct.unpack("<Q", raw_len)
            if n > _MAX_HEADER:
                raise ArchiveError(f"{self.path}: header length {n} is implausible")
            header_bytes = fh.read(n)
        if len(header_bytes) != n:
            raise ArchiveError(f"{self.path}: truncated header")
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ArchiveError(f"{self.path}: header is not UTF-8 JSON ({exc})") from exc
        self.data_start = 8 + n
        self.metadata: dict[str, str] = dict(header.pop("__metadata__", None) or {})
        file_size = self.path.stat().st_size
        self._infos: dict[str, TensorInfo] = {}
        for name, entry in header.items():
            dtype = entry.get("dtype")
            if dtype not in _DTYPES:
                raise ArchiveError(f"{name}: unsupported dtype {dtype!r}")
            shape = tuple(int(s) for s in entry["shape"])
            begin, end = (int(v) for v in entry["data_offsets"])
            info = TensorInfo(name, dtype, shape, begin, end)
            if info.count * _DTYPES[dtype].itemsize != info.nbytes:
                raise ArchiveError(f"{name}: byte range does not match shape {shape}")
            if self.data_start + end > file_size:
                raise ArchiveError(f"{name}: byte range runs past end of file")
            self._infos[name] = info

    def __contains__(self, name: str) -> bool:
        return name in self._infos

    def names(self) -> list[str]:
        return sorted(self._infos)

    def info(self, name: str) -> TensorInfo:
        try:
            return self._infos[name]
        except KeyError:
            raise ArchiveError(f"{self.path}: no tensor named {name!r}") from None

    def _read(self, info: TensorInfo, offset_elems: int, count: int) -> np.ndarray:
        dt = _DTYPES[info.dtype]
        arr = np.fromfile(
            self.path,
            dtype=dt,
            count=count,
            offset=self.data_start + info.begin + offset_elems * dt.itemsize,
        )
        if arr.size != count:
            raise ArchiveError(f"{info.name}: short read")
        if info.dtype == "BF16":
            arr = bf16_to_f32(arr)
        return arr

    def read(self, name: str, dtype: np.dtype | type | None = None) -> np.ndarray:
        info = self.info(name)
        arr = self._read(info, 0, info.count).reshape(info.shape)
        if dtype is not None and arr.dtype != np.dtype(dtype):
            arr = arr.astype(dtype)
        return arr

    def read_rows(self, name: str, start: int, stop: int,
                  dtype: np.dtype | type | None = None) -> np.ndarray:
        """Rows ``start:stop`` along axis 0 without touching the rest."""
        info = self.info(name)
        if not info.shape:
            raise ArchiveError(f"{name}: scalar tensor has no rows")
        n_rows = info.shape[0]
        if not 0 <= start <= stop <= n_rows:
            raise ArchiveError(f"{name}: rows {start}:{stop} outside [0, {n_rows}]")
        row = int(np.prod(info.shape[1:], dtype=np.int64))
        arr = self._read(info, start * row, (stop - start) * row)
        arr = arr.reshape((stop - start,) + info.shape[1:])
        if dtype is not None and arr.dtype != np.dtype(dtype):
            arr = arr.astype(dtype)
        return arr


def write_archive(path: str | os.PathLike, tensors: Mapping[str, np.ndarray],
                  metadata: Mapping[str, str] | None = None,
                  bf16: frozenset[str] | set[str] = frozenset()) -> Path:
    """Write ``tensors`` in sorted-name order. Names in ``bf16`` are stored as BF16."""
    path = Path(path)
    header: dict[str, object] = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    blobs: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if name in bf16:
            code, data = "BF16", f32_to_bf16(arr).astype("<u2").tobytes()
        else:
            le = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
            code = _CODES.get(np.dtype(le).str)
            if code is None:
                raise ArchiveError(f"{name}: cannot store dtype {arr.dtype}")
            data = np.ascontiguousarray(arr, dtype=le).tobytes()
        header[name] = {"dtype": code, "shape": list(arr.shape),
                        "data_offsets": [offset, offset + len(data)]}
        blobs.append(data)
        offset += len(data)
    head = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    head += b" " * (-len(head) % 8)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)
    return path
