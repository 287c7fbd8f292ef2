"""Append-once, scan-many store of projected per-sample gradients.

File layout (little-endian)::

    magic "LGGS" | version u32
    layer count u32 | per layer {name len u16, name, k_i u32, k_o u32} | precision u8
    records: {data_id u64, payload}  x N
    index:   {data_id u64, offset u64} x N
    record_count u64 | index offset u64

Records are fixed size, so record ``j`` lives at ``header + j * record_bytes``.
While being written the file carries a ``.partial`` suffix; ``finalize``
writes the index and renames it into place.
"""

from __future__ import annotations

import os
import queue
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .binio import Reader, pack_name
from .errors import DimensionError, DuplicateIdError, FormatError, StoreError, UnknownIdError

STORE_MAGIC = b"LGGS"
STORE_VERSION = 1
PRECISIONS = {"float32": 4, "float64": 8}
_PRECISION_NAMES = {v: k for k, v in PRECISIONS.items()}
TRAILER_BYTES = 16
INDEX_ENTRY_BYTES = 16
PARTIAL_SUFFIX = ".partial"


@dataclass(frozen=True)
class StoreSchema:
    layers: tuple[tuple[str, int, int], ...]  # (name, k_i, k_o)
    precision: str = "float32"

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")

    @classmethod
    def from_projections(cls, projections, precision: str = "float32") -> "StoreSchema":
        return cls(tuple((p.layer_name, p.k_in, p.k_out) for p in projections.pairs), precision)

    @property
    def payload_dim(self) -> int:
        return sum(ki * ko for _, ki, ko in self.layers)

    @property
    def dtype(self) -> np.dtype:
        return np.dtype("<f4" if self.precision == "float32" else "<f8")

    @property
    def record_bytes(self) -> int:
        return 8 + self.payload_dim * PRECISIONS[self.precision]

    @property
    def record_dtype(self) -> np.dtype:
        return np.dtype([("data_id", "<u8"), ("payload", self.dtype, (self.payload_dim,))])

    def header_bytes(self) -> bytes:
        parts = [STORE_MAGIC, struct.pack("<II", STORE_VERSION, len(self.layers))]
        for name, ki, ko in self.layers:
            parts.append(pack_name(name) + struct.pack("<II", ki, ko))
        parts.append(struct.pack("<B", PRECISIONS[self.precision]))
        return b"".join(parts)

    def file_size(self, record_count: int) -> int:
        """Exact size of a finalized store holding ``record_count`` records."""
        return (
            len(self.header_bytes())
            + record_count * (self.record_bytes + INDEX_ENTRY_BYTES)
            + TRAILER_BYTES
        )


@dataclass
class GradRecord:
    data_id: int
    payload: np.ndarray
    label: str | None = None


class GradStoreWriter:
    """Single-writer builder; use as a context manager or call ``finalize``."""

    def __init__(self, path, schema: StoreSchema):
        self.path = Path(path)
        self.schema = schema
        self.partial_path = self.path.with_name(self.path.name + PARTIAL_SUFFIX)
        self._ids: list[int] = []
        self._seen: set[int] = set()
        self._header = schema.header_bytes()
        self._closed = False
        try:
            self._fh = open(self.partial_path, "wb")
            self._fh.write(self._header)
        except OSError as exc:
            raise StoreError(f"cannot create {self.partial_path}: {exc}") from exc

    def append(self, data_id: int, payload) -> None:
        self.append_batch([data_id], np.asarray(payload)[None])

    def append_batch(self, data_ids, payloads) -> None:
        if self._closed:
            raise StoreError("store already finalized")
        ids = [int(i) for i in data_ids]
        payloads = np.asarray(payloads)
        if payloads.ndim != 2 or payloads.shape != (len(ids), self.schema.payload_dim):
            raise DimensionError(
                f"payload shape {payloads.shape}, expected ({len(ids)}, {self.schema.payload_dim})"
            )
        for i in ids:
            if i < 0 or i >= 2**64:
                raise ValueError(f"data_id {i} does not fit in u64")
            if i in self._seen:
                raise DuplicateIdError(i)
            self._seen.add(i)
        records = np.empty(len(ids), dtype=self.schema.record_dtype)
        records["data_id"] = ids
        records["payload"] = payloads
        try:
            self._fh.write(records.tobytes())
        except OSError as exc:
            self._fh.close()
            self._closed = True
            raise StoreError(
                f"write failed ({exc}); incomplete store left at {self.partial_path}"
            ) from exc
        self._ids.extend(ids)

    def finalize(self) -> Path:
        if self._closed:
            raise StoreError("store already finalized")
        n = len(self._ids)
        header = len(self._header)
        index = np.empty(n, dtype=[("data_id", "<u8"), ("offset", "<u8")])
        index["data_id"] = self._ids
        index["offset"] = header + np.arange(n, dtype=np.uint64) * self.schema.record_bytes
        index_offset = header + n * self.schema.record_bytes
        try:
            self._fh.write(index.tobytes())
            self._fh.write(struct.pack("<QQ", n, index_offset))
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self._fh.close()
            os.replace(self.partial_path, self.path)
        except OSError as exc:
            raise StoreError(
                f"finalize failed ({exc}); incomplete store left at {self.partial_path}"
            ) from exc
        finally:
            self._closed = True
        return self.path

    def abort(self):
        if not self._closed:
            self._fh.close()
            self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            if not self._closed:
                self.finalize()
        else:
            self.abort()
        return False


def create(path, schema: StoreSchema) -> GradStoreWriter:
    return GradStoreWriter(path, schema)


def _parse_schema(r: Reader) -> StoreSchema:
    magic = r.take(4)
    if magic != STORE_MAGIC:
        raise FormatError(f"bad store magic {magic!r}, expected {STORE_MAGIC!r}")
    version, count = r.unpack("<II")
    if version != STORE_VERSION:
        raise FormatError(f"unsupported store version {version}")
    layers = []
    for _ in range(count):
        name = r.name()
        ki, ko = r.unpack("<II")
        layers.append((name, ki, ko))
    (code,) = r.unpack("<B")
    if code not in _PRECISION_NAMES:
        raise FormatError(f"unknown precision code {code}")
    return StoreSchema(tuple(layers), _PRECISION_NAMES[code])


class GradStore:
    """Read-only, memory-mapped view of a finalized store."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            partial = self.path.with_name(self.path.name + PARTIAL_SUFFIX)
            hint = f" (an unfinished {partial.name} exists)" if partial.exists() else ""
            raise StoreError(f"no store at {self.path}{hint}")
        size = self.path.stat().st_size
        with open(self.path, "rb") as fh:
            head = fh.read(min(size, 1 << 16))
            r = Reader(head, "store header")
            self.schema = _parse_schema(r)
            self.header_size = r.pos
            if size < self.header_size + TRAILER_BYTES:
                raise FormatError(f"truncated store: {size} bytes")
            fh.seek(size - TRAILER_BYTES)
            self.record_count, self.index_offset = struct.unpack("<QQ", fh.read(TRAILER_BYTES))
        expected = self.schema.file_size(self.record_count)
        if size != expected or self.index_offset != self.header_size + self.record_count * self.schema.record_bytes:
            raise FormatError(
                f"corrupt or truncated store: {size} bytes on disk, layout implies {expected}"
            )
        if self.record_count:
            self._records = np.memmap(
                self.path, dtype=self.schema.record_dtype, mode="r",
                offset=self.header_size, shape=(self.record_count,),
            )
        else:
            self._records = np.empty(0, dtype=self.schema.record_dtype)
        self._index: dict[int, int] | None = None

    def __len__(self) -> int:
        return self.record_count

    @property
    def ids(self) -> np.ndarray:
        return np.asarray(self._records["data_id"], dtype=np.uint64)

    def _load_index(self) -> dict[int, int]:
        if self._index is None:
            raw = np.fromfile(
                self.path, dtype=[("data_id", "<u8"), ("offset", "<u8")],
                count=self.record_count, offset=self.index_offset,
            )
            self._index = {
                int(i): (int(off) - self.header_size) // self.schema.record_bytes
                for i, off in zip(raw["data_id"], raw["offset"])
            }
        return self._index

    def get(self, data_id: int) -> GradRecord:
        row = self._load_index().get(int(data_id))
        if row is None:
            raise UnknownIdError(int(data_id))
        rec = self._records[row]
        return GradRecord(int(rec["data_id"]), np.array(rec["payload"]))

    def read_batch(self, start: int, stop: int) -> tuple[np.ndarray, np.ndarray]:
        chunk = self._records[start:stop]
        return (
            np.array(chunk["data_id"], dtype=np.uint64),
            np.array(chunk["payload"], dtype=np.float64),
        )

    def scan(
        self, batch_size: int = 1024, prefetch: bool = True, read_delay: float = 0.0
    ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield ``(ids, float64 payloads)`` batches in append order.

        With ``prefetch`` a background thread loads the next batch while the
        caller works on the current one. ``read_delay`` adds a fixed sleep per
        batch to model slow storage in benchmarks.
        """
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        bounds = [
            (s, min(s + batch_size, self.record_count))
            for s in range(0, self.record_count, batch_size)
        ]

        def load(span):
            if read_delay:
                time.sleep(read_delay)
            return self.read_batch(*span)

        if not prefetch:
            for span in bounds:
                yield load(span)
            return
        yield from _prefetched(load, bounds)


_DONE = object()


def _prefetched(load, items):
    q: queue.Queue = queue.Queue(maxsize=1)
    stop = threading.Event()

    def put(value) -> bool:
        while not stop.is_set():
            try:
                q.put(value, timeout=0.05)
                return True
            except queue.Full:
                continue
        return False

    def worker():
        try:
            for item in items:
                if not put(load(item)):
                    return
            put(_DONE)
        except BaseException as exc:  # forwarded to the consumer
            put(exc)

    thread = threading.Thread(target=worker, name="gradstore-prefetch", daemon=True)
    thread.start()
    try:
        while True:
            item = q.get()
            if item is _DONE:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        thread.join()


def open_store(path) -> GradStore:
    return GradStore(path)


def scan(path, batch_size: int = 1024, prefetch: bool = True):
    return GradStore(path).scan(batch_size, prefetch)


def get(path, data_id: int) -> GradRecord:
    return GradStore(path).get(data_id)


def read_all(path) -> tuple[np.ndarray, np.ndarray]:
    store = GradStore(path)
    return store.read_batch(0, len(store))


def write_store(path, schema: StoreSchema, ids, payloads) -> Path:
    with create(path, schema) as writer:
        writer.append_batch(ids, payloads)
    return Path(path)
