"""Bit-exact binary shard format, manifests, and the ShardSet handle.

Shard layout (all little-endian):

    header:  magic "DFNS" | version u32 = 1 | record_count u32 | d_img u32 | d_txt u32
    record:  id u64 | image f32 * d_img | text f32 * d_txt |
             concept_label u32 (0xFFFFFFFF = unknown) | aligned u8 (0/1/0xFF)

A pool's manifest is JSON lines, one object per shard:
    {"path": "<relative file name>", "record_count": N, "sha256": "<hex>"}
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .records import RecordBatch

MAGIC = b"DFNS"
VERSION = 1
HEADER = struct.Struct("<4sIIII")
MANIFEST_NAME = "manifest.jsonl"
DEFAULT_RECORDS_PER_SHARD = 25_000


class ShardError(Exception):
    """Base class for shard file problems; always names the offending file."""

    def __init__(self, path: Path | str, message: str):
        self.path = Path(path)
        super().__init__(f"{path}: {message}")


class BadMagicError(ShardError):
    pass


class ShardVersionError(ShardError):
    pass


class TruncatedShardError(ShardError):
    pass


class DimensionMismatchError(ShardError):
    pass


def record_nbytes(d_img: int, d_txt: int) -> int:
    return 8 + 4 * d_img + 4 * d_txt + 4 + 1


def pack_body(batch: RecordBatch) -> bytes:
    """Canonical record-stream encoding of a batch (no header)."""
    n = len(batch)
    d_img, d_txt = batch.d_img, batch.d_txt
    size = record_nbytes(d_img, d_txt)
    if n == 0:
        return b""
    buf = np.empty((n, size), dtype=np.uint8)
    off = 0
    buf[:, off:off + 8] = batch.ids.astype("<u8").view(np.uint8).reshape(n, 8)
    off += 8
    buf[:, off:off + 4 * d_img] = batch.image.astype("<f4").view(np.uint8).reshape(n, -1)
    off += 4 * d_img
    buf[:, off:off + 4 * d_txt] = batch.text.astype("<f4").view(np.uint8).reshape(n, -1)
    off += 4 * d_txt
    buf[:, off:off + 4] = batch.labels.astype("<u4").view(np.uint8).reshape(n, 4)
    off += 4
    buf[:, off] = batch.aligned
    return buf.tobytes()


def pack_shard(batch: RecordBatch) -> bytes:
    header = HEADER.pack(MAGIC, VERSION, len(batch), batch.d_img, batch.d_txt)
    return header + pack_body(batch)


def unpack_body(body: bytes, n: int, d_img: int, d_txt: int) -> RecordBatch:
    size = record_nbytes(d_img, d_txt)
    raw = np.frombuffer(body, dtype=np.uint8).reshape(n, size)
    off = 0
    ids = raw[:, off:off + 8].copy().view("<u8").reshape(n)
    off += 8
    image = raw[:, off:off + 4 * d_img].copy().view("<f4").reshape(n, d_img)
    off += 4 * d_img
    text = raw[:, off:off + 4 * d_txt].copy().view("<f4").reshape(n, d_txt)
    off += 4 * d_txt
    labels = raw[:, off:off + 4].copy().view("<u4").reshape(n)
    off += 4
    aligned = raw[:, off].copy()
    return RecordBatch(ids=ids, image=image, text=text, labels=labels, aligned=aligned)


def write_shard(batch: RecordBatch, path: Path | str) -> str:
    """Write one shard file; returns its sha256 hex digest."""
    path = Path(path)
    data = pack_shard(batch)
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_shard(path: Path | str, expect_dims: tuple[int, int] | None = None) -> RecordBatch:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < HEADER.size:
        raise TruncatedShardError(path, f"file too short for header ({len(data)} bytes)")
    magic, version, count, d_img, d_txt = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(path, f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ShardVersionError(path, f"unsupported version {version}, expected {VERSION}")
    if expect_dims is not None and (d_img, d_txt) != expect_dims:
        raise DimensionMismatchError(
            path, f"dimensions ({d_img},{d_txt}) do not match expected {expect_dims}"
        )
    expected = HEADER.size + count * record_nbytes(d_img, d_txt)
    if len(data) != expected:
        raise TruncatedShardError(
            path, f"expected {expected} bytes for {count} records, found {len(data)}"
        )
    return unpack_body(data[HEADER.size:], count, d_img, d_txt)


@dataclass(frozen=True)
class ShardInfo:
    path: Path
    record_count: int
    sha256: str


@dataclass
class ShardSet:
    """Ordered collection of shard files; the unit of parallel filtering."""

    shards: list[ShardInfo]
    d_img: int
    d_txt: int

    @property
    def total_records(self) -> int:
        return sum(s.record_count for s in self.shards)

    @property
    def paths(self) -> list[Path]:
        return [s.path for s in self.shards]

    def iter_batches(self) -> Iterator[RecordBatch]:
        for info in self.shards:
            yield read_shard(info.path, expect_dims=(self.d_img, self.d_txt))

    def load(self) -> RecordBatch:
        from .records import concat_batches

        return concat_batches(list(self.iter_batches()))

    def content_digest(self) -> str:
        """sha256 over the concatenated record streams, independent of sharding."""
        h = hashlib.sha256()
        for info in self.shards:
            h.update(Path(info.path).read_bytes()[HEADER.size:])
        return h.hexdigest()

    def ids(self) -> np.ndarray:
        return np.concatenate([b.ids for b in self.iter_batches()])


def write_shards(
    batch: RecordBatch,
    out_dir: Path | str,
    records_per_shard: int = DEFAULT_RECORDS_PER_SHARD,
    prefix: str = "shard",
) -> ShardSet:
    """Split a pool into shard files plus a manifest; boundaries never split a record."""
    if records_per_shard < 1:
        raise ValueError("records_per_shard must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    infos: list[ShardInfo] = []
    n = len(batch)
    count = max(1, -(-n // records_per_shard))  # one (empty) shard for an empty pool
    for j in range(count):
        part = batch.take(np.arange(j * records_per_shard, min((j + 1) * records_per_shard, n)))
        path = out_dir / f"{prefix}-{j:05d}.dfns"
        sha = write_shard(part, path)
        infos.append(ShardInfo(path=path, record_count=len(part), sha256=sha))
    pool = ShardSet(shards=infos, d_img=batch.d_img, d_txt=batch.d_txt)
    write_manifest(pool, out_dir / MANIFEST_NAME)
    return pool


def write_manifest(pool: ShardSet, path: Path | str) -> None:
    path = Path(path)
    lines = []
    for info in pool.shards:
        rel = Path(info.path).name
        lines.append(json.dumps(
            {"path": rel, "record_count": info.record_count, "sha256": info.sha256},
            sort_keys=True,
        ))
    path.write_text("\n".join(lines) + "\n")


def read_shards(paths: list[Path | str]) -> ShardSet:
    """Build a ShardSet from shard files, validating headers and hashing content."""
    if not paths:
        raise ValueError("read_shards needs at least one path")
    infos: list[ShardInfo] = []
    dims: tuple[int, int] | None = None
    for p in paths:
        p = Path(p)
        data = p.read_bytes()
        if len(data) < HEADER.size:
            raise TruncatedShardError(p, "file too short for header")
        magic, version, count, d_img, d_txt = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise BadMagicError(p, f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise ShardVersionError(p, f"unsupported version {version}, expected {VERSION}")
        if dims is None:
            dims = (d_img, d_txt)
        elif dims != (d_img, d_txt):
            raise DimensionMismatchError(
                p, f"dimensions ({d_img},{d_txt}) differ from first shard {dims}"
            )
        expected = HEADER.size + count * record_nbytes(d_img, d_txt)
        if len(data) != expected:
            raise TruncatedShardError(p, f"expected {expected} bytes, found {len(data)}")
        infos.append(ShardInfo(path=p, record_count=count, sha256=hashlib.sha256(data).hexdigest()))
    assert dims is not None
    return ShardSet(shards=infos, d_img=dims[0], d_txt=dims[1])


def read_manifest(manifest_path: Path | str) -> ShardSet:
    """Load a ShardSet from its manifest; shard paths resolve next to the manifest."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    base = manifest_path.parent
    paths = []
    for line in manifest_path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        entry = json.loads(line)
        paths.append(base / entry["path"])
    pool = read_shards(paths)
    # Manifest digests double as a corruption check.
    for info, line in zip(pool.shards, manifest_path.read_text().splitlines()):
        entry = json.loads(line)
        if entry["sha256"] != info.sha256:
            raise ShardError(info.path, "sha256 does not match manifest entry")
        if entry["record_count"] != info.record_count:
            raise ShardError(info.path, "record_count does not match manifest entry")
    return pool


def batch_digest(batch: RecordBatch) -> str:
    """Same digest as ShardSet.content_digest for an in-memory pool."""
    return hashlib.sha256(pack_body(batch)).hexdigest()
