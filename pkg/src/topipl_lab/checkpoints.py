"""Checkpoint files, the validation-ranked top-N registry, averaging and EMA.

File layout (all integers little-endian)::

    magic    8 bytes  b"TPLCKPT\\0"
    version  u32      1
    hlen     u32      length of the JSON header
    header   hlen     UTF-8 JSON: metadata + ordered tensor table
    payload           float64 LE tensors, in table order
    crc32    u32      over header + payload
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from topipl_lab.model import TENSOR_NAMES, ModelParams, ShapeError

MAGIC = b"TPLCKPT\0"
VERSION = 1
STAGES = ("baseline", "first_stage", "teacher_stage")


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointRecord:
    params: ModelParams
    epoch: int
    val_wer: float
    stage: str = "baseline"
    path: Path | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.val_wer < 0:
            raise ValueError("val_wer must be >= 0")
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")

    @property
    def rank_key(self) -> tuple:
        # lower WER first; on ties the more recent epoch wins
        return (self.val_wer, -self.epoch)


def to_bytes(rec: CheckpointRecord) -> bytes:
    p = rec.params
    table, chunks, offset = [], [], 0
    for name, t in p.named_tensors():
        data = np.ascontiguousarray(t, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "epoch": rec.epoch,
        "val_wer": rec.val_wer,
        "stage": rec.stage,
        "context": p.context,
        "feat_dim": p.feat_dim,
        "hidden": p.hidden,
        "meta": rec.meta,
        "tensors": table,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(chunks)
    crc = zlib.crc32(hbytes + payload)
    return MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + payload + struct.pack("<I", crc)


def from_bytes(blob: bytes, source: str = "<bytes>") -> CheckpointRecord:
    fixed = len(MAGIC) + 8
    if len(blob) < fixed + 4 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file (bad magic or too short)")
    version, hlen = struct.unpack("<II", blob[len(MAGIC) : fixed])
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported version {version}")
    if len(blob) < fixed + hlen + 4:
        raise CheckpointError(f"{source}: truncated header")
    hbytes = blob[fixed : fixed + hlen]
    try:
        header = json.loads(hbytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt header: {exc}") from exc
    table = header["tensors"]
    payload_len = sum(t["nbytes"] for t in table)
    body_end = fixed + hlen + payload_len
    if len(blob) != body_end + 4:
        raise CheckpointError(
            f"{source}: size mismatch, expected {body_end + 4} bytes, got {len(blob)} (truncated?)"
        )
    payload = blob[fixed + hlen : body_end]
    (crc,) = struct.unpack("<I", blob[body_end:])
    if zlib.crc32(hbytes + payload) != crc:
        raise CheckpointError(f"{source}: checksum mismatch")
    if [t["name"] for t in table] != list(TENSOR_NAMES):
        raise CheckpointError(f"{source}: unexpected tensor table {[t['name'] for t in table]}")

    tensors = []
    for t in table:
        n = int(np.prod(t["shape"], dtype=np.int64)) if t["shape"] else 1
        if t["nbytes"] != 8 * n:
            raise CheckpointError(f"{source}: tensor {t['name']} byte count disagrees with its shape")
        raw = payload[t["offset"] : t["offset"] + t["nbytes"]]
        tensors.append(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(t["shape"]))
    try:
        params = ModelParams(*tensors, header["context"], header["feat_dim"], header["hidden"])
    except ShapeError as exc:
        raise CheckpointError(f"{source}: shape mismatch vs header: {exc}") from exc
    return CheckpointRecord(
        params=params,
        epoch=header["epoch"],
        val_wer=header["val_wer"],
        stage=header["stage"],
        meta=header.get("meta", {}),
    )


def save(rec: CheckpointRecord, path) -> Path:
    """Write ``rec`` to ``path`` (a directory gets an ``epoch-N.ckpt`` file name)."""
    path = Path(path)
    if path.is_dir():
        path = path / f"{rec.stage}-epoch{rec.epoch:04d}.ckpt"
    path.write_bytes(to_bytes(rec))
    rec.path = path
    return path


def load(path) -> CheckpointRecord:
    path = Path(path)
    rec = from_bytes(path.read_bytes(), str(path))
    rec.path = path
    return rec


class TopNRegistry:
    """The ``capacity`` best checkpoints by validation WER, best first."""

    def __init__(self, capacity: int = 3):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.records: list[CheckpointRecord] = []

    def __len__(self):
        return len(self.records)

    def offer(self, rec: CheckpointRecord) -> bool:
        """Insert ``rec`` if it ranks among the best; returns whether it was kept."""
        if len(self.records) >= self.capacity and not rec.rank_key < self.records[-1].rank_key:
            return False
        self.records.append(rec)
        self.records.sort(key=lambda r: r.rank_key)
        while len(self.records) > self.capacity:
            evicted = self.records.pop()
            if evicted.path is not None and Path(evicted.path).exists():
                Path(evicted.path).unlink()
        return True

    def clear(self) -> None:
        self.records = []

    def params(self) -> list[ModelParams]:
        return [r.params for r in self.records]


def average(items) -> ModelParams:
    """Elementwise mean of checkpoints (records or bare params).

    Computed as ``first + sum(x_i - first) / k`` in the given order, so
    copies of one checkpoint average to it bit-for-bit.
    """
    params = [r.params if isinstance(r, CheckpointRecord) else r for r in items]
    if not params:
        raise ValueError("cannot average an empty list of checkpoints")
    first = params[0]
    for p in params[1:]:
        if not first.same_shape(p):
            raise ShapeError("cannot average checkpoints with different shapes")
    deltas = [np.zeros_like(t) for t in first.tensors()]
    for p in params[1:]:
        for acc, t, t0 in zip(deltas, p.tensors(), first.tensors()):
            acc += t - t0
    k = float(len(params))
    return first.with_tensors([t0 + d / k for t0, d in zip(first.tensors(), deltas)])


def ema_update(teacher: ModelParams, student: ModelParams, alpha: float) -> ModelParams:
    """alpha * teacher + (1 - alpha) * student."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    if not teacher.same_shape(student):
        raise ShapeError("teacher and student shapes differ")
    return teacher.with_tensors(
        [alpha * t + (1.0 - alpha) * s for t, s in zip(teacher.tensors(), student.tensors())]
    )
