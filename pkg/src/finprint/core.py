"""Domain types, seeded RNG streams and the on-disk formats shared by every stage.

File formats
------------
FNT1 tensor
    ``b"FNT1"``, little-endian u32 rank, one little-endian u32 per dim, then
    the values as little-endian f64 in row-major order.
boxes CSV
    header ``box_id,frame,x,y,w,h``, one detection per row.
manifest JSONL
    one object per sample: ``sample_id, identity, path, split, augmented_from``.
"""
from __future__ import annotations

import csv
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

TENSOR_MAGIC = b"FNT1"
BOX_COLUMNS = ("box_id", "frame", "x", "y", "w", "h")


class FinprintError(Exception):
    """Base class for domain errors (CLI maps these to exit code 1)."""


class ContractError(FinprintError, ValueError):
    """A documented precondition was violated by the caller."""


class FormatError(FinprintError):
    """A file could not be parsed.  ``line`` is 1-based when known."""

    def __init__(self, message: str, path=None, line: Optional[int] = None):
        self.path = None if path is None else str(path)
        self.line = line
        where = ""
        if self.path is not None:
            where = self.path + (f":{line}" if line is not None else "") + ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class NumericError(FinprintError, FloatingPointError):
    """Non-finite value encountered during a numeric step."""


class FileIOError(FinprintError, OSError):
    def __init__(self, path, reason: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {reason}")


# -- domain types ----------------------------------------------------------

class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass(frozen=True)
class FrameBox:
    box_id: int
    frame: int
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ContractError(f"box {self.box_id}: width and height must be > 0")
        if self.frame < 0:
            raise ContractError(f"box {self.box_id}: frame must be >= 0")


@dataclass(frozen=True, eq=False)
class Sample:
    """One labelled image.  ``pixels`` is an (H, W, C) float64 array in [0, 1]."""

    sample_id: int
    identity: int
    pixels: np.ndarray
    split: Split = Split.TRAIN
    augmented_from: Optional[int] = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3:
            raise ContractError(f"sample {self.sample_id}: pixels must be (H, W, C), got {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ContractError(f"sample {self.sample_id}: pixel values outside [0, 1]")
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "split", Split(self.split))


@dataclass(frozen=True, eq=False)
class Embedding:
    values: np.ndarray
    sample_id: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ContractError("embedding must be a vector")
        if abs(np.linalg.norm(v) - 1.0) > 1e-9:
            raise ContractError(f"embedding {self.sample_id} is not unit norm")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int


# -- RNG -------------------------------------------------------------------

def _stream_key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


@dataclass(frozen=True)
class RngState:
    """A 64-bit seed plus a named sub-stream path.

    ``RngState(7, ("synth",)).child("render", 3)`` names a deeper stream.
    Generators built from equal states yield identical draws everywhere
    (PCG64 seeded through ``SeedSequence``).
    """

    seed: int
    stream: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ContractError("seed must be a 64-bit unsigned integer")
        if isinstance(self.stream, str):
            object.__setattr__(self, "stream", (self.stream,))
        else:
            object.__setattr__(self, "stream", tuple(self.stream))

    def child(self, *parts) -> "RngState":
        return RngState(self.seed, self.stream + tuple(parts))

    def generator(self) -> np.random.Generator:
        lo, hi = int(self.seed) & 0xFFFFFFFF, int(self.seed) >> 32
        entropy = [lo, hi] + [_stream_key(p) for p in self.stream]
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def as_rng(rng) -> np.random.Generator:
    if isinstance(rng, RngState):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    return RngState(int(rng)).generator()


# -- FNT1 tensors ----------------------------------------------------------

def write_tensor(path, dims: Sequence[int], data) -> None:
    dims = [int(d) for d in dims]
    flat = np.ascontiguousarray(np.asarray(data, dtype="<f8").reshape(-1))
    if any(d < 0 for d in dims) or int(np.prod(dims, dtype=np.int64)) != flat.size:
        raise ContractError(f"dims {dims} do not match data length {flat.size}")
    header = TENSOR_MAGIC + struct.pack(f"<{1 + len(dims)}I", len(dims), *dims)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(flat.tobytes())
    except OSError as exc:
        raise FileIOError(path, exc.strerror or str(exc)) from exc


def save_array(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    write_tensor(path, arr.shape, arr)


def decode_tensor(buf: bytes, path="<bytes>") -> np.ndarray:
    if len(buf) < 8 or buf[:4] != TENSOR_MAGIC:
        raise FormatError("not an FNT1 tensor (bad magic)", path)
    (rank,) = struct.unpack_from("<I", buf, 4)
    end = 8 + 4 * rank
    if len(buf) < end:
        raise FormatError("truncated tensor header", path)
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) != end + 8 * count:
        raise FormatError(
            f"payload is {len(buf) - end} bytes, expected {8 * count} for dims {list(dims)}", path
        )
    out = np.frombuffer(buf, dtype="<f8", count=count, offset=end).astype(np.float64)
    return out.reshape(dims)


def read_tensor(path) -> np.ndarray:
    """Read an FNT1 file as a float64 array with its stored shape."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FileIOError(path, exc.strerror or str(exc)) from exc
    return decode_tensor(buf, path)


# -- boxes CSV -------------------------------------------------------------

def _num(text: str, kind, col: str, path, line: int):
    try:
        value = kind(text)
    except (TypeError, ValueError):
        if kind is int:
            # allow "3.0" style integers written by spreadsheets
            try:
                f = float(text)
            except ValueError:
                f = None
            if f is not None and f.is_integer():
                return int(f)
        raise FormatError(f"column {col!r}: expected a number, got {text!r}", path, line)
    if isinstance(value, float) and not np.isfinite(value):
        raise FormatError(f"column {col!r}: non-finite value {text!r}", path, line)
    return value


def read_boxes_csv(path) -> list[FrameBox]:
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise FileIOError(path, exc.strerror or str(exc)) from exc
    boxes: list[FrameBox] = []
    seen: set[int] = set()
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError("empty file, expected header " + ",".join(BOX_COLUMNS), path, 1)
        header = [h.strip() for h in header]
        missing = [c for c in BOX_COLUMNS if c not in header]
        if missing:
            raise FormatError(f"missing column(s) {', '.join(missing)}", path, 1)
        idx = {c: header.index(c) for c in BOX_COLUMNS}
        for line, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise FormatError(f"expected {len(header)} fields, got {len(row)}", path, line)
            box_id = _num(row[idx["box_id"]].strip(), int, "box_id", path, line)
            frame = _num(row[idx["frame"]].strip(), int, "frame", path, line)
            x, y, w, h = (_num(row[idx[c]].strip(), float, c, path, line) for c in "xywh")
            if w <= 0 or h <= 0:
                raise FormatError("box width and height must be > 0", path, line)
            if frame < 0:
                raise FormatError("frame must be >= 0", path, line)
            if box_id in seen:
                raise FormatError(f"duplicate box_id {box_id}", path, line)
            seen.add(box_id)
            boxes.append(FrameBox(box_id, frame, x, y, w, h))
    return boxes


def write_boxes_csv(path, boxes: Iterable[FrameBox]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(BOX_COLUMNS)
        for b in boxes:
            writer.writerow([b.box_id, b.frame, repr(float(b.x)), repr(float(b.y)),
                             repr(float(b.w)), repr(float(b.h))])


# -- manifest JSONL --------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    sample_id: int
    identity: int
    path: str
    split: Split
    augmented_from: Optional[int] = None

    def to_json(self) -> str:
        return json.dumps({
            "sample_id": self.sample_id,
            "identity": self.identity,
            "path": self.path,
            "split": Split(self.split).value,
            "augmented_from": self.augmented_from,
        })


def write_manifest(path, entries: Iterable[ManifestEntry]) -> None:
    with open(path, "w") as fh:
        for e in entries:
            fh.write(e.to_json() + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FileIOError(path, exc.strerror or str(exc)) from exc
    out = []
    for line, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
            out.append(ManifestEntry(
                sample_id=int(obj["sample_id"]),
                identity=int(obj["identity"]),
                path=str(obj["path"]),
                split=Split(obj["split"]),
                augmented_from=None if obj.get("augmented_from") is None else int(obj["augmented_from"]),
            ))
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"bad manifest record: {exc}", path, line) from None
    return out


def load_samples(manifest_path, split: Optional[Split | str] = None) -> list[Sample]:
    """Load manifest entries (optionally one split) with their pixel tensors.

    Relative tensor paths resolve against the manifest's directory.
    """
    root = Path(manifest_path).parent
    want = None if split is None else Split(split)
    samples = []
    for e in read_manifest(manifest_path):
        if want is not None and e.split != want:
            continue
        p = Path(e.path)
        px = read_tensor(p if p.is_absolute() else root / p)
        if px.ndim == 2:
            px = px[:, :, None]
        samples.append(Sample(e.sample_id, e.identity, px, e.split, e.augmented_from))
    return samples


def file_sha256(path) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
