"""Per-example gradient datasets and the GRDS binary container.

A :class:`GradientDataset` holds one gradient row per example (the
concatenation of per-layer blocks) plus example metadata. GRDS files are a
single-pass little-endian layout::

    "GRDS" | u16 version | u8 dtype | u32 n_layers
    per layer: u32 dim | u8 kind | [u32 in_dim, u32 out_dim if linear] | u16 len + utf-8 name
    u64 n_examples
    per example: u64 id | i32 label | u16 len + utf-8 source | u8 split | u8 flipped | dim * dtype
    u32 crc32 of every preceding byte
"""

from __future__ import annotations

import csv
import io
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    ChecksumMismatch,
    MissingMeta,
    NoValidationExamples,
    NonFiniteEntry,
    TruncatedFile,
    UnsupportedVersion,
    WidthMismatch,
)

MAGIC = b"GRDS"
VERSION = 1
DTYPES = {"f32": (0, np.dtype("<f4")), "f64": (1, np.dtype("<f8"))}
DTYPE_CODES = {code: name for name, (code, _) in DTYPES.items()}
KINDS = {"generic": 0, "linear": 1}
KIND_CODES = {v: k for k, v in KINDS.items()}
SPLITS = ("train", "val")


@dataclass(frozen=True)
class LayerSpec:
    """One parameter block. Linear layers fold the bias into ``in_dim``."""

    name: str
    dim: int
    kind: str = "generic"
    in_dim: int | None = None
    out_dim: int | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"layer {self.name!r} has dim {self.dim} < 1")
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "linear" and (self.in_dim or 0) * (self.out_dim or 0) != self.dim:
            raise ValueError(f"linear layer {self.name!r}: {self.in_dim}x{self.out_dim} != {self.dim}")

    @classmethod
    def linear(cls, name: str, in_dim: int, out_dim: int) -> "LayerSpec":
        return cls(name, in_dim * out_dim, "linear", in_dim, out_dim)


def layer_offsets(layers) -> np.ndarray:
    return np.concatenate([[0], np.cumsum([layer.dim for layer in layers])]).astype(int)


def split_blocks(rows: np.ndarray, layers) -> list[np.ndarray]:
    """Views of the per-layer column blocks of ``rows`` (1-D or 2-D)."""
    off = layer_offsets(layers)
    return [rows[..., off[i]:off[i + 1]] for i in range(len(layers))]


@dataclass
class GradientDataset:
    """Gradient rows for ``n`` examples with aligned metadata arrays.

    ``dtype`` is the storage precision. Rows are always held as float64; for
    ``"f32"`` datasets they are rounded to float32-representable values on
    construction so that in-memory and on-disk pipelines agree exactly.
    """

    layers: list[LayerSpec]
    gradients: np.ndarray
    example_id: np.ndarray
    label: np.ndarray
    source: np.ndarray
    split: np.ndarray
    flipped: np.ndarray
    dtype: str = "f64"

    def __post_init__(self):
        self.layers = list(self.layers)
        d = int(sum(layer.dim for layer in self.layers))
        g = np.asarray(self.gradients, dtype=np.float64)
        if g.ndim == 1 and g.size == 0:
            g = g.reshape(0, d)
        if g.ndim != 2 or g.shape[1] != d:
            raise WidthMismatch(f"gradient rows have shape {g.shape}, layers need width {d}")
        if self.dtype not in DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        if self.dtype == "f32":
            g = g.astype(np.float32).astype(np.float64)
        if not np.all(np.isfinite(g)):
            raise NonFiniteEntry("gradient rows contain non-finite entries")
        n = g.shape[0]
        self.gradients = g
        self.example_id = np.asarray(self.example_id, dtype=np.int64).reshape(n)
        self.label = np.asarray(self.label, dtype=np.int64).reshape(n)
        self.source = np.asarray(self.source, dtype=object).reshape(n)
        self.split = np.asarray(self.split, dtype=object).reshape(n)
        self.flipped = np.asarray(self.flipped, dtype=bool).reshape(n)
        bad = set(self.split.tolist()) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split values {sorted(bad)}")

    @property
    def n_examples(self) -> int:
        return self.gradients.shape[0]

    @property
    def width(self) -> int:
        return self.gradients.shape[1]

    def mask(self, split: str) -> np.ndarray:
        return self.split == split

    def rows(self, split: str) -> np.ndarray:
        return self.gradients[self.mask(split)]

    def ids(self, split: str) -> np.ndarray:
        return self.example_id[self.mask(split)]

    def blocks(self, split: str) -> list[np.ndarray]:
        return split_blocks(self.rows(split), self.layers)

    def astype(self, dtype: str) -> "GradientDataset":
        return self.replace(dtype=dtype)

    def replace(self, **changes) -> "GradientDataset":
        fields = dict(
            layers=self.layers, gradients=self.gradients, example_id=self.example_id,
            label=self.label, source=self.source, split=self.split,
            flipped=self.flipped, dtype=self.dtype,
        )
        fields.update(changes)
        return GradientDataset(**fields)

    def subset(self, index) -> "GradientDataset":
        return self.replace(
            gradients=self.gradients[index], example_id=self.example_id[index],
            label=self.label[index], source=self.source[index],
            split=self.split[index], flipped=self.flipped[index],
        )

    def equals(self, other: "GradientDataset") -> bool:
        """Bit-exact equality of rows, layers and metadata."""
        return (
            self.layers == other.layers
            and self.dtype == other.dtype
            and self.gradients.shape == other.gradients.shape
            and self.gradients.tobytes() == other.gradients.tobytes()
            and np.array_equal(self.example_id, other.example_id)
            and np.array_equal(self.label, other.label)
            and list(self.source) == list(other.source)
            and list(self.split) == list(other.split)
            and np.array_equal(self.flipped, other.flipped)
        )


@dataclass
class QueryVector:
    """The query gradient ``v`` paired with train rows in every influence score."""

    values: np.ndarray
    layers: list[LayerSpec]
    provenance: str = "averaged_validation"

    def blocks(self) -> list[np.ndarray]:
        return split_blocks(self.values, self.layers)


def build_query(ds: GradientDataset) -> QueryVector:
    """Mean of the validation-split gradient rows."""
    val = ds.rows("val")
    if val.shape[0] == 0:
        raise NoValidationExamples("dataset has no validation examples")
    return QueryVector(val.mean(axis=0), ds.layers, "averaged_validation")


# -- GRDS -------------------------------------------------------------------

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string too long for GRDS u16 length prefix")
    return struct.pack("<H", len(raw)) + raw


def encode_grds(ds: GradientDataset, dtype: str | None = None) -> bytes:
    dtype = dtype or ds.dtype
    code, npdt = DTYPES[dtype]
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<HBI", VERSION, code, len(ds.layers)))
    for layer in ds.layers:
        out.write(struct.pack("<IB", layer.dim, KINDS[layer.kind]))
        if layer.kind == "linear":
            out.write(struct.pack("<II", layer.in_dim, layer.out_dim))
        out.write(_pack_str(layer.name))
    out.write(struct.pack("<Q", ds.n_examples))
    payload = ds.gradients.astype(npdt)
    for i in range(ds.n_examples):
        out.write(struct.pack("<Qi", int(ds.example_id[i]), int(ds.label[i])))
        out.write(_pack_str(str(ds.source[i])))
        out.write(struct.pack("<BB", SPLITS.index(ds.split[i]), int(bool(ds.flipped[i]))))
        out.write(payload[i].tobytes())
    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def write_grds(ds: GradientDataset, path, dtype: str | None = None) -> None:
    """Write ``ds`` to ``path``; ``dtype`` defaults to the dataset's storage dtype."""
    data = encode_grds(ds, dtype)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFile(f"need {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def decode_grds(data: bytes) -> GradientDataset:
    if len(data) < 4 and MAGIC.startswith(data):
        raise TruncatedFile("file ends inside the magic bytes")
    if data[:4] != MAGIC:
        raise BadMagic("not a GRDS file")
    r = _Reader(data)
    r.take(4)
    version, code, n_layers = r.unpack("<HBI")
    if version != VERSION:
        raise UnsupportedVersion(f"GRDS version {version} (supported: {VERSION})")
    if code not in DTYPE_CODES:
        raise UnsupportedVersion(f"unknown dtype code {code}")
    dtype = DTYPE_CODES[code]
    npdt = DTYPES[dtype][1]
    layers = []
    for _ in range(n_layers):
        dim, kind_code = r.unpack("<IB")
        kind = KIND_CODES.get(kind_code)
        if kind is None:
            raise UnsupportedVersion(f"unknown layer kind code {kind_code}")
        in_dim = out_dim = None
        if kind == "linear":
            in_dim, out_dim = r.unpack("<II")
        name = r.string()
        try:
            layers.append(LayerSpec(name, dim, kind, in_dim, out_dim))
        except ValueError as exc:
            raise WidthMismatch(str(exc)) from None
    (n,) = r.unpack("<Q")
    d = sum(layer.dim for layer in layers)
    block = d * npdt.itemsize
    ids, labels, sources, splits, flips, rows = [], [], [], [], [], []
    for _ in range(n):
        eid, label = r.unpack("<Qi")
        sources.append(r.string())
        split, flipped = r.unpack("<BB")
        if split >= len(SPLITS):
            raise UnsupportedVersion(f"unknown split code {split}")
        ids.append(eid)
        labels.append(label)
        splits.append(SPLITS[split])
        flips.append(bool(flipped))
        rows.append(np.frombuffer(r.take(block), dtype=npdt))
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(data):
        raise WidthMismatch(f"{len(data) - r.pos} trailing bytes after checksum; declared widths disagree with payload")
    if zlib.crc32(data[:body_end]) != crc:
        raise ChecksumMismatch("CRC32 of payload does not match trailer")
    grads = np.vstack(rows).astype(np.float64) if rows else np.zeros((0, d))
    return GradientDataset(layers, grads, ids, labels, sources, splits, flips, dtype=dtype)


def read_grds(path) -> GradientDataset:
    return decode_grds(Path(path).read_bytes())


# -- CSV ingestion ----------------------------------------------------------

META_COLUMNS = ("example_id", "label", "source", "split", "flipped")


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes"):
        return True
    if t in ("0", "false", "no", ""):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def ingest_csv(gradients_csv, meta_csv, layers, dtype: str = "f64") -> GradientDataset:
    """Build a dataset from ``example_id,g_0..g_{d-1}`` and ``example_id,label,source,split,flipped`` CSVs."""
    layers = list(layers)
    d = sum(layer.dim for layer in layers)
    with open(meta_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(META_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise MissingMeta(f"meta CSV lacks columns {sorted(missing)}")
        meta = {int(row["example_id"]): row for row in reader}
    ids, rows = [], []
    with open(gradients_csv, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "example_id":
            raise WidthMismatch("gradient CSV must start with an example_id column")
        if len(header) - 1 != d:
            raise WidthMismatch(f"gradient CSV has {len(header) - 1} columns, layers need {d}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) - 1 != d:
                raise WidthMismatch(f"line {lineno}: {len(rec) - 1} values, expected {d}")
            values = np.array([float(x) for x in rec[1:]], dtype=np.float64)
            if not np.all(np.isfinite(values)):
                raise NonFiniteEntry(f"line {lineno}: non-finite gradient entry")
            ids.append(int(rec[0]))
            rows.append(values)
    absent = [i for i in ids if i not in meta]
    if absent:
        raise MissingMeta(f"no metadata for example ids {absent[:5]}")
    m = [meta[i] for i in ids]
    return GradientDataset(
        layers,
        np.vstack(rows) if rows else np.zeros((0, d)),
        ids,
        [int(row["label"]) for row in m],
        [row["source"] for row in m],
        [row["split"] for row in m],
        [_parse_bool(row["flipped"]) for row in m],
        dtype=dtype,
    )
