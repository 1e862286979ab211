"""Training-pair generation and binary persistence.

Everything on disk uses one container format: magic ``LOFT``, version,
dtype code, rank, dims, a small UTF-8 key/value metadata map, then the
little-endian payload.  Files are sequences of named containers, which
covers datasets (phases + speckles + per-pair normalization maxima),
transmission matrices, and model checkpoints with a single reader.

Layout of one named container::

    name_len: u32        name: UTF-8 bytes
    magic:    4 bytes    b"LOFT"
    version:  u32        currently 1
    dtype:    u32        1=f32  2=f64  3=c64  4=c128
    rank:     u32
    dims:     rank x u64
    n_meta:   u32        then per entry: key_len u32, key, val_len u32, val
    payload:  prod(dims) x element_size bytes (complex = interleaved re/im)

All integers little-endian.  Round trips are bit-exact.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core_sim import (
    PhasePattern,
    SpecklePattern,
    TransmissionMatrix,
    fields_from_phases,
    quantize_phases,
)
from .rng import make_rng

MAGIC = b"LOFT"
FORMAT_VERSION = 1

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<c8"), 4: np.dtype("<c16")}
_CODE_FOR_KIND = {("f", 4): 1, ("f", 8): 2, ("c", 8): 3, ("c", 16): 4}


class ContainerFormatError(ValueError):
    """Malformed container header; carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ContainerTruncationError(ValueError):
    """Payload shorter than the header promises."""


def _write_container(buf, name: str, array: np.ndarray, meta: dict[str, str] | None = None):
    arr = np.ascontiguousarray(array)
    code = _CODE_FOR_KIND.get((arr.dtype.kind, arr.dtype.itemsize))
    if code is None:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    name_b = name.encode("utf-8")
    buf.write(struct.pack("<I", len(name_b)))
    buf.write(name_b)
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, code))
    buf.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<Q", d))
    meta = meta or {}
    buf.write(struct.pack("<I", len(meta)))
    for k, v in meta.items():
        kb, vb = k.encode("utf-8"), v.encode("utf-8")
        buf.write(struct.pack("<I", len(kb)))
        buf.write(kb)
        buf.write(struct.pack("<I", len(vb)))
        buf.write(vb)
    buf.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_exact(buf, n: int, what: str) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise ContainerTruncationError(
            f"file ends inside {what}: wanted {n} bytes, got {len(data)}"
        )
    return data


def _read_container(buf) -> tuple[str, np.ndarray, dict[str, str]]:
    start = buf.tell()
    (name_len,) = struct.unpack("<I", _read_exact(buf, 4, "name length"))
    name = _read_exact(buf, name_len, "name").decode("utf-8")
    magic_at = buf.tell()
    magic = _read_exact(buf, 4, "magic")
    if magic != MAGIC:
        raise ContainerFormatError(
            f"bad magic {magic!r}, expected {MAGIC!r}", offset=magic_at
        )
    version, code = struct.unpack("<II", _read_exact(buf, 8, "version/dtype"))
    if version != FORMAT_VERSION:
        raise ContainerFormatError(f"unsupported version {version}", offset=magic_at + 4)
    if code not in _DTYPE_CODES:
        raise ContainerFormatError(f"unknown dtype code {code}", offset=magic_at + 8)
    (rank,) = struct.unpack("<I", _read_exact(buf, 4, "rank"))
    dims = struct.unpack(f"<{rank}Q", _read_exact(buf, 8 * rank, "dims")) if rank else ()
    (n_meta,) = struct.unpack("<I", _read_exact(buf, 4, "metadata count"))
    meta = {}
    for _ in range(n_meta):
        (klen,) = struct.unpack("<I", _read_exact(buf, 4, "metadata key length"))
        k = _read_exact(buf, klen, "metadata key").decode("utf-8")
        (vlen,) = struct.unpack("<I", _read_exact(buf, 4, "metadata value length"))
        meta[k] = _read_exact(buf, vlen, "metadata value").decode("utf-8")
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = _read_exact(buf, count * dtype.itemsize, "payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    del start
    return name, arr, meta


def save_named_tensors(path, items: dict[str, tuple[np.ndarray, dict[str, str]]]):
    """Write an ordered name -> (array, metadata) map as a container file."""
    with open(path, "wb") as f:
        for name, (arr, meta) in items.items():
            _write_container(f, name, arr, meta)


def load_named_tensors(path) -> dict[str, tuple[np.ndarray, dict[str, str]]]:
    """Read back a container file; insertion order matches the file."""
    out: dict[str, tuple[np.ndarray, dict[str, str]]] = {}
    with open(path, "rb") as f:
        end = f.seek(0, 2)
        f.seek(0)
        while f.tell() < end:
            name, arr, meta = _read_container(f)
            out[name] = (arr, meta)
    return out


@dataclass(frozen=True)
class PairDataset:
    """Paired phase/speckle stacks produced by one transmission matrix.

    phases:   (n, P, P) values in [0, 1]
    speckles: (n, S, S) per-pattern max-normalized intensities in [0, 1]
    norm_max: (n,) the pre-normalization peak of each speckle
    """

    phases: np.ndarray
    speckles: np.ndarray
    norm_max: np.ndarray
    tm_seed: int
    levels: int | None

    def __post_init__(self):
        if len(self.phases) != len(self.speckles) or len(self.phases) != len(self.norm_max):
            raise ValueError("phases, speckles and norm_max must pair up 1:1")
        for name, block in (("phases", self.phases), ("speckles", self.speckles)):
            if block.min() < 0.0 or block.max() > 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.phases)


def gen_dataset(
    tm: TransmissionMatrix,
    n_pairs: int,
    seed: int,
    quantize_levels: int | None = 32,
) -> PairDataset:
    """Draw random phase patterns and their speckles through `tm`.

    Phases are i.i.d. uniform on [0, 1] per element (snapped to the
    k/levels grid when quantization is on); speckles are computed
    through the matrix and max-normalized per pattern, with the peaks
    retained so absolute intensities stay recoverable.
    """
    if n_pairs < 1:
        raise ValueError(f"n_pairs must be positive, got {n_pairs}")
    if quantize_levels is not None and quantize_levels < 2:
        raise ValueError(f"quantize_levels must be >= 2, got {quantize_levels}")
    n, m = tm.n_inputs, tm.n_outputs
    p_side, s_side = math.isqrt(n), math.isqrt(m)
    if p_side * p_side != n or s_side * s_side != m:
        raise ValueError(
            f"dataset generation needs square grids, got {n} and {m} modes"
        )
    rng = make_rng(seed)
    phases = rng.uniform(0.0, 1.0, size=(n_pairs, n))
    if quantize_levels is not None:
        phases = quantize_phases(phases, quantize_levels)
    # propagate in blocks so paper-scale runs stay within memory
    speckles = np.empty((n_pairs, m))
    peaks = np.empty(n_pairs)
    block = max(1, min(n_pairs, 2**24 // max(m, 1)))
    for lo in range(0, n_pairs, block):
        hi = min(lo + block, n_pairs)
        inten = np.abs(fields_from_phases(tm.entries, phases[lo:hi])) ** 2
        pk = inten.max(axis=1)
        peaks[lo:hi] = pk
        speckles[lo:hi] = inten / np.where(pk > 0.0, pk, 1.0)[:, None]
    return PairDataset(
        phases=phases.reshape(n_pairs, p_side, p_side),
        speckles=speckles.reshape(n_pairs, s_side, s_side),
        norm_max=peaks,
        tm_seed=tm.seed if tm.seed is not None else 0,
        levels=quantize_levels,
    )


def save_dataset(ds: PairDataset, path):
    meta = {"tm_seed": str(ds.tm_seed), "levels": "none" if ds.levels is None else str(ds.levels)}
    save_named_tensors(
        path,
        {
            "phases": (ds.phases.astype("<f8"), meta),
            "speckles": (ds.speckles.astype("<f8"), {}),
            "norm_max": (ds.norm_max.astype("<f8"), {}),
        },
    )


def load_dataset(path) -> PairDataset:
    blocks = load_named_tensors(path)
    try:
        phases, meta = blocks["phases"]
        speckles, _ = blocks["speckles"]
        norm_max, _ = blocks["norm_max"]
    except KeyError as e:
        raise ContainerFormatError(f"dataset file missing block {e}", offset=0) from None
    levels = None if meta.get("levels") == "none" else int(meta["levels"])
    return PairDataset(
        phases=phases,
        speckles=speckles,
        norm_max=norm_max,
        tm_seed=int(meta["tm_seed"]),
        levels=levels,
    )


def save_tm(tm: TransmissionMatrix, path):
    meta = {"seed": "none" if tm.seed is None else str(tm.seed)}
    save_named_tensors(path, {"tm": (tm.entries.astype("<c16"), meta)})


def load_tm(path) -> TransmissionMatrix:
    blocks = load_named_tensors(path)
    if "tm" not in blocks:
        raise ContainerFormatError("no transmission matrix block in file", offset=0)
    entries, meta = blocks["tm"]
    seed = None if meta.get("seed") in (None, "none") else int(meta["seed"])
    return TransmissionMatrix(entries=entries, seed=seed)


def export_image(grid, path):
    """Write a [0, 1] grid as an 8-bit grayscale PGM; v maps to round(255 v).

    Rounding is half-up, so 0.5 becomes pixel 128.
    """
    if isinstance(grid, (SpecklePattern, PhasePattern)):
        values = grid.values
    else:
        values = np.asarray(grid, dtype=np.float64)
    if values.ndim == 1:
        values = values.reshape(1, -1)
    if values.ndim != 2:
        raise ValueError(f"expected a 2-D grid, got shape {values.shape}")
    if values.min() < 0.0 or values.max() > 1.0:
        raise ValueError("image export needs values in [0, 1]")
    pixels = np.floor(values * 255.0 + 0.5).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def verify_pairing(ds: PairDataset, tm: TransmissionMatrix, rtol: float = 1e-12) -> bool:
    """Recompute every speckle from its phase and compare."""
    fields = fields_from_phases(tm.entries, ds.phases.reshape(len(ds), -1))
    inten = np.abs(fields) ** 2
    peaks = inten.max(axis=1)
    safe = np.where(peaks > 0.0, peaks, 1.0)
    recomputed = (inten / safe[:, None]).reshape(ds.speckles.shape)
    return bool(
        np.allclose(recomputed, ds.speckles, rtol=rtol, atol=1e-15)
        and np.allclose(peaks, ds.norm_max, rtol=rtol, atol=1e-15)
    )
