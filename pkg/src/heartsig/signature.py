"""Sparse time-frequency beat signatures.

A 396-sample window around the R peak is transformed with an 80-point
Hann-windowed STFT (hop 4, 80 frames, 41 one-sided bins). Real parts fill
rows 0-40 and imaginary parts rows 41-81 of an 82x82 grid; columns 80-81
stay zero as the padded region. The grid is scaled by its largest magnitude
and all but the 64 largest entries are dropped, leaving < 1% nonzeros.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from heartsig.errors import ConfigError, FormatError
from heartsig.ingest import EcgRecord


@dataclass(frozen=True)
class EncoderConfig:
    segment_len: int = 396
    window_len: int = 80
    hop: int = 4
    k_sparse: int = 64
    grid: int = 82
    window: str = "hann"

    def __post_init__(self):
        if (self.segment_len - self.window_len) % self.hop:
            raise ConfigError("segment_len - window_len must be a multiple of hop")
        if 2 * self.bins > self.grid or self.frames > self.grid:
            raise ConfigError("spectrogram does not fit the grid")
        if self.window not in ("hann", "rect"):
            raise ConfigError(f"unknown window {self.window!r}")

    @property
    def frames(self) -> int:
        return (self.segment_len - self.window_len) // self.hop + 1

    @property
    def bins(self) -> int:
        return self.window_len // 2 + 1

    @property
    def before(self) -> int:
        return self.segment_len // 2

    def taper(self) -> np.ndarray:
        """Analysis window; the periodic Hann peaks at exactly 1 at its centre sample."""
        n = np.arange(self.window_len)
        if self.window == "rect":
            return np.ones(self.window_len)
        return 0.5 - 0.5 * np.cos(2 * np.pi * n / self.window_len)


DEFAULT_ENCODER = EncoderConfig()


@dataclass(frozen=True)
class SparseSignature:
    """Triplet storage of an 82x82 signature; entries are in row-major order."""

    rows: np.ndarray  # uint8
    cols: np.ndarray  # uint8
    values: np.ndarray  # float32
    grid: int = 82
    degenerate: bool = False

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @property
    def flat_index(self) -> np.ndarray:
        return self.rows.astype(np.int64) * self.grid + self.cols.astype(np.int64)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.grid, self.grid), dtype=np.float64)
        out[self.rows, self.cols] = self.values
        return out

    def flatten(self) -> np.ndarray:
        return self.to_dense().ravel()

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseSignature):
            return NotImplemented
        return (self.grid == other.grid and np.array_equal(self.rows, other.rows)
                and np.array_equal(self.cols, other.cols)
                and np.array_equal(self.values, other.values))

    __hash__ = None


def extract_segment(record: EcgRecord, r_peak: int, config: EncoderConfig = DEFAULT_ENCODER,
                    channel: int = 0) -> np.ndarray:
    """Millivolt window of ``segment_len`` samples, ``before`` of them preceding ``r_peak``."""
    mv = record.millivolts(channel)
    return segment_from_signal(mv, r_peak, config)


def segment_from_signal(mv: np.ndarray, r_peak: int, config: EncoderConfig = DEFAULT_ENCODER) -> np.ndarray:
    start = int(r_peak) - config.before
    out = np.zeros(config.segment_len)
    lo, hi = max(start, 0), min(start + config.segment_len, mv.size)
    if lo < hi:
        out[lo - start: hi - start] = mv[lo:hi]
    return out


def stft(segment, config: EncoderConfig = DEFAULT_ENCODER) -> np.ndarray:
    """Complex spectrogram of shape (bins, frames)."""
    seg = np.asarray(segment, dtype=np.float64)
    if seg.shape != (config.segment_len,):
        raise ConfigError(f"segment must have {config.segment_len} samples, got {seg.shape}")
    idx = np.arange(config.frames)[:, None] * config.hop + np.arange(config.window_len)[None, :]
    frames = seg[idx] * config.taper()[None, :]
    return np.fft.rfft(frames, axis=1).T


def encode_signature(spec: np.ndarray, config: EncoderConfig = DEFAULT_ENCODER) -> SparseSignature:
    """Stack real/imaginary blocks, scale by the global max magnitude, keep the top k."""
    if spec.shape != (config.bins, config.frames):
        raise ConfigError(f"spectrogram must be {config.bins}x{config.frames}, got {spec.shape}")
    grid = np.zeros((config.grid, config.grid))
    grid[: config.bins, : config.frames] = spec.real
    grid[config.bins: 2 * config.bins, : config.frames] = spec.imag
    peak = np.abs(grid).max()
    if not np.isfinite(peak):
        raise ConfigError("spectrogram contains non-finite values")
    if peak == 0:
        empty = np.zeros(0, dtype=np.uint8)
        return SparseSignature(empty, empty, np.zeros(0, dtype=np.float32), config.grid, True)
    flat = (grid / peak).ravel()
    mag = np.abs(flat)
    # stable sort keeps row-major order among equal magnitudes
    keep = np.argsort(-mag, kind="stable")[: config.k_sparse]
    keep = np.sort(keep[mag[keep] > 0])
    rows, cols = np.divmod(keep, config.grid)
    return SparseSignature(rows.astype(np.uint8), cols.astype(np.uint8),
                           flat[keep].astype(np.float32), config.grid, False)


def beat_to_signature(record: EcgRecord, r_peak: int, config: EncoderConfig = DEFAULT_ENCODER) -> SparseSignature:
    return encode_signature(stft(extract_segment(record, r_peak, config), config), config)


def encode_beats(mv: np.ndarray, r_peaks: Iterable[int], config: EncoderConfig = DEFAULT_ENCODER) -> list[SparseSignature]:
    """Encode many beats of one millivolt signal."""
    return [encode_signature(stft(segment_from_signal(mv, r, config), config), config) for r in r_peaks]


# -- signature container ------------------------------------------------------------

MAGIC = b"ECGS"
VERSION = 1
UNLABELED = 255
_HEAD = struct.Struct("<4sHHHI")
_BEAT = struct.Struct("<IBH")
_TRIPLET = np.dtype([("row", "u1"), ("col", "u1"), ("value", "<f4")])


@dataclass(frozen=True)
class SignatureEntry:
    record: str
    sample_index: int
    label: int  # fine class id, UNLABELED if unknown
    signature: SparseSignature


def write_signatures(entries: Iterable[SignatureEntry], target: str | Path | BinaryIO, grid: int = 82) -> None:
    entries = list(entries)
    buf = io.BytesIO()
    buf.write(_HEAD.pack(MAGIC, VERSION, grid, grid, len(entries)))
    for e in entries:
        rid = e.record.encode("ascii")
        if len(rid) > 255:
            raise ValueError("record id too long")
        buf.write(struct.pack("<B", len(rid)) + rid)
        s = e.signature
        buf.write(_BEAT.pack(int(e.sample_index), int(e.label), s.nnz))
        trip = np.empty(s.nnz, dtype=_TRIPLET)
        trip["row"], trip["col"], trip["value"] = s.rows, s.cols, s.values
        buf.write(trip.tobytes())
    data = buf.getvalue()
    if isinstance(target, (str, Path)):
        Path(target).write_bytes(data)
    else:
        target.write(data)


def read_signatures(source: str | Path | bytes) -> list[SignatureEntry]:
    data = Path(source).read_bytes() if isinstance(source, (str, Path)) else bytes(source)
    if len(data) < _HEAD.size:
        raise FormatError("signature file truncated")
    magic, version, rows, cols, count = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported signature file version {version}")
    if rows != cols:
        raise FormatError("non-square grid")
    off = _HEAD.size
    out = []
    try:
        for _ in range(count):
            n = data[off]
            rid = data[off + 1: off + 1 + n].decode("ascii")
            off += 1 + n
            sample, label, nnz = _BEAT.unpack_from(data, off)
            off += _BEAT.size
            end = off + nnz * _TRIPLET.itemsize
            if end > len(data):
                raise FormatError("signature file truncated")
            trip = np.frombuffer(data, dtype=_TRIPLET, count=nnz, offset=off)
            off = end
            sig = SparseSignature(trip["row"].copy(), trip["col"].copy(), trip["value"].copy(),
                                  rows, nnz == 0)
            out.append(SignatureEntry(rid, sample, label, sig))
    except (IndexError, struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"signature file truncated or corrupt: {exc}") from exc
    return out
