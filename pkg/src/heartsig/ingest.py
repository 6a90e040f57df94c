"""Reading MIT-BIH Arrhythmia Database records.

Covers the three files that make up a record: the text header (``.hea``),
the format-212 signal file (``.dat``) and the MIT annotation file (``.atr``).
Only format 212 is supported, which is what every MIT-BIH record uses.
"""

from __future__ import annotations

import logging
import os
import re
import shutil
import tempfile
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from heartsig.errors import FetchError, ParseError, UnsupportedFormat

log = logging.getLogger(__name__)

DEFAULT_GAIN = 200.0
DEFAULT_ADC_ZERO = 1024
DEFAULT_BASE_URL = "https://physionet.org/files/mitdb/1.0.0"

# MIT annotation codes (ecgcodes.h) -> symbol.
CODE_TO_SYMBOL = {
    0: "", 1: "N", 2: "L", 3: "R", 4: "a", 5: "V", 6: "F", 7: "J", 8: "A",
    9: "S", 10: "E", 11: "j", 12: "/", 13: "Q", 14: "~", 16: "|", 18: "s",
    19: "T", 20: "*", 21: "D", 22: '"', 23: "=", 24: "p", 25: "B", 26: "^",
    27: "t", 28: "+", 29: "u", 30: "?", 31: "!", 32: "[", 33: "]", 34: "e",
    35: "n", 36: "@", 37: "x", 38: "f", 39: "(", 40: ")", 41: "r",
}
SYMBOL_TO_CODE = {s: c for c, s in CODE_TO_SYMBOL.items() if s}

# Codes for which WFDB's isqrs() is true.
BEAT_CODES = frozenset({1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 25, 30, 34, 35, 38, 41})
BEAT_SYMBOLS = frozenset(CODE_TO_SYMBOL[c] for c in BEAT_CODES)

AAMI_CLASSES = ("normal", "supraventricular", "ventricular", "fusion", "unclassified")
AAMI_MAP = {
    "N": "normal", "L": "normal", "R": "normal", "e": "normal", "j": "normal",
    "A": "supraventricular", "a": "supraventricular", "J": "supraventricular",
    "S": "supraventricular",
    "V": "ventricular", "E": "ventricular",
    "F": "fusion",
    "/": "unclassified", "f": "unclassified", "Q": "unclassified",
    # beat codes that never occur in MIT-BIH but are valid WFDB beats
    "B": "normal", "n": "supraventricular", "r": "ventricular", "?": "unclassified",
}

# Fine-grained label space: 23 output slots. Ordered by frequency in the
# database; the last four slots are never produced by a beat annotation.
RESERVED_SYMBOL = "-"
FINE_CLASSES = (
    "N", "L", "R", "V", "/", "A", "f", "F", "j", "a", "E", "J", "Q", "e", "S",
    "B", "r", "n", "?",
) + (RESERVED_SYMBOL,) * 4
FINE_INDEX = {s: i for i, s in enumerate(FINE_CLASSES) if s != RESERVED_SYMBOL}
NORMAL_SYMBOL = "N"

_SKIP, _NUM, _SUB, _CHN, _AUX = 59, 60, 61, 62, 63


@dataclass(frozen=True)
class SignalSpec:
    file_name: str
    format_code: int
    gain: float
    baseline: int
    units: str
    adc_resolution: int
    adc_zero: int
    initial_value: int | None
    checksum: int | None
    lead_name: str


@dataclass(frozen=True)
class RecordHeader:
    record_name: str
    n_signals: int
    sampling_rate: int
    n_samples: int
    signals: tuple[SignalSpec, ...]
    comments: tuple[str, ...] = ()


@dataclass
class EcgRecord:
    """Decoded record. ``channels`` has shape ``(n_signals, n_samples)`` in adu."""

    header: RecordHeader
    channels: np.ndarray

    @property
    def name(self) -> str:
        return self.header.record_name

    @property
    def fs(self) -> int:
        return self.header.sampling_rate

    def __len__(self) -> int:
        return self.channels.shape[1]

    def millivolts(self, channel: int = 0) -> np.ndarray:
        spec = self.header.signals[channel]
        return (np.asarray(self.channels[channel], dtype=np.float64) - spec.baseline) / spec.gain


@dataclass(frozen=True)
class BeatAnnotation:
    sample_index: int
    symbol: str
    aami_class: str | None = field(default=None)

    @classmethod
    def from_symbol(cls, sample_index: int, symbol: str) -> "BeatAnnotation":
        return cls(int(sample_index), symbol, AAMI_MAP.get(symbol))


def aami_index(symbol: str) -> int:
    """Index of the AAMI class for a beat symbol (unknown beats -> unclassified)."""
    return AAMI_CLASSES.index(AAMI_MAP.get(symbol, "unclassified"))


def fine_to_aami_table() -> np.ndarray:
    """Lookup array mapping each fine class id to its AAMI class id."""
    return np.array(
        [aami_index(s) if s != RESERVED_SYMBOL else AAMI_CLASSES.index("unclassified")
         for s in FINE_CLASSES],
        dtype=np.int64,
    )


# -- header -----------------------------------------------------------------

_GAIN_RE = re.compile(r"^([-+0-9.eE]+)(?:\(([-+]?\d+)\))?(?:/(\S+))?$")
_FORMAT_RE = re.compile(r"^(\d+)(?:x\d+)?(?::\d+)?(?:\+\d+)?$")


def _int(token: str, what: str, line: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise ParseError(f"non-numeric {what} {token!r}", line) from None


def parse_header(text: str) -> RecordHeader:
    """Parse the contents of a WFDB ``.hea`` file.

    Missing gain falls back to 200 adu/mV and missing ADC zero to 1024, the
    values MIT-BIH headers use. Baseline defaults to the ADC zero.
    """
    lines = [(i + 1, ln.strip()) for i, ln in enumerate(text.splitlines())]
    comments = tuple(ln[1:].strip() for _, ln in lines if ln.startswith("#"))
    body = [(i, ln) for i, ln in lines if ln and not ln.startswith("#")]
    if not body:
        raise ParseError("empty header")

    lineno, first = body[0]
    tokens = first.split()
    if len(tokens) < 4:
        raise ParseError(f"record line needs NAME NSIG FS NSAMP, got {first!r}", lineno)
    name = tokens[0].split("/")[0]
    n_signals = _int(tokens[1], "signal count", lineno)
    fs_token = tokens[2].split("/")[0].split("(")[0]
    try:
        fs_value = float(fs_token)
    except ValueError:
        raise ParseError(f"non-numeric sampling frequency {tokens[2]!r}", lineno) from None
    if fs_value <= 0 or fs_value != int(fs_value):
        raise ParseError(f"sampling frequency must be a positive integer, got {tokens[2]!r}", lineno)
    n_samples = _int(tokens[3], "sample count", lineno)
    if n_signals < 1:
        raise ParseError("record must have at least one signal", lineno)
    if n_samples < 0:
        raise ParseError("negative sample count", lineno)

    signal_lines = body[1:]
    if len(signal_lines) < n_signals:
        raise ParseError(f"expected {n_signals} signal lines, found {len(signal_lines)}", lineno)
    signals = tuple(_parse_signal_line(ln, i) for i, ln in signal_lines[:n_signals])
    return RecordHeader(name, n_signals, int(fs_value), n_samples, signals, comments)


def _parse_signal_line(line: str, lineno: int) -> SignalSpec:
    tokens = line.split()
    if len(tokens) < 2:
        raise ParseError(f"signal line needs FILE FORMAT, got {line!r}", lineno)
    m = _FORMAT_RE.match(tokens[1])
    if not m:
        raise ParseError(f"bad format field {tokens[1]!r}", lineno)
    fmt = int(m.group(1))
    if fmt != 212:
        raise UnsupportedFormat(f"line {lineno}: format {fmt} (only 212 is supported)")

    gain, baseline, units = DEFAULT_GAIN, None, "mV"
    if len(tokens) > 2:
        g = _GAIN_RE.match(tokens[2])
        if not g:
            raise ParseError(f"bad gain field {tokens[2]!r}", lineno)
        gain = float(g.group(1)) or DEFAULT_GAIN
        if g.group(2) is not None:
            baseline = int(g.group(2))
        if g.group(3):
            units = g.group(3)
    if gain <= 0:
        raise ParseError(f"gain must be positive, got {gain}", lineno)
    adc_res = _int(tokens[3], "ADC resolution", lineno) if len(tokens) > 3 else 12
    adc_zero = _int(tokens[4], "ADC zero", lineno) if len(tokens) > 4 else DEFAULT_ADC_ZERO
    init = _int(tokens[5], "initial value", lineno) if len(tokens) > 5 else None
    checksum = _int(tokens[6], "checksum", lineno) if len(tokens) > 6 else None
    lead = " ".join(tokens[8:]) if len(tokens) > 8 else ""
    return SignalSpec(
        file_name=tokens[0],
        format_code=fmt,
        gain=gain,
        baseline=adc_zero if baseline is None else baseline,
        units=units,
        adc_resolution=adc_res,
        adc_zero=adc_zero,
        initial_value=init,
        checksum=checksum,
        lead_name=lead,
    )


# -- format 212 ---------------------------------------------------------------

def bytes_needed_212(total_samples: int) -> int:
    return (3 * total_samples + 1) // 2


def decode_212(data: bytes, n_samples_per_channel: int, n_channels: int) -> np.ndarray:
    """Unpack format-212 bytes into channel-interleaved 12-bit samples."""
    total = n_samples_per_channel * n_channels
    need = bytes_needed_212(total)
    if len(data) < need:
        raise ParseError(f"format 212 stream truncated: {len(data)} bytes, need {need}")
    n_triples = (total + 1) // 2
    raw = np.frombuffer(data, dtype=np.uint8, count=min(len(data), 3 * n_triples))
    if raw.size < 3 * n_triples:
        raw = np.concatenate([raw, np.zeros(3 * n_triples - raw.size, dtype=np.uint8)])
    b = raw.reshape(-1, 3).astype(np.int32)
    out = np.empty(2 * n_triples, dtype=np.int32)
    out[0::2] = ((b[:, 1] & 0x0F) << 8) | b[:, 0]
    out[1::2] = ((b[:, 1] >> 4) << 8) | b[:, 2]
    out[out > 2047] -= 4096
    return out[:total].astype(np.int16)


def encode_212(samples: np.ndarray) -> bytes:
    """Pack interleaved samples into format 212. Odd counts get a short last triple."""
    s = np.asarray(samples, dtype=np.int64)
    if s.size and (s.min() < -2048 or s.max() > 2047):
        raise ValueError("samples outside the 12-bit range")
    n = s.size
    padded = np.zeros(n + (n % 2), dtype=np.int64)
    padded[:n] = s & 0xFFF
    a, c = padded[0::2], padded[1::2]
    triples = np.empty((a.size, 3), dtype=np.uint8)
    triples[:, 0] = a & 0xFF
    triples[:, 1] = ((a >> 8) & 0x0F) | ((c >> 8) << 4)
    triples[:, 2] = c & 0xFF
    return triples.tobytes()[: bytes_needed_212(n)]


# -- annotations ----------------------------------------------------------------

def parse_annotations(data: bytes, n_samples: int | None = None) -> list[BeatAnnotation]:
    """Decode an MIT-format annotation file, keeping beat annotations only.

    The running sample counter accumulates every delta, including SKIP
    annotations and non-beat codes. NUM/SUB/CHN/AUX modifiers are consumed
    and ignored.
    """
    if len(data) % 2:
        data = data[:-1]
    words = np.frombuffer(data, dtype="<u2")
    beats: list[BeatAnnotation] = []
    t = 0
    i = 0
    n = words.size
    while i < n:
        w = int(words[i])
        code, delta = w >> 10, w & 0x3FF
        i += 1
        if code == 0 and delta == 0:
            break
        if code == _SKIP:
            if i + 2 > n:
                raise ParseError("SKIP annotation truncated")
            hi, lo = int(words[i]), int(words[i + 1])
            skip = (hi << 16) | lo
            if skip >= 1 << 31:
                skip -= 1 << 32
            t += skip
            i += 2
            continue
        if code == _AUX:
            i += (delta + 1) // 2
            continue
        if code in (_NUM, _SUB, _CHN):
            continue
        t += delta
        if n_samples is not None and t > n_samples:
            raise ParseError(f"annotation at sample {t} beyond record length {n_samples}")
        if code in BEAT_CODES:
            beats.append(BeatAnnotation.from_symbol(t, CODE_TO_SYMBOL[code]))
    return beats


def encode_annotations(annotations: list[tuple[int, str]], aux: dict[int, str] | None = None) -> bytes:
    """Write (sample, symbol) pairs in MIT format. Used by fixtures and the generator.

    ``aux`` maps an annotation's position in the list to an AUX string.
    """
    aux = aux or {}
    words: list[int] = []
    t = 0
    for k, (sample, symbol) in enumerate(annotations):
        code = SYMBOL_TO_CODE[symbol]
        delta = int(sample) - t
        if delta < 0:
            raise ValueError("annotation samples must be non-decreasing")
        if delta > 0x3FF:
            words += [_SKIP << 10, (delta >> 16) & 0xFFFF, delta & 0xFFFF]
            delta = 0
        words.append((code << 10) | delta)
        t = int(sample)
        if k in aux:
            text = aux[k].encode("ascii")
            words.append((_AUX << 10) | len(text))
            padded = text + b"\0" * (len(text) % 2)
            words += list(np.frombuffer(padded, dtype="<u2"))
    words.append(0)
    return np.asarray(words, dtype="<u2").tobytes()


# -- files ----------------------------------------------------------------------

def data_dir() -> Path:
    return Path(os.environ.get("ECG_DATA_DIR", "./data"))


def read_header(name: str, directory: str | os.PathLike | None = None) -> RecordHeader:
    d = Path(directory) if directory is not None else data_dir()
    return parse_header((d / f"{name}.hea").read_text(encoding="ascii", errors="replace"))


def load_record(name: str, directory: str | os.PathLike | None = None) -> EcgRecord:
    """Read header and signal file of one record."""
    d = Path(directory) if directory is not None else data_dir()
    header = read_header(name, d)
    files = {s.file_name for s in header.signals}
    if len(files) != 1:
        raise UnsupportedFormat("multi-file records are not supported")
    raw = (d / files.pop()).read_bytes()
    flat = decode_212(raw, header.n_samples, header.n_signals)
    channels = flat.reshape(header.n_samples, header.n_signals).T.copy()
    return EcgRecord(header, channels)


def load_annotations(
    name: str, directory: str | os.PathLike | None = None, n_samples: int | None = None
) -> list[BeatAnnotation]:
    d = Path(directory) if directory is not None else data_dir()
    return parse_annotations((d / f"{name}.atr").read_bytes(), n_samples)


_fetch_locks: dict[str, threading.Lock] = {}
_fetch_guard = threading.Lock()


def _record_complete(name: str, dest: Path) -> bool:
    paths = [dest / f"{name}{ext}" for ext in (".hea", ".dat", ".atr")]
    if not all(p.is_file() and p.stat().st_size > 0 for p in paths):
        return False
    try:
        header = parse_header(paths[0].read_text(encoding="ascii", errors="replace"))
    except (ParseError, UnsupportedFormat):
        return False
    return paths[1].stat().st_size >= bytes_needed_212(header.n_samples * header.n_signals)


def fetch_record(name: str, base_url: str | None = None, dest_dir: str | os.PathLike | None = None,
                 timeout: float = 60.0) -> list[Path]:
    """Download ``name``.hea/.dat/.atr unless a complete copy is already on disk.

    A local copy counts as complete when all three files exist and the
    signal file is as long as its header requires. Files are written to a
    temporary name and renamed into place.
    """
    base_url = (base_url or os.environ.get("ECG_BASE_URL") or DEFAULT_BASE_URL).rstrip("/")
    dest = Path(dest_dir) if dest_dir is not None else data_dir()
    dest.mkdir(parents=True, exist_ok=True)
    paths = [dest / f"{name}{ext}" for ext in (".hea", ".dat", ".atr")]

    with _fetch_guard:
        lock = _fetch_locks.setdefault(name, threading.Lock())
    with lock:
        if _record_complete(name, dest):
            log.debug("record %s already present in %s", name, dest)
            return paths
        for path in paths:
            url = f"{base_url}/{path.name}"
            fd, tmp = tempfile.mkstemp(dir=dest, prefix=f".{path.name}.")
            try:
                with os.fdopen(fd, "wb") as out, urllib.request.urlopen(url, timeout=timeout) as resp:
                    shutil.copyfileobj(resp, out)
            except (urllib.error.URLError, OSError) as exc:
                os.unlink(tmp)
                raise FetchError(f"record {name}: cannot fetch {url}: {exc}") from exc
            os.replace(tmp, path)
    return paths
