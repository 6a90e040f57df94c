"""Synthetic MIT-BIH-like records for tests and offline demos.

Each beat is a sum of Gaussian waves (P, Q, R, S, T and extras) whose
shape and timing depend on the beat symbol. Records are written as real
WFDB files (header, format 212, MIT annotations) so that the same loading
code path is exercised as for the real database.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from heartsig.ingest import encode_212, encode_annotations

FS = 360
GAIN = 200.0
ZERO = 1024

# (offset from fiducial s, amplitude mV, width s)
_N_QRS = [(-0.030, -0.12, 0.010), (0.0, 1.10, 0.011), (0.030, -0.25, 0.012)]
_N = [(-0.200, 0.15, 0.025)] + _N_QRS + [(0.280, 0.30, 0.045)]
_V = [(0.0, 1.50, 0.035), (0.080, -0.60, 0.040), (0.330, -0.45, 0.060)]
_PACED = [(-0.050, 2.00, 0.002), (0.020, 1.00, 0.030), (0.080, -0.50, 0.035), (0.330, -0.30, 0.060)]

TEMPLATES: dict[str, list[tuple[float, float, float]]] = {
    "N": _N,
    "L": [(-0.220, 0.12, 0.025), (-0.020, 0.80, 0.022), (0.030, 0.85, 0.022),
          (0.080, -0.10, 0.020), (0.320, -0.28, 0.050)],
    "R": [(-0.200, 0.14, 0.025), (-0.030, -0.08, 0.010), (0.0, 0.80, 0.011),
          (0.035, -0.45, 0.015), (0.075, 0.55, 0.018), (0.310, 0.22, 0.050)],
    "A": [(-0.160, -0.08, 0.020)] + _N_QRS + [(0.270, 0.28, 0.045)],
    "a": [(-0.150, -0.06, 0.020), (0.0, 0.90, 0.018), (0.045, -0.40, 0.020), (0.280, -0.15, 0.050)],
    "J": _N_QRS + [(0.100, -0.06, 0.020), (0.270, 0.28, 0.045)],
    "S": [(-0.120, 0.20, 0.015)] + _N_QRS + [(0.270, 0.20, 0.045)],
    "V": _V,
    "E": [(0.0, -1.20, 0.035), (0.070, 0.30, 0.030), (0.330, 0.40, 0.060)],
    "F": [(o, 0.5 * a, w) for o, a, w in _N + _V],
    "/": _PACED,
    "f": [(o, 0.5 * a, w) for o, a, w in _PACED + _N],
    "j": _N_QRS + [(0.280, 0.30, 0.045)],
    "e": [(-0.180, -0.10, 0.030)] + _N_QRS + [(0.280, 0.30, 0.045)],
}

# RR multiplier relative to the running rhythm
_TIMING = {"A": 0.70, "a": 0.68, "J": 0.72, "S": 0.70, "V": 0.62, "F": 0.90,
           "E": 1.45, "j": 1.40, "e": 1.35, "Q": 0.85}
_PAUSE_AFTER = {"V": 1.35, "E": 1.0}

PROFILES: dict[str, dict[str, float]] = {
    "normal": {"N": 0.93, "A": 0.04, "V": 0.03},
    "lbbb": {"L": 0.92, "V": 0.05, "A": 0.03},
    "rbbb": {"R": 0.90, "A": 0.05, "V": 0.03, "Q": 0.02},
    "paced": {"/": 0.80, "f": 0.15, "N": 0.05},
    "ventricular": {"N": 0.60, "V": 0.28, "F": 0.10, "E": 0.02},
    "supraventricular": {"N": 0.70, "A": 0.12, "a": 0.06, "J": 0.05, "S": 0.02, "j": 0.03, "e": 0.02},
}


@dataclass
class SyntheticRecord:
    name: str
    signal_mv: np.ndarray  # (2, n)
    beats: list[tuple[int, str]]

    @property
    def adu(self) -> np.ndarray:
        return np.clip(np.rint(self.signal_mv * GAIN + ZERO), 0, 2047).astype(np.int64)


def _random_template(rng: np.random.Generator) -> list[tuple[float, float, float]]:
    waves = [(0.0, float(rng.uniform(-1.0, 1.5)), float(rng.uniform(0.01, 0.04)))]
    for _ in range(int(rng.integers(1, 4))):
        waves.append((float(rng.uniform(-0.25, 0.35)), float(rng.uniform(-0.5, 0.5)),
                      float(rng.uniform(0.01, 0.06))))
    return waves


def generate_record(name: str, duration_s: float = 60.0, profile: str = "normal", seed: int = 0,
                    noise_mv: float = 0.015, wander_mv: float = 0.08,
                    mix: dict[str, float] | None = None) -> SyntheticRecord:
    rng = np.random.default_rng(seed)
    mix = mix or PROFILES[profile]
    symbols = list(mix)
    probs = np.array([mix[s] for s in symbols], dtype=float)
    probs /= probs.sum()

    n = int(round(duration_s * FS))
    t = np.arange(n) / FS
    rr_base = 60.0 / rng.uniform(62, 92)
    # per-record morphology: one gain per wave slot, one width factor per record
    amp_jitter = {s: rng.uniform(0.8, 1.2, size=8) for s in TEMPLATES}
    width_scale = rng.uniform(0.9, 1.1)
    lead2 = rng.uniform(0.3, 0.6) * rng.choice([-1.0, 1.0])

    mlii = np.zeros(n)
    beats: list[tuple[int, str]] = []
    pos = rr_base * rng.uniform(0.4, 0.8)
    prev = "N"
    while pos < duration_s - 0.5:
        sym = symbols[int(rng.choice(len(symbols), p=probs))]
        if sym in _TIMING and beats:
            pos = beats[-1][0] / FS + rr_base * _TIMING[sym] * rng.uniform(0.97, 1.03)
        tmpl = _random_template(rng) if sym == "Q" else TEMPLATES[sym]
        jit = amp_jitter.get(sym, np.ones(8))
        for k, (off, amp, width) in enumerate(tmpl):
            a = amp * jit[k % 8] * rng.uniform(0.95, 1.05)
            w = width * width_scale * rng.uniform(0.95, 1.05)
            c = pos + off
            lo, hi = max(int((c - 5 * w) * FS), 0), min(int((c + 5 * w) * FS) + 1, n)
            if lo < hi:
                mlii[lo:hi] += a * np.exp(-0.5 * ((t[lo:hi] - c) / w) ** 2)
        beats.append((int(round(pos * FS)), sym))
        prev = sym
        pos += rr_base * _PAUSE_AFTER.get(prev, 1.0) * rng.uniform(0.95, 1.05)

    phase = rng.uniform(0, 2 * np.pi)
    wander = wander_mv * np.sin(2 * np.pi * rng.uniform(0.15, 0.35) * t + phase)
    mlii = mlii + wander + rng.normal(0.0, noise_mv, n) - 0.1
    v = lead2 * mlii + rng.normal(0.0, noise_mv, n)
    return SyntheticRecord(name, np.vstack([mlii, v]), beats)


def write_record(rec: SyntheticRecord, directory: str | Path) -> list[Path]:
    """Write ``rec`` as a two-signal format-212 WFDB record."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    adu = rec.adu
    n = adu.shape[1]
    dat = encode_212(adu.T.ravel())
    header = [f"{rec.name} 2 {FS} {n}"]
    for ch, lead in enumerate(("MLII", "V1")):
        header.append(f"{rec.name}.dat 212 {GAIN:g} 11 {ZERO} {int(adu[ch, 0])} 0 0 {lead}")
    header.append("# synthetic record")
    paths = [d / f"{rec.name}.hea", d / f"{rec.name}.dat", d / f"{rec.name}.atr"]
    paths[0].write_text("\n".join(header) + "\n", encoding="ascii")
    paths[1].write_bytes(dat)
    # leading rhythm annotation exercises non-beat handling, as in the real files
    ann = [(0, "+")] + rec.beats
    paths[2].write_bytes(encode_annotations(ann, aux={0: "(N"}))
    return paths


DEFAULT_DATABASE = (
    ("syn100", "normal"), ("syn101", "normal"), ("syn106", "ventricular"),
    ("syn109", "lbbb"), ("syn118", "rbbb"), ("syn107", "paced"),
    ("syn208", "ventricular"), ("syn209", "supraventricular"), ("syn232", "supraventricular"),
    ("syn111", "lbbb"), ("syn212", "rbbb"), ("syn217", "paced"),
)


def write_database(directory: str | Path, duration_s: float = 300.0, seed: int = 0,
                   records=DEFAULT_DATABASE) -> list[str]:
    names = []
    for k, (name, profile) in enumerate(records):
        write_record(generate_record(name, duration_s, profile, seed=seed * 1000 + k), directory)
        names.append(name)
    return names
