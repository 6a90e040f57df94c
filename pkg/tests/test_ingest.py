import json
import shutil

import numpy as np
import pytest
import wfdb
from hypothesis import given, settings
from hypothesis import strategies as st

from heartsig import ingest
from heartsig.errors import FetchError, ParseError, UnsupportedFormat

from conftest import MITDB_HEAD


HEADER_100 = """100 2 360 650000
100.dat 212 200 11 1024 995 -22131 0 MLII
100.dat 212 200 11 1024 1011 20052 0 V5
# 69 M 1085 1629 x1
"""


# -- header ---------------------------------------------------------------------

def test_header_record_line():
    h = ingest.parse_header(HEADER_100)
    assert (h.record_name, h.n_signals, h.sampling_rate, h.n_samples) == ("100", 2, 360, 650000)
    assert [s.lead_name for s in h.signals] == ["MLII", "V5"]
    assert h.signals[0].initial_value == 995
    assert h.comments == ("69 M 1085 1629 x1",)


def test_header_gain_default():
    h = ingest.parse_header("r 1 360 100\nr.dat 212\n")
    assert h.signals[0].gain == 200.0
    assert h.signals[0].adc_zero == 1024
    assert h.signals[0].baseline == 1024


def test_header_baseline_in_gain_field():
    h = ingest.parse_header((MITDB_HEAD / "208.hea").read_text())
    s = h.signals[0]
    assert (s.gain, s.baseline, s.adc_zero, s.units) == (200.0, 1024, 0, "mV")


def test_header_non_numeric_rate():
    with pytest.raises(ParseError) as err:
        ingest.parse_header("100 2 xyz 650000\n")
    assert err.value.line == 1


def test_header_bad_signal_line_reports_line():
    with pytest.raises(ParseError) as err:
        ingest.parse_header("r 1 360 100\n# note\nr.dat 212 abc\n")
    assert err.value.line == 3


def test_header_other_format():
    with pytest.raises(UnsupportedFormat):
        ingest.parse_header("r 1 360 100\nr.dat 16 200 16 0\n")


def test_header_matches_wfdb():
    ref = wfdb.rdheader(str(MITDB_HEAD / "100"))
    h = ingest.read_header("100", MITDB_HEAD)
    assert h.n_samples == ref.sig_len and h.sampling_rate == ref.fs
    assert [s.gain for s in h.signals] == list(ref.adc_gain)
    assert [s.baseline for s in h.signals] == list(ref.baseline)
    assert [s.lead_name for s in h.signals] == list(ref.sig_name)


# -- format 212 -----------------------------------------------------------------

@pytest.mark.parametrize("raw, expected", [
    (b"\x01\x00\x02", [1, 2]),
    (b"\x00\x00\x00", [0, 0]),
    (b"\xff\xff\xff", [-1, -1]),
    (b"\xff\x07\xff", [2047, 255]),
    (b"\xff\x87\xff", [2047, -1793]),
    (b"\x00\x08\x00", [-2048, 0]),
])
def test_decode_212_examples(raw, expected):
    assert ingest.decode_212(raw, 1, 2).tolist() == expected


def _unpack_bits(b0, b1, b2):
    """Per-bit reading of one byte triple, with a lookup-table sign extension."""
    bits0 = [(b0 >> k) & 1 for k in range(8)] + [(b1 >> k) & 1 for k in range(4)]
    bits1 = [(b2 >> k) & 1 for k in range(8)] + [(b1 >> (4 + k)) & 1 for k in range(4)]
    table = {u: (u if u < 2048 else u - 4096) for u in range(4096)}
    return [table[sum(bit << k for k, bit in enumerate(bits))] for bits in (bits0, bits1)]


def test_decode_212_bitwise_oracle():
    rng = np.random.default_rng(212)
    raw = rng.integers(0, 256, size=(10_000, 3), dtype=np.uint8)
    got = ingest.decode_212(raw.tobytes(), 10_000, 2).reshape(-1, 2)
    expected = np.array([_unpack_bits(*map(int, t)) for t in raw])
    assert np.array_equal(got, expected)


def test_decode_212_truncated():
    with pytest.raises(ParseError):
        ingest.decode_212(b"\x01\x00", 1, 2)


def test_decode_212_odd_count():
    assert ingest.decode_212(b"\x05\x00", 1, 1).tolist() == [5]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-2048, 2047), min_size=0, max_size=300))
def test_encode_decode_round_trip(values):
    data = ingest.encode_212(np.array(values))
    assert len(data) == ingest.bytes_needed_212(len(values))
    assert ingest.decode_212(data, len(values), 1).tolist() == values


def test_record_100_head_matches_wfdb_and_published_values():
    rec = ingest.load_record("100", MITDB_HEAD)
    ref = wfdb.rdrecord(str(MITDB_HEAD / "100"), physical=False)
    assert np.array_equal(rec.channels.T, ref.d_signal)
    expected = json.loads((MITDB_HEAD / "100_expected.json").read_text())
    mv = np.stack([rec.millivolts(0), rec.millivolts(1)], axis=1)
    assert np.allclose(mv, expected["mv"], atol=1e-12)
    assert rec.channels.T.tolist() == expected["adu"]


def test_record_208_excerpt_matches_truth_and_wfdb():
    rec = ingest.load_record("208", MITDB_HEAD)
    truth = np.load(MITDB_HEAD / "208_mlii_adu.npy")
    assert np.array_equal(rec.channels[0], truth)
    ref = wfdb.rdrecord(str(MITDB_HEAD / "208"))
    assert np.array_equal(rec.millivolts(0), ref.p_signal[:, 0])


# -- annotations ------------------------------------------------------------------

def _words(*ws):
    return np.array(ws, dtype="<u2").tobytes()


def test_annotation_single_beat():
    beats = ingest.parse_annotations(_words((1 << 10) | 5, 0))
    assert beats == [ingest.BeatAnnotation(5, "N", "normal")]


def test_annotation_immediate_end():
    assert ingest.parse_annotations(b"\x00\x00") == []


def test_annotation_skip_and_modifiers():
    # SKIP 100000, then V at +3, a NUM modifier, an AUX string, a rhythm mark, then A at +7.
    data = _words(59 << 10, 0x0001, 0x86A0, (5 << 10) | 3, 60 << 10, (63 << 10) | 3,
                  0x4E28, 0x0000, (28 << 10) | 2, (8 << 10) | 7, 0)
    beats = ingest.parse_annotations(data)
    assert [(b.sample_index, b.symbol) for b in beats] == [(100003, "V"), (100012, "A")]
    assert [b.aami_class for b in beats] == ["ventricular", "supraventricular"]


def test_annotation_overflow():
    with pytest.raises(ParseError):
        ingest.parse_annotations(_words((1 << 10) | 50, 0), n_samples=10)


def test_annotations_match_wfdb_reader(tmp_path):
    rng = np.random.default_rng(3)
    symbols = sorted(ingest.BEAT_SYMBOLS)
    samples = np.cumsum(rng.integers(1, 3000, size=400))
    pairs = [(int(s), symbols[rng.integers(len(symbols))]) for s in samples]
    (tmp_path / "x.atr").write_bytes(ingest.encode_annotations([(0, "+")] + pairs, aux={0: "(N"}))
    ref = wfdb.rdann(str(tmp_path / "x"), "atr")
    ours = ingest.parse_annotations((tmp_path / "x.atr").read_bytes())
    ref_beats = [(int(s), y) for s, y in zip(ref.sample, ref.symbol) if y in ingest.BEAT_SYMBOLS]
    assert [(b.sample_index, b.symbol) for b in ours] == ref_beats == pairs


def test_aami_and_fine_spaces():
    assert len(ingest.FINE_CLASSES) == 23
    assert ingest.FINE_INDEX["N"] == 0
    table = ingest.fine_to_aami_table()
    assert table[ingest.FINE_INDEX["V"]] == ingest.AAMI_CLASSES.index("ventricular")
    assert table[ingest.FINE_INDEX["F"]] == ingest.AAMI_CLASSES.index("fusion")
    assert all(ingest.AAMI_MAP[s] in ingest.AAMI_CLASSES for s in ingest.BEAT_SYMBOLS)


# -- fetch ------------------------------------------------------------------------

@pytest.fixture
def served_record(tmp_path):
    src = tmp_path / "server"
    src.mkdir()
    for ext in (".hea", ".dat"):
        shutil.copy(MITDB_HEAD / f"100{ext}", src / f"100{ext}")
    (src / "100.atr").write_bytes(ingest.encode_annotations([(3, "N"), (8, "N")]))
    return src


def test_fetch_from_local_server(served_record, tmp_path, file_server):
    start, hits = file_server
    base = start(served_record)
    dest = tmp_path / "data"
    paths = ingest.fetch_record("100", base, dest)
    for p in paths:
        assert p.read_bytes() == (served_record / p.name).read_bytes()
    assert [p.stat().st_size for p in paths] == [(served_record / p.name).stat().st_size for p in paths]
    assert len(hits) == 3
    assert not list(dest.glob(".*"))


def test_fetch_is_idempotent(served_record, tmp_path, file_server):
    start, hits = file_server
    base = start(served_record)
    ingest.fetch_record("100", base, tmp_path / "data")
    ingest.fetch_record("100", base, tmp_path / "data")
    assert len(hits) == 3


def test_fetch_missing_names_record(served_record, tmp_path, file_server):
    start, _ = file_server
    base = start(served_record)
    with pytest.raises(FetchError, match="999"):
        ingest.fetch_record("999", base, tmp_path / "data")
    assert not list((tmp_path / "data").iterdir())


def test_fetch_unreachable_host(tmp_path):
    with pytest.raises(FetchError):
        ingest.fetch_record("100", "http://127.0.0.1:9", tmp_path, timeout=2)
