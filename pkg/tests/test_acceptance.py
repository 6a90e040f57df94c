"""Acceptance checks, one test per criterion.

Criteria 1, 2, 3, 7 and 8 need MIT-BIH records in ``ECG_DATA_DIR``
(``heartsig fetch`` puts them there). When a record is missing the check
fails and says which file it could not find; nothing is skipped.

Each test registers a PASS/FAIL line that is printed in the terminal summary.
"""

import contextlib
import os
import time
from pathlib import Path

import numpy as np
import pytest
import wfdb

from heartsig import evaluate as ev
from heartsig import ingest, mlp, noise, pipeline, qrs, synth
from heartsig import signature as sg

from conftest import ACCEPTANCE_RESULTS, MITDB_HEAD
from oracles import max_relative_error, naive_dft, random_small_model

MITDB_RECORDS = tuple(
    [str(n) for n in range(100, 110)] + [str(n) for n in range(111, 120)] + ["121", "122", "123", "124"]
    + ["200", "201", "202", "203", "205", "207", "208", "209", "210", "212", "213", "214", "215", "217",
       "219", "220", "221", "222", "223", "228", "230", "231", "232", "233", "234"]
)
assert len(MITDB_RECORDS) == 48


def data_dir() -> Path:
    return Path(os.environ.get("ECG_DATA_DIR", "./data"))


def missing_files(names, directory=None, exts=(".hea", ".dat", ".atr")):
    directory = directory or data_dir()
    return [f"{n}{e}" for n in names for e in exts if not (directory / f"{n}{e}").is_file()]


def require_records(names, directory=None):
    gone = missing_files(names, directory)
    if gone:
        shown = ", ".join(gone[:6]) + (" ..." if len(gone) > 6 else "")
        raise AssertionError(f"records not found in {directory or data_dir()}: {shown}")


@contextlib.contextmanager
def criterion(number, title):
    """Record PASS/FAIL for one criterion; ``note`` collects the measured values."""
    note = []
    try:
        yield note
    except BaseException as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        ACCEPTANCE_RESULTS[number] = f"criterion {number:>2} FAIL  {title}: {msg}"
        raise
    ACCEPTANCE_RESULTS[number] = f"criterion {number:>2} PASS  {title}: {'; '.join(note)}"


# -- 1 --------------------------------------------------------------------------------

def test_criterion_01_parser_matches_reference_tooling():
    with criterion(1, "parser equals reference WFDB tooling on 100 and 208") as note:
        directory = data_dir()
        if missing_files(("100", "208"), directory):
            # fall back to the checked-in excerpts; they carry no annotation files
            directory = MITDB_HEAD
        require_records(("100", "208"), directory)
        t0 = time.perf_counter()
        ours = {n: (ingest.load_record(n, directory), ingest.load_annotations(n, directory)) for n in ("100", "208")}
        elapsed = time.perf_counter() - t0
        for name, (rec, beats) in ours.items():
            ref = wfdb.rdrecord(str(directory / name), physical=False)
            assert np.array_equal(rec.channels.T, ref.d_signal), f"{name}: sample values differ"
            ann = wfdb.rdann(str(directory / name), "atr")
            ref_beats = [(int(s), y) for s, y in zip(ann.sample, ann.symbol) if y in ingest.BEAT_SYMBOLS]
            assert [(b.sample_index, b.symbol) for b in beats] == ref_beats, f"{name}: annotations differ"
            note.append(f"{name}: {rec.channels.size} samples, {len(beats)} beats identical")
        assert elapsed < 5.0, f"parsing took {elapsed:.2f} s"
        note.append(f"{elapsed:.2f} s")


# -- 2 --------------------------------------------------------------------------------

def test_criterion_02_qrs_detection_on_record_100():
    with criterion(2, "QRS Se and +P >= 0.99 on record 100") as note:
        require_records(("100",))
        rec = ingest.load_record("100")
        beats = ingest.load_annotations("100")
        t0 = time.perf_counter()
        dets = qrs.detect_qrs(rec)
        elapsed = time.perf_counter() - t0
        m = qrs.match_detections(dets, beats, 0.150, rec.fs)
        note.append(f"Se={m.sensitivity:.4f} +P={m.positive_predictivity:.4f} ({len(beats)} beats, {elapsed:.2f} s)")
        assert m.sensitivity >= 0.99, f"sensitivity {m.sensitivity:.4f}"
        assert m.positive_predictivity >= 0.99, f"positive predictivity {m.positive_predictivity:.4f}"
        assert elapsed < 10.0, f"detection took {elapsed:.2f} s"


# -- 3 --------------------------------------------------------------------------------

def test_criterion_03_signature_invariants_on_100_and_208():
    with criterion(3, "signature invariants over every beat of 100 and 208") as note:
        require_records(("100", "208"))
        t0 = time.perf_counter()
        n = 0
        for name in ("100", "208"):
            rec = ingest.load_record(name)
            beats = ingest.load_annotations(name)
            sigs = sg.encode_beats(rec.millivolts(0), [b.sample_index for b in beats])
            for b, s in zip(beats, sigs):
                dense = s.to_dense()
                assert s.nnz <= 64, f"{name}@{b.sample_index}: {s.nnz} nonzeros"
                assert not dense[:, 80:].any(), f"{name}@{b.sample_index}: padded columns not zero"
                assert not s.degenerate and np.max(np.abs(dense)) == 1.0, f"{name}@{b.sample_index}: max-abs != 1"
            n += len(sigs)
        elapsed = time.perf_counter() - t0
        note.append(f"{n} beats, {elapsed:.1f} s")
        assert elapsed < 60.0, f"encoding took {elapsed:.1f} s"


# -- 4 --------------------------------------------------------------------------------

def test_criterion_04_stft_matches_naive_dft():
    with criterion(4, "STFT equals naive DFT on 1000 random frames") as note:
        rng = np.random.default_rng(2024)
        cfg = sg.DEFAULT_ENCODER
        taper = cfg.taper()
        worst = 0.0
        for _ in range(1000):
            seg = rng.standard_normal(cfg.segment_len) * rng.uniform(0.01, 5)
            f = int(rng.integers(cfg.frames))
            col = sg.stft(seg, cfg)[:, f]
            ref = naive_dft(seg[f * cfg.hop: f * cfg.hop + cfg.window_len] * taper)
            worst = max(worst, float(np.max(np.abs(col - ref))))
        note.append(f"max abs error {worst:.2e}")
        assert worst < 1e-9


# -- 5 --------------------------------------------------------------------------------

def test_criterion_05_gradient_check():
    with criterion(5, "gradients match central differences on 20 models") as note:
        rng = np.random.default_rng(5)
        t0 = time.perf_counter()
        worst = max(max_relative_error(*random_small_model(rng, (16, 12, 8))) for _ in range(20))
        elapsed = time.perf_counter() - t0
        note.append(f"max relative error {worst:.2e}, {elapsed:.1f} s")
        assert worst < 1e-4
        assert elapsed < 30.0


# -- 6 --------------------------------------------------------------------------------

def test_criterion_06_memorization():
    with criterion(6, "10 signatures memorized within 500 epochs, hidden [32]") as note:
        sigs = []
        for k, profile in enumerate(("normal", "lbbb", "rbbb", "paced", "ventricular",
                                     "supraventricular", "normal", "ventricular", "lbbb", "paced")):
            rec = synth.generate_record(f"m{k}", 10, profile, seed=k)
            s, _ = rec.beats[len(rec.beats) // 2]
            sigs.append(sg.encode_beats(rec.signal_mv[0], [s])[0])
        labels = np.arange(10)
        cfg = mlp.TrainConfig(epochs=500, hidden_dims=(32,), batch_size=10, seed=0)
        reached = []

        def progress(epoch, report):
            if report.accuracy[-1] == 1.0 and not reached:
                reached.append(epoch + 1)

        model, report = mlp.train(mlp.init([6724, 32, 10], seed=0), sigs, labels, cfg, progress)
        acc = float(np.mean([mlp.predict(model, s)[0] for s in sigs] == labels))
        note.append(f"training accuracy {acc:.2f}, first 100% at epoch {reached[0] if reached else '-'}")
        assert acc == 1.0


# -- 7 and 8 --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def full_database_run(tmp_path_factory):
    """One desk-scale run over the whole database, shared by criteria 7 and 8."""
    gone = missing_files(MITDB_RECORDS)
    if gone:
        return None, f"records not found in {data_dir()}: {len(gone)} files missing, e.g. {', '.join(gone[:3])}"
    config = pipeline.PipelineConfig(
        records=MITDB_RECORDS, data_dir=data_dir(), classes=5, seed=0, n_train=ev.FULL_TRAIN_SIZE,
        noise_record="106", snr_db=(0, 4, 8, 12, 16, 20),
        train=mlp.TrainConfig(hidden_dims=(256,)), jobs=os.cpu_count() or 1,
    )
    t0 = time.perf_counter()
    result = pipeline.run_pipeline(config, tmp_path_factory.mktemp("full"))
    return result, time.perf_counter() - t0


def test_criterion_07_five_class_training_direction(full_database_run):
    with criterion(7, "5-class >= 23-class-mapped - 1 pt and >= 85% overall") as note:
        result, info = full_database_run
        assert result is not None, info
        t1 = result.report["table1"]
        acc5, acc23 = t1["overall_5"], t1["overall_23"]
        note.append(f"5-class {acc5:.4f}, 23-class mapped {acc23:.4f}, run {info / 60:.1f} min")
        assert acc5 >= acc23 - 0.01
        assert acc5 >= 0.85
        assert info < 2 * 3600


def test_criterion_08_noise_trend_on_record_106(full_database_run):
    with criterion(8, "accuracy rises with SNR on record 106") as note:
        result, info = full_database_run
        assert result is not None, info
        rows = result.report["noise"]
        snr = [r["snr_db"] for r in rows]
        acc = [r["accuracy"] for r in rows]
        slope = ev.least_squares_slope(snr, acc)
        note.append(" ".join(f"{s:g}dB={a:.3f}" for s, a in zip(snr, acc)) + f" slope={slope:.2e}")
        assert acc[snr.index(20.0)] >= acc[snr.index(0.0)]
        assert slope >= 0


# -- 9 --------------------------------------------------------------------------------

def test_criterion_09_awgn_calibration():
    with criterion(9, "measured SNR within 0.2 dB of 6 dB at L=1e6") as note:
        x = np.sqrt(2) * np.sin(2 * np.pi * 1.3 * np.arange(1_000_000) / 360)
        out = noise.add_awgn(x, 6.0, seed=0).signal
        measured = 10 * np.log10(noise.signal_power(x) / noise.signal_power(out - x))
        note.append(f"{measured:.4f} dB")
        assert abs(measured - 6.0) <= 0.2


# -- 10 -------------------------------------------------------------------------------

def test_criterion_10_pipeline_determinism(tmp_path):
    with criterion(10, "two identical pipeline runs are byte-identical") as note:
        db = tmp_path / "db"
        names = synth.write_database(db, duration_s=120, seed=1, records=synth.DEFAULT_DATABASE[:4])

        def run(out):
            config = pipeline.PipelineConfig(records=names, data_dir=db, seed=7, noise_record=names[2],
                                             snr_db=(0, 20), train=mlp.TrainConfig(hidden_dims=(32,), epochs=10))
            pipeline.run_pipeline(config, out)
            return {p.name: p.read_bytes() for p in sorted(out.iterdir())}

        a, b = run(tmp_path / "a"), run(tmp_path / "b")
        assert {"signatures.ecgs", "model23.ecgm", "model5.ecgm", "report.json"} <= set(a)
        differing = [k for k in a if a[k] != b.get(k)]
        note.append(f"{len(a)} files compared")
        assert not differing and set(a) == set(b), f"differ: {differing}"


# -- 11 -------------------------------------------------------------------------------

def test_criterion_11_classify_time_grows_with_hidden_size(tmp_path):
    with criterion(11, "median online classify time increases over hidden 256/1000/2000") as note:
        synth.write_record(synth.generate_record("t11", 300, "ventricular", seed=11), tmp_path)
        rec = ingest.load_record("t11", tmp_path)
        medians = []
        for hidden in (256, 1000, 2000):
            beats = pipeline.run_online(rec, mlp.init([6724, hidden, 23], seed=0))
            medians.append(pipeline.online_medians(beats)[2])
        note.append(", ".join(f"{h}: {m:.3f} ms" for h, m in zip((256, 1000, 2000), medians)))
        assert medians[0] < medians[1] < medians[2]
