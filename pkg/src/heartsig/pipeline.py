"""Offline (detect, encode, split, train, evaluate) and online phases."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, TextIO

import numpy as np

from heartsig import evaluate as ev
from heartsig import mlp, qrs
from heartsig.errors import HeartsigError
from heartsig.ingest import (
    AAMI_CLASSES, FINE_CLASSES, FINE_INDEX, NORMAL_SYMBOL, RESERVED_SYMBOL, EcgRecord,
    aami_index, data_dir, fine_to_aami_table, load_annotations, load_record,
)
from heartsig.signature import (
    DEFAULT_ENCODER, EncoderConfig, SignatureEntry, beat_to_signature, encode_beats,
    read_signatures, write_signatures,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FETCH = 2
EXIT_DETECT = 3
EXIT_ENCODE = 4
EXIT_TRAIN = 5
EXIT_EVAL = 6


class StageError(HeartsigError):
    def __init__(self, exit_code: int, message: str):
        super().__init__(message)
        self.exit_code = exit_code


@dataclass
class PipelineConfig:
    records: tuple[str, ...] = ()
    data_dir: Path = field(default_factory=data_dir)
    encoder: EncoderConfig = DEFAULT_ENCODER
    detector: qrs.DetectorConfig = field(default_factory=qrs.DetectorConfig)
    train: mlp.TrainConfig = field(default_factory=mlp.TrainConfig)
    classes: int = 23
    seed: int = 0
    n_train: int | None = None
    noise_record: str | None = None
    snr_db: tuple[float, ...] = (0.0, 4.0, 8.0, 12.0, 16.0, 20.0)
    jobs: int = 1

    def __post_init__(self):
        if self.classes not in (23, 5):
            raise ValueError("classes must be 23 or 5")
        self.records = tuple(self.records)
        self.data_dir = Path(self.data_dir)
        self.snr_db = tuple(float(s) for s in self.snr_db)
        # one seed drives every seeded stage
        self.train = dataclasses.replace(self.train, seed=self.seed)

    def semantic(self) -> dict:
        """Fields that affect results; paths and worker counts are excluded."""
        return {
            "records": list(self.records),
            "encoder": dataclasses.asdict(self.encoder),
            "detector": dataclasses.asdict(self.detector),
            "train": {**dataclasses.asdict(self.train), "hidden_dims": list(self.train.hidden_dims)},
            "classes": self.classes,
            "seed": self.seed,
            "n_train": self.n_train,
            "noise_record": self.noise_record,
            "snr_db": list(self.snr_db),
        }

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.semantic(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def class_names(classes: int) -> tuple[str, ...]:
    return FINE_CLASSES if classes == 23 else AAMI_CLASSES


def label_fn(classes: int) -> Callable[[str], int]:
    if classes == 23:
        return lambda s: FINE_INDEX[s]
    return aami_index


def normal_id(classes: int) -> int:
    return FINE_INDEX[NORMAL_SYMBOL] if classes == 23 else AAMI_CLASSES.index("normal")


# -- offline phase --------------------------------------------------------------------

@dataclass
class LabeledBeats:
    entries: list[SignatureEntry]
    n_reference: int
    n_detected: int

    @property
    def symbols(self) -> list[str]:
        return [FINE_CLASSES[e.label] for e in self.entries]


def load_labeled(name: str, directory: Path) -> tuple[EcgRecord, list]:
    try:
        record = load_record(name, directory)
    except (OSError, HeartsigError) as exc:
        raise StageError(EXIT_DETECT, f"record {name}: cannot read signal: {exc}") from exc
    try:
        anns = load_annotations(name, directory, len(record))
    except (OSError, HeartsigError) as exc:
        raise StageError(EXIT_DETECT, f"record {name}: cannot read annotations: {exc}") from exc
    return record, anns


def record_beats(name: str, config: PipelineConfig) -> LabeledBeats:
    """Detect beats, label them from the matched reference annotation and encode them."""
    record, anns = load_labeled(name, config.data_dir)
    try:
        dets = qrs.detect_qrs(record, config.detector)
    except HeartsigError as exc:
        raise StageError(EXIT_DETECT, f"record {name}: detection failed: {exc}") from exc
    match = qrs.match_detections(dets, anns, fs=record.fs)
    try:
        mv = record.millivolts(0)
        peaks = [dets[i].sample_index_native for i, _ in match.pairs]
        sigs = encode_beats(mv, peaks, config.encoder)
    except HeartsigError as exc:
        raise StageError(EXIT_ENCODE, f"record {name}: encoding failed: {exc}") from exc
    entries = [SignatureEntry(name, p, FINE_INDEX[anns[k].symbol], s)
               for (_, k), p, s in zip(match.pairs, peaks, sigs)]
    return LabeledBeats(entries, len(anns), len(dets))


def build_dataset(config: PipelineConfig) -> list[SignatureEntry]:
    with ThreadPoolExecutor(max_workers=max(1, config.jobs)) as pool:
        parts = list(pool.map(lambda r: record_beats(r, config), config.records))
    for name, part in zip(config.records, parts):
        log.info("%s: %d reference beats, %d detections, %d labelled signatures",
                 name, part.n_reference, part.n_detected, len(part.entries))
    return [e for part in parts for e in part.entries]


def labels_for(entries: Iterable[SignatureEntry], classes: int) -> np.ndarray:
    if classes == 23:
        return np.array([e.label for e in entries], dtype=np.int64)
    return fine_to_aami_table()[[e.label for e in entries]]


def train_model(entries: list[SignatureEntry], classes: int, config: mlp.TrainConfig) -> tuple[mlp.MlpModel, mlp.TrainReport]:
    dims = [entries[0].signature.grid ** 2, *config.hidden_dims, classes]
    model = mlp.init(dims, config.seed)

    def progress(epoch, rep):
        log.info("train[%d] epoch %d/%d loss %.4f acc %.4f (%.1fs)", classes, epoch + 1, config.epochs,
                 rep.loss[-1], rep.accuracy[-1], rep.seconds[-1])

    return mlp.train(model, [e.signature for e in entries], labels_for(entries, classes), config, progress)


def _csv_text(rows: list[list], header: list[str], stamp: str) -> str:
    buf = io.StringIO()
    buf.write(f"# {stamp}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else f"{x:.6f}"


@dataclass
class PipelineResult:
    out_dir: Path
    files: dict[str, Path]
    report: dict


def run_pipeline(config: PipelineConfig, out_dir: str | Path) -> PipelineResult:
    """Run every offline stage and write the artifacts into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stamp = f"config_hash={config.config_hash} seed={config.seed}"
    files: dict[str, Path] = {}

    entries = build_dataset(config)
    if not entries:
        raise StageError(EXIT_ENCODE, "no labelled beats were produced")
    files["signatures"] = out / "signatures.ecgs"
    write_signatures(entries, files["signatures"])

    symbols = [FINE_CLASSES[e.label] for e in entries]
    records = [e.record for e in entries]
    n_train = config.n_train or ev.desk_train_size(len(entries), len(set(records)))
    try:
        split = ev.split_dataset(symbols, n_train, config.seed)
    except HeartsigError as exc:
        raise StageError(EXIT_TRAIN, f"split failed: {exc}") from exc
    train_set = [entries[i] for i in split.train]
    test_set = [entries[i] for i in split.test]
    if not test_set:
        raise StageError(EXIT_EVAL, "test set is empty")

    models = {}
    try:
        for classes in (23, 5):
            models[classes], _ = train_model(train_set, classes, config.train)
            files[f"model{classes}"] = out / f"model{classes}.ecgm"
            mlp.save(models[classes], files[f"model{classes}"])
    except HeartsigError as exc:
        raise StageError(EXIT_TRAIN, f"training failed: {exc}") from exc

    try:
        test_sigs = [e.signature for e in test_set]
        test_records = [e.record for e in test_set]
        reports = {}
        preds = {}
        for classes in (23, 5):
            preds[classes], _ = mlp.predict_batch(models[classes], test_sigs)
            reports[classes] = ev.report_from_predictions(
                labels_for(test_set, classes), preds[classes], test_records,
                class_names(classes), normal_id(classes))
        actual_aami = labels_for(test_set, 5)
        mapped = fine_to_aami_table()[preds[23]]
        table1 = {
            "trained_23": ev.per_aami_accuracy(actual_aami, mapped),
            "trained_5": ev.per_aami_accuracy(actual_aami, preds[5]),
            "overall_23": float(np.mean(mapped == actual_aami)),
            "overall_5": float(np.mean(preds[5] == actual_aami)),
        }
        noise_rows = None
        if config.noise_record:
            rec, anns = load_labeled(config.noise_record, config.data_dir)
            noise_rows = ev.noise_sweep(models[config.classes], rec, anns, config.snr_db, config.seed,
                                        label_fn(config.classes), config.encoder, config.detector)
    except HeartsigError as exc:
        raise StageError(EXIT_EVAL, f"evaluation failed: {exc}") from exc

    primary = reports[config.classes]
    names = class_names(config.classes)
    per_class_rows = [
        [k, names[k], int(primary.confusion[k].sum()), _fmt(primary.per_class_accuracy[k])]
        for k in range(len(names)) if names[k] != RESERVED_SYMBOL
    ]
    files["per_class"] = out / "per_class.csv"
    files["per_class"].write_text(_csv_text(per_class_rows, ["class_id", "class", "n_test", "accuracy"], stamp))

    summary_rows = [[f"sparse_signature_{c}", _fmt(r.patient_mean_accuracy), _fmt(r.class_mean_accuracy),
                     _fmt(r.overall_accuracy), _fmt(r.false_positive_rate), _fmt(r.false_negative_rate),
                     _fmt(r.false_negative_to_normal_rate)] for c, r in reports.items()]
    files["summary"] = out / "summary.csv"
    files["summary"].write_text(_csv_text(
        summary_rows,
        ["technique", "patient_avg", "type_avg", "overall", "false_pos", "false_neg", "false_neg_to_normal"],
        stamp))

    t1_rows = [[name, _fmt(table1["trained_23"][k]), _fmt(table1["trained_5"][k])]
               for k, name in enumerate(AAMI_CLASSES)]
    t1_rows.append(["overall", _fmt(table1["overall_23"]), _fmt(table1["overall_5"])])
    files["table1"] = out / "table1.csv"
    files["table1"].write_text(_csv_text(t1_rows, ["aami_class", "trained_23", "trained_5"], stamp))

    if noise_rows is not None:
        files["noise"] = out / "noise.csv"
        files["noise"].write_text(_csv_text([[f"{s:g}", _fmt(a)] for s, a in noise_rows],
                                            ["snr_db", "accuracy"], stamp))

    report = {
        "config_hash": config.config_hash,
        "seed": config.seed,
        "config": config.semantic(),
        "mode": "full" if len(set(records)) >= ev.FULL_DATABASE_RECORDS else "desk",
        "n_signatures": len(entries),
        "n_train": int(split.train.size),
        "n_test": int(split.test.size),
        "train_histogram": dict(sorted(split.train_histogram.items())),
        "test_histogram": dict(sorted(split.test_histogram.items())),
        "eval_23": reports[23].to_dict(),
        "eval_5": reports[5].to_dict(),
        "table1": {
            "aami_classes": list(AAMI_CLASSES),
            "trained_23": [None if np.isnan(a) else float(a) for a in table1["trained_23"]],
            "trained_5": [None if np.isnan(a) else float(a) for a in table1["trained_5"]],
            "overall_23": table1["overall_23"],
            "overall_5": table1["overall_5"],
        },
        "noise": None if noise_rows is None else [{"snr_db": s, "accuracy": a} for s, a in noise_rows],
    }
    files["report"] = out / "report.json"
    files["report"].write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")

    manifest = {
        "config_hash": config.config_hash,
        "seed": config.seed,
        "artifacts": {k: {"file": p.name, "sha256": hashlib.sha256(p.read_bytes()).hexdigest()}
                      for k, p in sorted(files.items())},
    }
    files["manifest"] = out / "manifest.json"
    files["manifest"].write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return PipelineResult(out, files, report)


def load_signature_set(path: str | Path) -> list[SignatureEntry]:
    return read_signatures(path)


# -- online phase -----------------------------------------------------------------------

@dataclass
class OnlineBeat:
    sample_index: int
    class_id: int
    confidence: float
    t_detect_us: float
    t_encode_ms: float
    t_classify_ms: float


def run_online(record: EcgRecord, model: mlp.MlpModel, encoder: EncoderConfig = DEFAULT_ENCODER,
               detector: qrs.DetectorConfig | None = None) -> list[OnlineBeat]:
    """Detect, encode and classify every beat, timing each stage with a monotonic clock.

    Detection runs over the whole record, so its time is reported per beat
    as the total divided by the number of detections.
    """
    t0 = time.perf_counter_ns()
    try:
        dets = qrs.detect_qrs(record, detector)
    except qrs.TooShort:
        dets = []
    t_detect = (time.perf_counter_ns() - t0) / 1e3
    per_beat_detect = t_detect / len(dets) if dets else 0.0
    out = []
    for d in dets:
        t1 = time.perf_counter_ns()
        sig = beat_to_signature(record, d.sample_index_native, encoder)
        t2 = time.perf_counter_ns()
        k, conf = mlp.predict(model, sig)
        t3 = time.perf_counter_ns()
        out.append(OnlineBeat(d.sample_index_native, k, conf, per_beat_detect, (t2 - t1) / 1e6, (t3 - t2) / 1e6))
    return out


def online_medians(beats: list[OnlineBeat]) -> tuple[float, float, float]:
    if not beats:
        return 0.0, 0.0, 0.0
    return (float(np.median([b.t_detect_us for b in beats])),
            float(np.median([b.t_encode_ms for b in beats])),
            float(np.median([b.t_classify_ms for b in beats])))


def write_online(beats: list[OnlineBeat], names: tuple[str, ...], stream: TextIO) -> None:
    stream.write("sample_index,class,confidence,t_detect_us,t_encode_ms,t_classify_ms\n")
    for b in beats:
        stream.write(f"{b.sample_index},{names[b.class_id]},{b.confidence:.4f},"
                     f"{b.t_detect_us:.2f},{b.t_encode_ms:.4f},{b.t_classify_ms:.4f}\n")
    md, me, mc = online_medians(beats)
    stream.write(f"median,{len(beats)},,{md:.2f},{me:.4f},{mc:.4f}\n")
