"""Command-line front end.

Exit codes: 0 success, 1 bad arguments or configuration, 2 fetch failure,
3 detection (including unreadable records), 4 encoding, 5 training,
6 evaluation. Data goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from heartsig import evaluate as ev
from heartsig import mlp, pipeline, qrs
from heartsig.errors import FetchError, HeartsigError
from heartsig.ingest import DEFAULT_BASE_URL, fetch_record
from heartsig.pipeline import (
    EXIT_DETECT, EXIT_EVAL, EXIT_FETCH, EXIT_TRAIN, PipelineConfig, StageError,
)
from heartsig.signature import read_signatures, write_signatures

log = logging.getLogger("heartsig")

EXIT_USAGE = 1

# builtin defaults for keys that may also come from --config
DEFAULTS = {
    "hidden": "256",
    "epochs": "20",
    "lr": "0.05",
    "momentum": "0.9",
    "batch": "32",
    "classes": "23",
    "seed": "0",
    "jobs": "1",
    "snr": "0:20:4",
    "records": "",
    "noise_record": "",
    "n_train": "",
    "data_dir": "",
}


def read_config_file(path: str) -> dict[str, str]:
    """Plain ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def parse_snr(text: str) -> list[float]:
    """``start:stop:step`` (inclusive) or a comma list."""
    if ":" in text:
        start, stop, step = (float(v) for v in text.split(":"))
        if step <= 0:
            raise ValueError("SNR step must be positive")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [start + i * step for i in range(n)]
    return [float(v) for v in text.split(",") if v.strip()]


def parse_hidden(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


class Settings:
    """Resolves a key from the command line, then the config file, then builtin defaults."""

    def __init__(self, args: argparse.Namespace, config: dict[str, str]):
        self.args = args
        self.config = config

    def get(self, key: str) -> str:
        value = getattr(self.args, key, None)
        if value is not None:
            return value
        return self.config.get(key, DEFAULTS[key])

    def records(self) -> list[str]:
        cli = getattr(self.args, "records", None)
        if cli:
            return list(cli)
        return [r for r in self.config.get("records", "").replace(",", " ").split() if r]

    def data_dir(self) -> Path:
        value = self.get("data_dir")
        return Path(value) if value else Path(os.environ.get("ECG_DATA_DIR", "./data"))

    def train_config(self) -> mlp.TrainConfig:
        return mlp.TrainConfig(
            learning_rate=float(self.get("lr")),
            momentum=float(self.get("momentum")),
            batch_size=int(self.get("batch")),
            epochs=int(self.get("epochs")),
            seed=int(self.get("seed")),
            hidden_dims=parse_hidden(self.get("hidden")),
        )

    def pipeline_config(self) -> PipelineConfig:
        n_train = self.get("n_train")
        return PipelineConfig(
            records=tuple(self.records()),
            data_dir=self.data_dir(),
            train=self.train_config(),
            classes=int(self.get("classes")),
            seed=int(self.get("seed")),
            n_train=int(n_train) if n_train else None,
            noise_record=self.get("noise_record") or None,
            snr_db=tuple(parse_snr(self.get("snr"))),
            jobs=int(self.get("jobs")),
        )


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--hidden", help="hidden layer sizes, comma separated (default 256)")
    p.add_argument("--epochs")
    p.add_argument("--lr")
    p.add_argument("--momentum")
    p.add_argument("--batch")
    p.add_argument("--classes", choices=["23", "5"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="heartsig", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--data-dir", dest="data_dir", help="record directory (env ECG_DATA_DIR, default ./data)")
    parser.add_argument("--seed")
    parser.add_argument("--config", help="key=value file supplying defaults for any flag")
    parser.add_argument("--jobs", help="worker cap for per-record stages")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch", help="download records (env ECG_BASE_URL)")
    p.add_argument("records", nargs="*")
    p.add_argument("--base-url", dest="base_url")

    p = sub.add_parser("detect", help="print detected beats as record,sample_index,time_s")
    p.add_argument("records", nargs="*")

    p = sub.add_parser("encode", help="detect, label and encode beats into a signature file")
    p.add_argument("records", nargs="*")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a classifier on a signature file")
    p.add_argument("--signatures", required=True)
    p.add_argument("--model", required=True, help="output model file")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a model on a signature file")
    p.add_argument("--signatures", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--compare", help="model in the other label space, for table1.csv")
    p.add_argument("--out-dir", dest="out_dir", required=True)

    p = sub.add_parser("noise-sweep", help="accuracy versus SNR on one record (CSV)")
    p.add_argument("--record", default="106")
    p.add_argument("--model", required=True)
    p.add_argument("--snr", help="start:stop:step or comma list (default 0:20:4)")

    p = sub.add_parser("online", help="stream a record through detect, encode and classify")
    p.add_argument("record")
    p.add_argument("--model", required=True)

    p = sub.add_parser("pipeline", help="run the whole offline phase")
    p.add_argument("records", nargs="*")
    p.add_argument("--out", required=True, help="artifact directory")
    p.add_argument("--noise-record", dest="noise_record")
    p.add_argument("--snr")
    p.add_argument("--n-train", dest="n_train")
    _add_train_flags(p)

    p = sub.add_parser("synth", help="write synthetic MIT-BIH-style records for offline trials")
    p.add_argument("--out", required=True)
    p.add_argument("--duration", type=float, default=300.0)
    return parser


def _class_names(model: mlp.MlpModel) -> tuple[str, ...]:
    return pipeline.class_names(23 if model.n_classes == 23 else 5)


def cmd_fetch(s: Settings) -> int:
    base = s.args.base_url or os.environ.get("ECG_BASE_URL") or DEFAULT_BASE_URL
    status = 0
    for name in s.records():
        try:
            fetch_record(name, base, s.data_dir())
            print(name)
        except FetchError as exc:
            log.error("%s", exc)
            status = EXIT_FETCH
    return status


def cmd_detect(s: Settings) -> int:
    out = sys.stdout
    out.write("record,sample_index,time_s\n")
    for name in s.records():
        try:
            record = pipeline.load_record(name, s.data_dir())
            dets = qrs.detect_qrs(record)
        except (OSError, HeartsigError) as exc:
            raise StageError(EXIT_DETECT, f"record {name}: {exc}") from exc
        for d in dets:
            out.write(f"{name},{d.sample_index_native},{d.sample_index_native / record.fs:.4f}\n")
    return 0


def cmd_encode(s: Settings) -> int:
    config = s.pipeline_config()
    entries = pipeline.build_dataset(config)
    write_signatures(entries, s.args.out)
    log.info("wrote %d signatures to %s", len(entries), s.args.out)
    return 0


def cmd_train(s: Settings) -> int:
    try:
        entries = read_signatures(s.args.signatures)
    except (OSError, HeartsigError) as exc:
        raise StageError(EXIT_TRAIN, str(exc)) from exc
    if not entries:
        raise StageError(EXIT_TRAIN, "signature file is empty")
    classes = int(s.get("classes"))
    try:
        model, report = pipeline.train_model(entries, classes, s.train_config())
    except HeartsigError as exc:
        raise StageError(EXIT_TRAIN, str(exc)) from exc
    mlp.save(model, s.args.model)
    if report.loss:
        log.info("final loss %.4f, training accuracy %.4f", report.loss[-1], report.accuracy[-1])
    return 0


def cmd_eval(s: Settings) -> int:
    try:
        entries = read_signatures(s.args.signatures)
        model = mlp.load(s.args.model)
        other = mlp.load(s.args.compare) if s.args.compare else None
    except (OSError, HeartsigError) as exc:
        raise StageError(EXIT_EVAL, str(exc)) from exc
    out = Path(s.args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    classes = 23 if model.n_classes == 23 else 5
    sigs = [e.signature for e in entries]
    records = [e.record for e in entries]
    try:
        pred, _ = mlp.predict_batch(model, sigs)
        rep = ev.report_from_predictions(pipeline.labels_for(entries, classes), pred, records,
                                         pipeline.class_names(classes), pipeline.normal_id(classes))
    except HeartsigError as exc:
        raise StageError(EXIT_EVAL, str(exc)) from exc
    stamp = f"model={Path(s.args.model).name}"
    (out / "report.json").write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True) + "\n")
    names = pipeline.class_names(classes)
    rows = [[k, names[k], int(rep.confusion[k].sum()), pipeline._fmt(rep.per_class_accuracy[k])]
            for k in range(len(names)) if names[k] != pipeline.RESERVED_SYMBOL]
    (out / "per_class.csv").write_text(pipeline._csv_text(rows, ["class_id", "class", "n_test", "accuracy"], stamp))
    (out / "summary.csv").write_text(pipeline._csv_text(
        [[f"sparse_signature_{classes}", pipeline._fmt(rep.patient_mean_accuracy),
          pipeline._fmt(rep.class_mean_accuracy), pipeline._fmt(rep.overall_accuracy),
          pipeline._fmt(rep.false_positive_rate), pipeline._fmt(rep.false_negative_rate),
          pipeline._fmt(rep.false_negative_to_normal_rate)]],
        ["technique", "patient_avg", "type_avg", "overall", "false_pos", "false_neg", "false_neg_to_normal"], stamp))
    if other is not None:
        by_classes = {classes: pred, (5 if classes == 23 else 23): mlp.predict_batch(other, sigs)[0]}
        if set(by_classes) != {23, 5}:
            raise StageError(EXIT_EVAL, "--compare must use the other label space")
        actual = pipeline.labels_for(entries, 5)
        mapped = pipeline.fine_to_aami_table()[by_classes[23]]
        a23 = ev.per_aami_accuracy(actual, mapped)
        a5 = ev.per_aami_accuracy(actual, by_classes[5])
        rows = [[n, pipeline._fmt(a23[k]), pipeline._fmt(a5[k])] for k, n in enumerate(pipeline.AAMI_CLASSES)]
        rows.append(["overall", pipeline._fmt(float(np.mean(mapped == actual))),
                     pipeline._fmt(float(np.mean(by_classes[5] == actual)))])
        (out / "table1.csv").write_text(pipeline._csv_text(rows, ["aami_class", "trained_23", "trained_5"], stamp))
    print(json.dumps({"overall_accuracy": rep.overall_accuracy, "n_beats": rep.n_beats}))
    return 0


def cmd_noise_sweep(s: Settings) -> int:
    try:
        model = mlp.load(s.args.model)
    except (OSError, HeartsigError) as exc:
        raise StageError(EXIT_EVAL, str(exc)) from exc
    record, anns = pipeline.load_labeled(s.args.record, s.data_dir())
    classes = 23 if model.n_classes == 23 else 5
    try:
        rows = ev.noise_sweep(model, record, anns, parse_snr(s.get("snr")), int(s.get("seed")),
                              pipeline.label_fn(classes))
    except HeartsigError as exc:
        raise StageError(EXIT_EVAL, str(exc)) from exc
    print("snr_db,accuracy")
    for snr, acc in rows:
        print(f"{snr:g},{acc:.6f}")
    return 0


def cmd_online(s: Settings) -> int:
    try:
        model = mlp.load(s.args.model)
        record = pipeline.load_record(s.args.record, s.data_dir())
    except (OSError, HeartsigError) as exc:
        raise StageError(EXIT_DETECT, f"record {s.args.record}: {exc}") from exc
    beats = pipeline.run_online(record, model)
    pipeline.write_online(beats, _class_names(model), sys.stdout)
    return 0


def cmd_pipeline(s: Settings) -> int:
    config = s.pipeline_config()
    if not config.records:
        raise ValueError("no records given")
    result = pipeline.run_pipeline(config, s.args.out)
    for name, path in sorted(result.files.items()):
        print(f"{name},{path}")
    return 0


def cmd_synth(s: Settings) -> int:
    from heartsig import synth

    for name in synth.write_database(s.args.out, s.args.duration, seed=int(s.get("seed"))):
        print(name)
    return 0


COMMANDS = {
    "fetch": cmd_fetch, "detect": cmd_detect, "encode": cmd_encode, "train": cmd_train,
    "eval": cmd_eval, "noise-sweep": cmd_noise_sweep, "online": cmd_online,
    "pipeline": cmd_pipeline, "synth": cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        config = read_config_file(args.config) if args.config else {}
        settings = Settings(args, config)
        return COMMANDS[args.command](settings)
    except StageError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
