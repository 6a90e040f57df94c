"""Evaluation protocol: stratified split, confusion matrices, false rates, noise sweeps."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from heartsig import mlp, noise, qrs
from heartsig.errors import ConfigError
from heartsig.ingest import AAMI_CLASSES, FINE_INDEX, BeatAnnotation, EcgRecord, aami_index
from heartsig.signature import DEFAULT_ENCODER, EncoderConfig, encode_beats

FULL_DATABASE_RECORDS = 48
FULL_TRAIN_SIZE = 6500


@dataclass
class DatasetSplit:
    train: np.ndarray  # indices into the beat list
    test: np.ndarray
    seed: int
    train_histogram: dict = field(default_factory=dict)
    test_histogram: dict = field(default_factory=dict)


def desk_train_size(n_beats: int, n_records: int) -> int:
    """6500 beats for the full database, otherwise 5% of beats with a floor of 200."""
    if n_records >= FULL_DATABASE_RECORDS:
        return min(FULL_TRAIN_SIZE, n_beats)
    return min(n_beats, max(200, int(round(0.05 * n_beats))))


def class_quotas(counts: dict[Hashable, int], n_train: int) -> dict[Hashable, int]:
    """Proportional per-class quotas with a floor of one, summing to ``n_train``.

    Quotas start at ``max(1, floor(n_train * share))`` capped by the class
    size. Overshoot is taken back from the largest quotas; the caller fills
    any shortfall at random.
    """
    total = sum(counts.values())
    if n_train > total:
        raise ConfigError(f"n_train={n_train} exceeds the {total} available beats")
    present = [c for c, k in counts.items() if k > 0]
    if n_train < len(present):
        raise ConfigError(f"n_train={n_train} cannot cover {len(present)} classes")
    quotas = {c: min(counts[c], max(1, (n_train * counts[c]) // total)) for c in present}
    excess = sum(quotas.values()) - n_train
    while excess > 0:
        c = max((c for c in present if quotas[c] > 1), key=lambda c: (quotas[c], -present.index(c)))
        quotas[c] -= 1
        excess -= 1
    return quotas


def split_dataset(labels: Sequence[Hashable], n_train: int, seed: int) -> DatasetSplit:
    """Stratified random split; every class gets at least one training member."""
    labels = list(labels)
    counts = Counter(labels)
    quotas = class_quotas(dict(sorted(counts.items(), key=lambda kv: str(kv[0]))), n_train)
    rng = np.random.default_rng(seed)
    by_class: dict[Hashable, list[int]] = {}
    for i, c in enumerate(labels):
        by_class.setdefault(c, []).append(i)
    chosen: list[int] = []
    for c in sorted(by_class, key=str):
        members = np.asarray(by_class[c])
        chosen.extend(rng.choice(members, size=quotas[c], replace=False).tolist())
    short = n_train - len(chosen)
    if short > 0:
        rest = np.setdiff1d(np.arange(len(labels)), chosen)
        chosen.extend(rng.choice(rest, size=short, replace=False).tolist())
    train = np.sort(np.asarray(chosen, dtype=np.int64))
    test = np.setdiff1d(np.arange(len(labels)), train)
    return DatasetSplit(
        train, test, seed,
        dict(Counter(labels[i] for i in train)),
        dict(Counter(labels[i] for i in test)),
    )


def relabel_aami(symbols: Sequence[str]) -> np.ndarray:
    """AAMI class ids for beat symbols."""
    return np.array([aami_index(s) for s in symbols], dtype=np.int64)


def symbols_to_fine(symbols: Sequence[str]) -> np.ndarray:
    return np.array([FINE_INDEX[s] for s in symbols], dtype=np.int64)


def confusion_matrix(actual, predicted, n_classes: int) -> np.ndarray:
    """Counts indexed ``[actual, predicted]``."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(actual, dtype=np.int64), np.asarray(predicted, dtype=np.int64)), 1)
    return cm


def per_class_accuracy(cm: np.ndarray) -> np.ndarray:
    """Diagonal over actual-class totals; NaN for classes absent from the test set."""
    totals = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(totals > 0, np.diag(cm) / np.maximum(totals, 1), np.nan)


@dataclass
class FalseRates:
    false_positive: float
    false_negative: float
    false_negative_to_normal: float


def false_rates(cm: np.ndarray, normal_class_id: int) -> FalseRates:
    """False alarm and miss rates.

    False positive: an actually-normal beat predicted as any other class.
    False negative: an actually-abnormal beat predicted as any class other
    than its own. The conventional miss rate (abnormal predicted normal) is
    reported alongside.
    """
    cm = np.asarray(cm)
    n_normal = cm[normal_class_id].sum()
    fp = (n_normal - cm[normal_class_id, normal_class_id]) / n_normal if n_normal else 0.0
    abnormal = [k for k in range(cm.shape[0]) if k != normal_class_id]
    n_abn = cm[abnormal].sum()
    if n_abn:
        wrong = sum(cm[k].sum() - cm[k, k] for k in abnormal)
        fn = wrong / n_abn
        fn_normal = cm[abnormal, normal_class_id].sum() / n_abn
    else:
        fn = fn_normal = 0.0
    return FalseRates(float(fp), float(fn), float(fn_normal))


@dataclass
class EvalReport:
    class_names: tuple[str, ...]
    confusion: np.ndarray
    overall_accuracy: float
    per_class_accuracy: np.ndarray
    per_patient_accuracy: dict[str, float]
    false_positive_rate: float
    false_negative_rate: float
    false_negative_to_normal_rate: float

    @property
    def n_beats(self) -> int:
        return int(self.confusion.sum())

    @property
    def class_mean_accuracy(self) -> float:
        return float(np.nanmean(self.per_class_accuracy))

    @property
    def patient_mean_accuracy(self) -> float:
        return float(np.mean(list(self.per_patient_accuracy.values())))

    def to_dict(self) -> dict:
        return {
            "n_beats": self.n_beats,
            "overall_accuracy": self.overall_accuracy,
            "patient_mean_accuracy": self.patient_mean_accuracy,
            "class_mean_accuracy": self.class_mean_accuracy,
            "false_positive_rate": self.false_positive_rate,
            "false_negative_rate": self.false_negative_rate,
            "false_negative_to_normal_rate": self.false_negative_to_normal_rate,
            "per_class_accuracy": {
                name: (None if np.isnan(a) else float(a))
                for name, a in zip(self.class_names, self.per_class_accuracy)
            },
            "per_patient_accuracy": dict(sorted(self.per_patient_accuracy.items())),
            "confusion": self.confusion.tolist(),
        }


def report_from_predictions(actual, predicted, records: Sequence[str], class_names: Sequence[str],
                            normal_class_id: int = 0) -> EvalReport:
    actual = np.asarray(actual, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if actual.size == 0:
        raise ConfigError("empty test set")
    cm = confusion_matrix(actual, predicted, len(class_names))
    per_patient = {}
    recs = np.asarray(records)
    for r in sorted(set(records)):
        mask = recs == r
        per_patient[str(r)] = float(np.mean(actual[mask] == predicted[mask]))
    rates = false_rates(cm, normal_class_id)
    return EvalReport(
        tuple(class_names), cm, float(np.mean(actual == predicted)), per_class_accuracy(cm),
        per_patient, rates.false_positive, rates.false_negative, rates.false_negative_to_normal,
    )


def evaluate(model: mlp.MlpModel, signatures, labels, records: Sequence[str],
             class_names: Sequence[str], normal_class_id: int = 0) -> EvalReport:
    """Score ``model`` on labelled test signatures."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ConfigError("empty test set")
    predicted, _ = mlp.predict_batch(model, list(signatures))
    return report_from_predictions(labels, predicted, records, class_names, normal_class_id)


def per_aami_accuracy(actual_aami, predicted_aami) -> np.ndarray:
    return per_class_accuracy(confusion_matrix(actual_aami, predicted_aami, len(AAMI_CLASSES)))


# -- noise sweep --------------------------------------------------------------------------

def classify_record(model: mlp.MlpModel, record: EcgRecord, annotations: Sequence[BeatAnnotation],
                    label_of, encoder: EncoderConfig = DEFAULT_ENCODER,
                    detector: qrs.DetectorConfig | None = None) -> float:
    """Fraction of reference beats that are detected and assigned their own class.

    ``label_of`` maps a beat symbol to the model's class id.
    """
    if not annotations:
        raise ConfigError("record has no reference beats")
    dets = qrs.detect_qrs(record, detector)
    if not dets:
        return 0.0
    sigs = encode_beats(record.millivolts(0), [d.sample_index_native for d in dets], encoder)
    predicted, _ = mlp.predict_batch(model, sigs)
    match = qrs.match_detections(dets, annotations, fs=record.fs)
    correct = sum(int(predicted[i]) == label_of(annotations[k].symbol) for i, k in match.pairs)
    return correct / len(annotations)


def noise_sweep(model: mlp.MlpModel, record: EcgRecord, annotations: Sequence[BeatAnnotation],
                snr_list: Sequence[float], seed: int, label_of,
                encoder: EncoderConfig = DEFAULT_ENCODER,
                detector: qrs.DetectorConfig | None = None) -> list[tuple[float, float]]:
    """Accuracy of the full detect-encode-classify chain on noisy copies of ``record``."""
    out = []
    for snr in snr_list:
        noisy = noise.noisy_record(record, snr, noise.derive_seed(seed, snr))
        out.append((float(snr), classify_record(model, noisy, annotations, label_of, encoder, detector)))
    return out


def least_squares_slope(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    return float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))
