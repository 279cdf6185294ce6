"""Patient-disjoint cross-validation, metrics, Top-K thresholds and permutation importance."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy import stats

from . import numerics as nx
from .cohort import Cohort, FeatureSpec, PatientRecord, filter_window
from .fusion import PedCaModel, TrainConfig, train
from .tabular import feature_order
from .textual import assemble_from_parts, document_parts, is_lab, tokenize

log = logging.getLogger(__name__)

METRIC_NAMES = ("bal_acc", "f1", "mcc", "auprc", "auroc", "ppv", "npv", "sensitivity", "specificity")
IMPORTANCE_COLUMNS = ("feature", "mean", "p95_low", "p95_high", "p_value")
SCORE_CHUNK = 64


class MetricError(ValueError):
    """A metric is undefined for the given labels (e.g. a single class)."""


class SplitError(ValueError):
    pass


class FoldWarning(UserWarning):
    pass


# -- metrics --------------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _check_pair(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary")
    return scores, labels.astype(np.int64)


def confusion_at_threshold(scores, labels, threshold: float) -> ConfusionCounts:
    """Predict positive iff score >= threshold."""
    scores, labels = _check_pair(scores, labels)
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)), fp=int(np.sum(pred & ~pos)), fn=int(np.sum(~pred & pos)), tn=int(np.sum(~pred & ~pos))
    )


def _ratio(num: float, den: float, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def point_metrics(c: ConfusionCounts) -> tuple[dict[str, float], list[str]]:
    """Threshold metrics and the names of those whose ratio was 0/0 (reported as 0)."""
    flags: list[str] = []
    sens = _ratio(c.tp, c.tp + c.fn, "sensitivity", flags)
    spec = _ratio(c.tn, c.tn + c.fp, "specificity", flags)
    ppv = _ratio(c.tp, c.tp + c.fp, "ppv", flags)
    npv = _ratio(c.tn, c.tn + c.fn, "npv", flags)
    f1 = _ratio(2 * ppv * sens, ppv + sens, "f1", flags)
    # integer product keeps the denominator exact before the square root
    den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    mcc = _ratio(c.tp * c.tn - c.fp * c.fn, math.sqrt(den), "mcc", flags)
    values = {
        "bal_acc": (sens + spec) / 2,
        "f1": f1,
        "mcc": mcc,
        "ppv": ppv,
        "npv": npv,
        "sensitivity": sens,
        "specificity": spec,
    }
    return values, flags


def auroc(scores, labels) -> float:
    """P(random positive outscores random negative), ties count 1/2."""
    scores, labels = _check_pair(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("auroc needs at least one positive and one negative")
    ranks = stats.rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision over positives ranked by descending score, ties in input order."""
    scores, labels = _check_pair(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("auprc needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float(precision[hits == 1].sum() / n_pos)


def calibrate_threshold_topk(scores, labels=None, k_fraction: float | None = None) -> float:
    """Score of the ceil(k*n)-th highest record; k defaults to the prevalence of ``labels``."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("no scores to calibrate on")
    if k_fraction is None:
        if labels is None:
            raise ValueError("k_fraction or labels required")
        k_fraction = float(np.mean(labels))
    if not 0 < k_fraction <= 1:
        raise ValueError(f"k_fraction must lie in (0, 1], got {k_fraction}")
    # rounding guards against products like 0.07 * 100 = 7.000000000000001
    m = min(scores.size, max(1, math.ceil(round(k_fraction * scores.size, 9))))
    return float(np.sort(scores)[::-1][m - 1])


# -- folds -----------------------------------------------------------------------


def kfold_patient_split(cohort: Cohort, k: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """(train, test) admission indices with every patient confined to a single test fold."""
    if k < 2:
        raise SplitError("k must be >= 2")
    patient_ids = np.asarray(cohort.patient_ids)
    patients = np.unique(patient_ids)
    if patients.size < k:
        raise SplitError(f"{patients.size} patients cannot fill {k} folds")
    shuffled = np.random.default_rng(seed).permutation(patients)
    labels = cohort.labels
    folds = []
    for i, group in enumerate(np.array_split(shuffled, k)):
        in_test = np.isin(patient_ids, group)
        test, train_idx = np.flatnonzero(in_test), np.flatnonzero(~in_test)
        if not labels[test].any():
            warnings.warn(f"fold {i} has no positive admissions", FoldWarning, stacklevel=2)
        folds.append((train_idx, test))
    return folds


# -- learners ---------------------------------------------------------------------


class Predictor(Protocol):
    def predict_proba(self, records: Sequence[PatientRecord]) -> np.ndarray: ...


class Learner(Protocol):
    name: str

    def fit(self, records: Sequence[PatientRecord], schema: Sequence[FeatureSpec]) -> Predictor: ...


MODE_NAMES = {"fused": "pedca-ft", "tabular-only": "tabular-only", "textual-only": "textual-only"}


@dataclass(frozen=True)
class PedCaLearner:
    config: TrainConfig = field(default_factory=TrainConfig)

    @property
    def name(self) -> str:
        return MODE_NAMES[self.config.mode]

    def fit(self, records, schema) -> PedCaModel:
        model, _ = train(records, schema, self.config)
        return model


# -- permutation importance --------------------------------------------------------


@dataclass(frozen=True)
class ImportanceRow:
    feature: str
    mean: float
    p95_low: float
    p95_high: float
    p_value: float

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def permute_feature(records: Sequence[PatientRecord], spec: FeatureSpec, perm: np.ndarray) -> list[PatientRecord]:
    """Record i receives the raw data of ``spec`` from record perm[i]; everything else is kept."""
    out = []
    for i, r in enumerate(records):
        donor = records[perm[i]]
        if spec.kind == "static":
            static = dict(r.static_values)
            static.pop(spec.name, None)
            if spec.name in donor.static_values:
                static[spec.name] = donor.static_values[spec.name]
            out.append(dataclasses.replace(r, static_values=static))
        else:
            series = dict(r.temporal_series)
            series.pop(spec.name, None)
            if spec.name in donor.temporal_series:
                series[spec.name] = donor.temporal_series[spec.name]
            out.append(dataclasses.replace(r, temporal_series=series))
    return out


def summarize_drops(feature: str, drops: np.ndarray, confidence: float = 0.95) -> ImportanceRow:
    """Mean drop, normal-approximation interval and one-sided t-test p-value for mean > 0."""
    n = drops.size
    mean = float(drops.mean())
    sd = float(drops.std(ddof=1)) if n > 1 else 0.0
    half = float(stats.norm.ppf(0.5 + confidence / 2)) * sd / math.sqrt(n)
    if sd == 0.0:
        p_value = 0.0 if mean > 0 else 1.0
    else:
        p_value = float(stats.t.sf(mean / (sd / math.sqrt(n)), df=n - 1))
    return ImportanceRow(feature, mean, mean - half, mean + half, p_value)


class _GenericScorer:
    """Rebuild the permuted records and call predict_proba."""

    def __init__(self, predictor: Predictor, records: Sequence[PatientRecord]):
        self.predictor = predictor
        self.records = list(records)

    def baseline(self) -> np.ndarray:
        return self.predictor.predict_proba(self.records)

    def permuted(self, spec: FeatureSpec, perm: np.ndarray) -> np.ndarray:
        return self.predictor.predict_proba(permute_feature(self.records, spec, perm))


class _PedCaScorer:
    """Permutation scoring for PedCaModel that re-encodes only the records whose inputs change.

    Both views read a feature only through its own column / text fragment, so a shuffle
    permutes those pieces and the untouched embeddings are reused.
    """

    def __init__(self, model: PedCaModel, records: Sequence[PatientRecord]):
        self.model = model
        cfg = model.config
        self.use_tab = cfg.mode != "textual-only"
        self.use_txt = cfg.mode != "tabular-only"
        windowed = [filter_window(r, cfg.tau) for r in records]
        self.tab = model.preprocessor.transform(windowed)
        numeric, categorical = feature_order(model.schema)
        self.column = {s.name: ("num", j) for j, s in enumerate(numeric)}
        self.column.update({s.name: ("cat", j) for j, s in enumerate(categorical)})
        self.parts = [document_parts(r, model.schema) for r in windowed] if self.use_txt else []
        self.tokens = [self._tokens(p) for p in self.parts]
        self.h_tab = self._encode_tab(self.tab)
        self.h_txt = self._encode_txt(self.tokens or [[0]] * len(windowed))

    def _encode_tab(self, batch) -> np.ndarray:
        with nx.no_grad():
            return np.concatenate([
                self.model.encode_tabular(batch.take(np.arange(i, min(i + SCORE_CHUNK, len(batch))))).data
                for i in range(0, len(batch), SCORE_CHUNK)
            ])

    def _encode_txt(self, tokens) -> np.ndarray:
        with nx.no_grad():
            return np.concatenate([
                self.model.encode_text(tokens[i : i + SCORE_CHUNK]).data for i in range(0, len(tokens), SCORE_CHUNK)
            ])

    def _tokens(self, parts) -> list[int]:
        cfg = self.model.config
        return tokenize(assemble_from_parts(parts, self.model.schema), self.model.vocab, cfg.max_sequence_length)

    def _predict(self, h_tab: np.ndarray, h_txt: np.ndarray) -> np.ndarray:
        with nx.no_grad():
            return self.model.head(h_tab, h_txt).data

    def baseline(self) -> np.ndarray:
        return self._predict(self.h_tab, self.h_txt)

    def _permuted_tab(self, spec: FeatureSpec, perm: np.ndarray) -> np.ndarray:
        kind, j = self.column[spec.name]
        batch = dataclasses.replace(self.tab)
        if kind == "num":
            batch.values = self.tab.values.copy()
            batch.observed = self.tab.observed.copy()
            batch.values[:, j] = self.tab.values[perm, j]
            batch.observed[:, j] = self.tab.observed[perm, j]
            changed = (batch.values[:, j] != self.tab.values[:, j]) | (batch.observed[:, j] != self.tab.observed[:, j])
        else:
            batch.categories = self.tab.categories.copy()
            batch.categories[:, j] = self.tab.categories[perm, j]
            changed = batch.categories[:, j] != self.tab.categories[:, j]
        h = self.h_tab.copy()
        rows = np.flatnonzero(changed)
        if rows.size:
            h[rows] = self._encode_tab(batch.take(rows))
        return h

    def _permuted_txt(self, spec: FeatureSpec, perm: np.ndarray) -> np.ndarray:
        h = self.h_txt.copy()
        rows, new_tokens = [], []
        for i, donor in enumerate(perm):
            if is_lab(spec):
                store = "lab_flags"
            else:
                store = "fragments"
            mine, theirs = getattr(self.parts[i], store), getattr(self.parts[donor], store)
            if mine.get(spec.name) == theirs.get(spec.name):
                continue
            parts = dataclasses.replace(self.parts[i], **{store: {**mine, spec.name: theirs.get(spec.name)}})
            tokens = self._tokens(parts)
            if tokens != self.tokens[i]:
                rows.append(i)
                new_tokens.append(tokens)
        if rows:
            h[rows] = self._encode_txt(new_tokens)
        return h

    def permuted(self, spec: FeatureSpec, perm: np.ndarray) -> np.ndarray:
        h_tab = self._permuted_tab(spec, perm) if self.use_tab else self.h_tab
        h_txt = self._permuted_txt(spec, perm) if self.use_txt else self.h_txt
        return self._predict(h_tab, h_txt)


def permutation_importance(
    model: Predictor,
    records: Sequence[PatientRecord],
    schema: Sequence[FeatureSpec] | None = None,
    metric: Callable = auroc,
    n_shuffles: int = 5,
    confidence: float = 0.95,
    seed: int = 0,
    features: Sequence[str] | None = None,
    fast: bool = True,
) -> list[ImportanceRow]:
    """Baseline metric minus metric after shuffling each feature's raw data across records.

    Rows follow schema order. Shuffles for a feature are seeded from its schema position,
    so restricting ``features`` does not change the other rows.
    """
    if len(records) < 2:
        raise ValueError("permutation importance needs at least 2 records")
    if n_shuffles < 1:
        raise ValueError("n_shuffles must be >= 1")
    if schema is None:
        schema = model.schema
    labels = np.array([r.label for r in records])
    if fast and isinstance(model, PedCaModel):
        scorer = _PedCaScorer(model, records)
    else:
        scorer = _GenericScorer(model, records)
    base = metric(scorer.baseline(), labels)
    wanted = None if features is None else set(features)
    if wanted is not None and wanted - {s.name for s in schema}:
        raise ValueError(f"unknown features {sorted(wanted - {s.name for s in schema})}")
    seeds = np.random.SeedSequence(seed).spawn(len(schema))
    rows = []
    for spec, ss in zip(schema, seeds):
        if wanted is not None and spec.name not in wanted:
            continue
        rng = np.random.default_rng(ss)
        drops = np.empty(n_shuffles)
        for s in range(n_shuffles):
            perm = rng.permutation(len(records))
            drops[s] = base - metric(scorer.permuted(spec, perm), labels)
        rows.append(summarize_drops(spec.name, drops, confidence))
    return rows


def rank_importance(rows: Sequence[ImportanceRow]) -> list[ImportanceRow]:
    """Sorted by mean importance, descending; ties keep schema order."""
    return sorted(rows, key=lambda r: -r.mean)


def importance_csv(rows: Sequence[ImportanceRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(IMPORTANCE_COLUMNS)
    for r in rows:
        writer.writerow([r.feature, repr(r.mean), repr(r.p95_low), repr(r.p95_high), repr(r.p_value)])
    return buf.getvalue()


# -- cross-validation --------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    n_train: int
    n_test: int
    n_test_positive: int
    threshold: float
    metrics: dict[str, float]
    undefined: list[str]
    test_scores: np.ndarray | None = None
    predictor: Predictor | None = None

    def to_json(self) -> dict:
        return {
            "fold": self.fold,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "n_test_positive": self.n_test_positive,
            "threshold": self.threshold,
            "metrics": {m: self.metrics[m] for m in METRIC_NAMES},
            "undefined": list(self.undefined),
        }


@dataclass
class EvaluationReport:
    model: str
    k: int
    seed: int
    folds: list[FoldResult]
    importance: list[ImportanceRow] | None = None
    config: dict = field(default_factory=dict)

    def aggregate(self) -> dict[str, dict[str, float]]:
        """Mean and sample standard deviation of each metric across folds."""
        out = {}
        for m in METRIC_NAMES:
            vals = np.array([f.metrics[m] for f in self.folds])
            std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            out[m] = {"mean": float(vals.mean()), "std": std}
        return out

    def mean(self, metric: str) -> float:
        return self.aggregate()[metric]["mean"]

    def to_json(self) -> dict:
        out = {
            "model": self.model,
            "k": self.k,
            "seed": self.seed,
            "config": self.config,
            "folds": [f.to_json() for f in self.folds],
            "aggregate": self.aggregate(),
        }
        if self.importance is not None:
            out["importance"] = [r.to_json() for r in self.importance]
        return out

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["fold", "threshold", *METRIC_NAMES])
        for f in self.folds:
            writer.writerow([f.fold, repr(f.threshold), *(repr(f.metrics[m]) for m in METRIC_NAMES)])
        agg = self.aggregate()
        writer.writerow(["mean", "", *(repr(agg[m]["mean"]) for m in METRIC_NAMES)])
        writer.writerow(["std", "", *(repr(agg[m]["std"]) for m in METRIC_NAMES)])
        return buf.getvalue()


def calibration_split(patient_ids: Sequence[str], fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(fit, calibration) indices, splitting whole patients; ``fraction`` of patients go to calibration."""
    patient_ids = np.asarray(patient_ids)
    patients = np.random.default_rng(seed).permutation(np.unique(patient_ids))
    n_cal = int(round(fraction * patients.size))
    if fraction > 0 and not 1 <= n_cal < patients.size:
        raise SplitError(f"calibration fraction {fraction} leaves an empty side")
    in_cal = np.isin(patient_ids, patients[:n_cal])
    return np.flatnonzero(~in_cal), np.flatnonzero(in_cal)


def evaluate_fold(fold: int, predictor: Predictor, calibration_records, test_records,
                  k_fraction: float | None = None) -> FoldResult:
    """Top-K threshold from calibration-side scores, metrics on the test side.

    ``k_fraction`` defaults to the prevalence of the calibration records.
    """
    y_cal = np.array([r.label for r in calibration_records])
    y_test = np.array([r.label for r in test_records])
    threshold = calibrate_threshold_topk(predictor.predict_proba(calibration_records), y_cal, k_fraction)
    scores = predictor.predict_proba(test_records)
    values, undefined = point_metrics(confusion_at_threshold(scores, y_test, threshold))
    for name, fn in (("auroc", auroc), ("auprc", auprc)):
        try:
            values[name] = fn(scores, y_test)
        except MetricError:
            values[name] = 0.0
            undefined.append(name)
    return FoldResult(fold, len(calibration_records), len(test_records), int(y_test.sum()), threshold, values,
                      undefined, test_scores=scores, predictor=predictor)


def run_cross_validation(cohort: Cohort, learner: Learner, k: int = 5, seed: int = 0,
                         calibration_fraction: float = 0.2,
                         progress: Callable[[FoldResult], None] | None = None) -> EvaluationReport:
    """Patient-disjoint k-fold evaluation.

    Within each training side, ``calibration_fraction`` of the patients are held out:
    the learner fits on the rest and the Top-K threshold (k = training-side prevalence)
    is set on the held-out scores. With 0 the threshold uses in-sample training scores.
    """
    if not 0 <= calibration_fraction < 1:
        raise ValueError("calibration_fraction must lie in [0, 1)")
    records = list(cohort.records)
    patient_ids = np.asarray(cohort.patient_ids)
    folds = []
    for i, (train_idx, test_idx) in enumerate(kfold_patient_split(cohort, k, seed)):
        k_fraction = float(np.mean([records[j].label for j in train_idx]))
        if calibration_fraction > 0:
            fit_pos, cal_pos = calibration_split(patient_ids[train_idx], calibration_fraction, seed + 1 + i)
            fit_idx, cal_idx = train_idx[fit_pos], train_idx[cal_pos]
        else:
            fit_idx = cal_idx = train_idx
        predictor = learner.fit([records[j] for j in fit_idx], cohort.schema)
        result = evaluate_fold(i, predictor, [records[j] for j in cal_idx], [records[j] for j in test_idx], k_fraction)
        result.n_train = len(fit_idx)
        log.info("fold %d: auroc %.4f bal_acc %.4f", i, result.metrics["auroc"], result.metrics["bal_acc"])
        if progress is not None:
            progress(result)
        folds.append(result)
    return EvaluationReport(learner.name, k, seed, folds)
