"""Experiment drivers: identification, LOSOCV, fine-tuning and the data-fraction ablation."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import nn
from .datamodel import (
    InvalidInputError,
    NumericError,
    SubjectLog,
    ValidationError,
    WindowSet,
)
from .evaluation import METRIC_LABELS, METRICS, ClassReport, EvalReport, classification_report, \
    evaluate_forecast
from .ingest import synchronize
from .preprocess import (
    CurveParams,
    NormStats,
    WindowConfig,
    fit_norm_stats,
    normalize_windows,
    resample_and_split,
    windows_for_series,
)
from .sampling import SplitResult, SplitSpec, derive_seed, smote_oversample, stratified_split
from .train import History, TrainConfig, fine_tune_config, fit

log = logging.getLogger(__name__)

FRACTIONS = (1.0, 0.75, 0.5, 0.25)
TASKS = ("identify", "forecast")


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything that determines an experiment's outputs besides the cohort.

    ``window_stride`` and the hidden sizes default to a reduced desk-scale
    setting; ``ExperimentSpec.paper_scale`` restores the full configuration.
    """

    task: str = "forecast"
    ph_minutes: int = 30
    multimodal: bool = True
    patient_specific: bool = False
    data_fraction: float = 1.0
    seed: int = 0
    dataset_id: str = "synthetic"
    window_stride: int = 3
    bi_hidden: int = 16
    uni_hidden: int = 32
    fc_dim: int = 16
    dropout: float = 0.4
    max_missing_samples: int = 4
    curve: CurveParams = field(default_factory=CurveParams)
    train: TrainConfig = field(default_factory=TrainConfig.desk)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValidationError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.ph_minutes not in (30, 60):
            raise ValidationError(f"ph_minutes must be 30 or 60, got {self.ph_minutes}")
        if self.data_fraction not in FRACTIONS:
            raise ValidationError(f"data_fraction must be one of {FRACTIONS}")
        if self.data_fraction < 1.0 and not self.patient_specific:
            raise ValidationError("data_fraction < 1.0 requires patient_specific")
        if self.window_stride < 1:
            raise ValidationError("window_stride must be >= 1")
        if self.max_missing_samples < 0:
            raise ValidationError("max_missing_samples must be >= 0")

    @classmethod
    def paper_scale(cls, **kw) -> "ExperimentSpec":
        base = dict(window_stride=1, bi_hidden=128, uni_hidden=256, fc_dim=64,
                    train=TrainConfig.paper())
        base.update(kw)
        return cls(**base)

    def window_config(self) -> WindowConfig:
        if self.task == "identify":
            return WindowConfig(24, 1, self.window_stride, multimodal=True)
        return WindowConfig.for_horizon(self.ph_minutes, stride=self.window_stride,
                                        multimodal=self.multimodal)

    def model_config(self, n_classes: int | None = None) -> nn.ModelConfig:
        wc = self.window_config()
        classify = self.task == "identify"
        return nn.ModelConfig(
            n_features=wc.n_features, seq_len=wc.obs_len,
            out_dim=n_classes if classify else wc.horizon,
            task="classification" if classify else "regression",
            bi_hidden=self.bi_hidden, uni_hidden=self.uni_hidden, fc_dim=self.fc_dim,
            dropout=self.dropout,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def spec_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# --- shared data preparation --------------------------------------------------

def prepare_series(cohort: Sequence[SubjectLog], params: CurveParams = CurveParams(),
                   max_missing: int = 4) -> dict:
    """Synchronize and resample each subject; returns subject id -> series list."""
    ids = [s.subject_id for s in cohort]
    if len(set(ids)) != len(ids):
        raise InvalidInputError("subject ids must be unique")
    return {s.subject_id: resample_and_split(synchronize(s), params, max_missing=max_missing)
            for s in sorted(cohort, key=lambda s: s.subject_id)}


def _subject_windows(series: dict, config: WindowConfig) -> dict[str, WindowSet]:
    out = {}
    for sid, ser in series.items():
        ws = windows_for_series(ser, config)
        if len(ws) == 0:
            log.warning("subject %s has no valid windows; excluded", sid)
            continue
        out[sid] = ws
    return out


def window_norm_stats(windows: WindowSet) -> NormStats:
    """Per-channel min/max over the observation values of raw windows."""
    flat = windows.obs.reshape(-1, windows.obs.shape[2])
    return NormStats(flat.min(axis=0), flat.max(axis=0))


# --- patient identification -----------------------------------------------------

@dataclass
class IdentificationResult:
    report: ClassReport
    params: nn.ModelParams
    history: History
    class_names: list[str]
    split_sizes: tuple[int, int, int]


def run_patient_identification(cohort: Sequence[SubjectLog], spec: ExperimentSpec,
                               shuffle_labels: bool = False) -> IdentificationResult:
    """Train the classifier variant to tell subjects apart from 24-step windows."""
    if spec.task != "identify":
        raise ValidationError("run_patient_identification needs task='identify'")
    series = prepare_series(cohort, spec.curve, spec.max_missing_samples)
    per_subject = _subject_windows(series, spec.window_config())
    if len(per_subject) < 2:
        raise InvalidInputError("identification needs at least two subjects with windows")
    names = sorted(per_subject)
    windows = WindowSet.concat([per_subject[s] for s in names])
    if shuffle_labels:
        rng = np.random.default_rng(derive_seed(spec.seed, "shuffle"))
        windows = replace(windows, subject_ids=windows.subject_ids[rng.permutation(len(windows))])
    split = stratified_split(windows, SplitSpec(seed=derive_seed(spec.seed, "split")),
                             strata=windows.subject_ids.astype(str))
    stats = window_norm_stats(split.train)
    train, val, test = (normalize_windows(w, stats) for w in split)
    class_index = {s: i for i, s in enumerate(names)}
    model = nn.init_params(spec.model_config(len(names)), derive_seed(spec.seed, "init"))
    cfg = replace(spec.train, seed=derive_seed(spec.seed, "fit"))
    best, history = fit(model, train, val, cfg, loss="cross_entropy", class_index=class_index)
    logits = nn.predict(best, test.obs, cfg.batch_size)
    truth = np.array([class_index[s] for s in test.subject_ids], dtype=np.int64)
    report = classification_report(truth, logits.argmax(axis=1), len(names), names)
    return IdentificationResult(report, best, history, names, (len(train), len(val), len(test)))


# --- forecasting folds -------------------------------------------------------------

class SubjectData:
    """One subject's split windows with a log of which split was read and why."""

    def __init__(self, subject_id: str, split: SplitResult):
        self.subject_id = subject_id
        self._split = {"train": split.train, "val": split.val, "test": split.test}
        self.access_log: list[tuple[str, str]] = []

    def get(self, name: str, purpose: str) -> WindowSet:
        self.access_log.append((purpose, name))
        return self._split[name]

    def sizes(self) -> dict[str, int]:
        return {k: len(v) for k, v in self._split.items()}


@dataclass
class CohortData:
    series: dict
    subjects: dict[str, SubjectData]
    window_config: WindowConfig

    @property
    def ids(self) -> list[str]:
        return sorted(self.subjects)


def prepare_cohort(cohort: Sequence[SubjectLog], spec: ExperimentSpec) -> CohortData:
    """Resample, window and split every subject 64/16/20 stratified by event label."""
    series = prepare_series(cohort, spec.curve, spec.max_missing_samples)
    wc = spec.window_config()
    subjects = {}
    for sid, ws in _subject_windows(series, wc).items():
        split = stratified_split(ws, SplitSpec(seed=derive_seed(spec.seed, "split", sid)))
        subjects[sid] = SubjectData(sid, split)
    if len(subjects) < 2:
        raise InvalidInputError("need at least two subjects with windows")
    return CohortData(series, subjects, wc)


@dataclass
class FoldResult:
    subject_id: str
    params: nn.ModelParams | None
    stats: NormStats | None
    report: EvalReport | None
    history: History | None
    training_subjects: list[str] = field(default_factory=list)
    failed: bool = False
    error: str = ""


def _train_fold(data: CohortData, held_out: str, spec: ExperimentSpec) -> FoldResult:
    others = [s for s in data.ids if s != held_out]
    stats = fit_norm_stats([ser for s in others for ser in data.series[s]])
    purpose = f"losocv:{held_out}"
    train = WindowSet.concat([data.subjects[s].get("train", purpose) for s in others])
    val = WindowSet.concat([data.subjects[s].get("val", purpose) for s in others])
    train = smote_oversample(normalize_windows(train, stats), seed=derive_seed(spec.seed, "smote", held_out))
    val = normalize_windows(val, stats)
    model = nn.init_params(spec.model_config(), derive_seed(spec.seed, "init", held_out))
    cfg = replace(spec.train, seed=derive_seed(spec.seed, "fit", held_out))
    try:
        best, history = fit(model, train, val, cfg, error_scale=float(stats.span[0]) or 1.0)
    except NumericError as exc:
        return FoldResult(held_out, None, stats, None, None, others, True, str(exc))
    if history.diverged:
        return FoldResult(held_out, best, stats, None, history, others, True, "training diverged")
    report = _evaluate(best, data.subjects[held_out], stats, spec, "losocv-eval")
    return FoldResult(held_out, best, stats, report, history, others)


def _evaluate(params: nn.ModelParams, subject: SubjectData, stats: NormStats,
              spec: ExperimentSpec, purpose: str) -> EvalReport:
    test = normalize_windows(subject.get("test", purpose), stats)
    if len(test) == 0:
        raise InvalidInputError(f"subject {subject.subject_id} has an empty test split")
    pred = nn.predict(params, test.obs, spec.train.batch_size)
    return evaluate_forecast(test, pred, spec.ph_minutes)


def _fold_worker(args):
    data, sid, spec = args
    return _train_fold(data, sid, spec)


def run_losocv(cohort: Sequence[SubjectLog] | CohortData, spec: ExperimentSpec,
               folds: Sequence[str] | None = None, jobs: int = 1) -> dict[str, FoldResult]:
    """Leave-one-subject-out training; returns subject id -> fold result.

    Each fold trains on the other subjects' (SMOTE-balanced) train splits,
    stops early on their validation splits and is evaluated on the held-out
    subject's test split. Folds are independent, so ``jobs > 1`` runs them in
    worker processes with identical results.
    """
    if spec.task != "forecast":
        raise ValidationError("run_losocv needs task='forecast'")
    data = cohort if isinstance(cohort, CohortData) else prepare_cohort(cohort, spec)
    targets = data.ids if folds is None else sorted(folds)
    missing = set(targets) - set(data.ids)
    if missing:
        raise InvalidInputError(f"unknown fold subjects {sorted(missing)}")
    if jobs > 1 and len(targets) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fold_worker, [(data, s, spec) for s in targets]))
        # workers hold copies of the access logs; record the reads here too
        for s in targets:
            for other in data.ids:
                if other != s:
                    data.subjects[other].access_log += [(f"losocv:{s}", "train"), (f"losocv:{s}", "val")]
            data.subjects[s].access_log.append(("losocv-eval", "test"))
    else:
        results = [_train_fold(data, s, spec) for s in targets]
    for r in results:
        if r.failed:
            log.warning("fold %s failed: %s", r.subject_id, r.error)
    return {r.subject_id: r for r in results}


# --- personalization ---------------------------------------------------------------

@dataclass
class FineTuneResult:
    params: nn.ModelParams
    report: EvalReport
    history: History
    n_train_windows: int
    n_full_train_windows: int
    access_log: list[tuple[str, str]]

    def __iter__(self):
        return iter((self.params, self.report))


def subsample_indices(n: int, fraction: float, seed: int) -> np.ndarray:
    """Sorted ``floor(fraction * n)`` indices drawn uniformly without replacement."""
    if fraction >= 1.0:
        return np.arange(n)
    k = int(np.floor(fraction * n + 1e-9))
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=k, replace=False))


def fine_tune(base: FoldResult, subject: SubjectData, spec: ExperimentSpec,
              fraction: float | None = None) -> FineTuneResult:
    """Continue training a fold's model on the held-out subject's own data.

    Uses the subject's train split (subsampled to ``fraction``, default the
    spec's data fraction) with SMOTE, early-stops on the subject's validation
    split and only then reads the test split for evaluation.
    """
    if base.failed or base.params is None:
        raise InvalidInputError(f"fold {base.subject_id} failed; nothing to fine-tune")
    if base.subject_id != subject.subject_id:
        raise InvalidInputError("base model was not trained with this subject held out")
    fraction = spec.data_fraction if fraction is None else fraction
    if fraction not in FRACTIONS:
        raise ValidationError(f"fraction must be one of {FRACTIONS}")
    sid = subject.subject_id
    start = len(subject.access_log)
    full = subject.get("train", "fine_tune")
    if len(full) == 0:
        raise InvalidInputError(f"subject {sid} has an empty train split")
    idx = subsample_indices(len(full), fraction, derive_seed(spec.seed, "fraction", sid, repr(fraction)))
    if len(idx) == 0:
        raise InvalidInputError(f"fraction {fraction} leaves subject {sid} without train windows")
    train = normalize_windows(full.take(idx), base.stats)
    train = smote_oversample(train, seed=derive_seed(spec.seed, "ft-smote", sid, repr(fraction)))
    val = normalize_windows(subject.get("val", "fine_tune"), base.stats)
    cfg = replace(fine_tune_config(spec.train), seed=derive_seed(spec.seed, "ft", sid, repr(fraction)))
    params, history = fit(base.params, train, val, cfg, error_scale=float(base.stats.span[0]) or 1.0)
    report = _evaluate(params, subject, base.stats, spec, "fine_tune-eval")
    return FineTuneResult(params, report, history, len(idx), len(full),
                          subject.access_log[start:])


# --- whole experiments ----------------------------------------------------------------

@dataclass
class ForecastResult:
    folds: dict[str, FoldResult]
    personalized: dict[str, FineTuneResult]

    @property
    def failed(self) -> list[str]:
        return sorted(s for s, f in self.folds.items() if f.failed)

    def independent_report(self) -> EvalReport | None:
        reports = [f.report for _, f in sorted(self.folds.items()) if not f.failed]
        return EvalReport.merge(reports) if reports else None

    def personalized_report(self) -> EvalReport | None:
        reports = [r.report for _, r in sorted(self.personalized.items())]
        return EvalReport.merge(reports) if reports else None

    def report(self) -> EvalReport | None:
        return self.personalized_report() if self.personalized else self.independent_report()


def run_forecast(cohort: Sequence[SubjectLog] | CohortData, spec: ExperimentSpec,
                 folds: Sequence[str] | None = None, jobs: int = 1) -> ForecastResult:
    """LOSOCV, followed by per-subject fine-tuning when ``spec.patient_specific`` is set."""
    data = cohort if isinstance(cohort, CohortData) else prepare_cohort(cohort, spec)
    fold_results = run_losocv(data, spec, folds, jobs)
    tuned = {}
    if spec.patient_specific:
        for sid, fold in sorted(fold_results.items()):
            if not fold.failed:
                tuned[sid] = fine_tune(fold, data.subjects[sid], spec)
    return ForecastResult(fold_results, tuned)


@dataclass
class AblationResult:
    reference: EvalReport
    by_fraction: dict[float, EvalReport]
    runs: dict[float, dict[str, FineTuneResult]]

    def table(self) -> list[dict]:
        """One row per fraction plus the patient-independent reference row."""
        rows = []
        for label, report in [("reference", self.reference)] + \
                [(repr(f), self.by_fraction[f]) for f in FRACTIONS]:
            agg = report.aggregate
            row = {"fraction": label}
            for m in METRICS:
                row[METRIC_LABELS[m]] = getattr(agg, m)
            rows.append(row)
        return rows

    def long_rows(self) -> list[dict]:
        """Plot-ready rows ``(fraction, metric, value, subject)``; subject 'mean' is the aggregate."""
        out = []
        for label, report in [("reference", self.reference)] + \
                [(repr(f), self.by_fraction[f]) for f in FRACTIONS]:
            items = [("mean", report.aggregate)] + sorted(report.per_subject.items())
            for subject, m in items:
                for metric in METRICS:
                    out.append({"fraction": label, "metric": METRIC_LABELS[metric],
                                "value": getattr(m, metric), "subject": subject})
        return out


def run_ablation(cohort: Sequence[SubjectLog] | CohortData, spec_base: ExperimentSpec,
                 folds: dict[str, FoldResult] | None = None, jobs: int = 1) -> AblationResult:
    """Fine-tune every fold at each data fraction from the same LOSOCV bases."""
    if spec_base.task != "forecast":
        raise ValidationError("run_ablation needs task='forecast'")
    data = cohort if isinstance(cohort, CohortData) else prepare_cohort(cohort, spec_base)
    folds = folds if folds is not None else run_losocv(data, spec_base, jobs=jobs)
    failed = sorted(s for s, f in folds.items() if f.failed)
    if failed:
        raise NumericError(f"folds failed: {failed}")
    reference = EvalReport.merge([f.report for _, f in sorted(folds.items())])
    spec = replace(spec_base, patient_specific=True)
    runs, by_fraction = {}, {}
    for frac in FRACTIONS:
        runs[frac] = {sid: fine_tune(fold, data.subjects[sid], spec, frac)
                      for sid, fold in sorted(folds.items())}
        by_fraction[frac] = EvalReport.merge([r.report for _, r in sorted(runs[frac].items())])
    return AblationResult(reference, by_fraction, runs)
