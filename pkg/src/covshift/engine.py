"""Covariate-shift audit: can a tree tell inspected customers from the rest?

The selected rows get ``s = 1``, the others ``s = 0``. The merged table is
split once into stratified folds; ``n_models`` randomly drawn tree
configurations are each trained and tested on every fold. A model's score is
the mean of its defined test MCCs; the audit score is the best model's
score, and its reliability the population standard deviation of that
model's fold MCCs.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng as rngmod
from .dataset import CustomerTable, DataError, LabeledTable, label_selection, split_by_flag
from .metrics import confusion, mcc
from .tree import PURITY_MEASURES, ClassWeights, TreeModelParams, fit, predict, presort

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.2
SHIFTED = "shifted"
NOT_SHIFTED = "not_shifted"
LOW_MCC_CAVEAT = (
    "A score at or below the threshold is not evidence that the samples share "
    "a distribution; only a high score is an indicator of covariate shift."
)


class InsufficientRowsError(DataError):
    pass


class AuditInconclusive(RuntimeError):
    """No model produced a single defined test-fold MCC."""

    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


@dataclass(frozen=True)
class ParamRanges:
    """Half-open integer ranges ``[lo, hi)`` plus the purity measure choices."""

    max_leaves: tuple[int, int] = (2, 20)
    max_depth: tuple[int, int] = (1, 20)
    purity_measures: tuple[str, ...] = PURITY_MEASURES
    min_samples_leaf: tuple[int, int] = (1, 20)
    min_samples_split: tuple[int, int] = (2, 20)

    def __post_init__(self):
        floors = {"max_leaves": 2, "max_depth": 1, "min_samples_leaf": 1, "min_samples_split": 2}
        for name, floor in floors.items():
            lo, hi = getattr(self, name)
            if not (floor <= lo < hi):
                raise ValueError(f"{name}: invalid range [{lo}, {hi})")
        if not self.purity_measures or any(m not in PURITY_MEASURES for m in self.purity_measures):
            raise ValueError(f"purity measures must be drawn from {PURITY_MEASURES}")

    def as_dict(self) -> dict:
        return {
            "max_leaves": list(self.max_leaves),
            "max_depth": list(self.max_depth),
            "purity_measures": list(self.purity_measures),
            "min_samples_leaf": list(self.min_samples_leaf),
            "min_samples_split": list(self.min_samples_split),
        }


@dataclass(frozen=True)
class AuditConfig:
    k: int = 10
    n_models: int = 100
    seed: int = 0
    ranges: ParamRanges = ParamRanges()
    # "balanced" or explicit ClassWeights
    class_weighting: object = "balanced"
    # parallelism only; never changes results
    workers: int = 1

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.n_models < 1:
            raise ValueError("n_models must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.class_weighting != "balanced" and not isinstance(self.class_weighting, ClassWeights):
            raise ValueError("class_weighting must be 'balanced' or ClassWeights")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def as_dict(self) -> dict:
        cw = self.class_weighting
        return {
            "k": self.k,
            "n_models": self.n_models,
            "seed": self.seed,
            "ranges": self.ranges.as_dict(),
            "class_weighting": cw if cw == "balanced" else {"w0": cw.w0, "w1": cw.w1},
        }


@dataclass(frozen=True)
class ModelTrace:
    index: int
    params: TreeModelParams
    fold_mccs: tuple  # float or None per fold
    fold_digest: str

    @property
    def defined(self) -> list[float]:
        return [m for m in self.fold_mccs if m is not None]

    @property
    def folds_used(self) -> int:
        return len(self.defined)

    @property
    def mean(self) -> float | None:
        d = self.defined
        return statistics.fmean(d) if d else None

    @property
    def std(self) -> float | None:
        d = self.defined
        return statistics.pstdev(d) if d else None


@dataclass(frozen=True)
class AuditResult:
    mcc_max_mean: float
    reliability: float
    winning_params: TreeModelParams
    winning_index: int
    per_model_trace: tuple[ModelTrace, ...] = field(repr=False)
    folds_skipped: int
    n_selected: int
    n_not_selected: int

    @property
    def total_folds_skipped(self) -> int:
        return sum(len(t.fold_mccs) - t.folds_used for t in self.per_model_trace)


def stratified_folds(labels, k: int, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Deterministic stratified k-fold partition.

    Each class is shuffled by its own draw from the seed's fold stream, then
    the concatenated (class 0, class 1) order is dealt round-robin, so every
    class splits across folds as evenly as possible.
    """
    if isinstance(labels, LabeledTable):
        labels = labels.s
    s = np.asarray(labels)
    if k < 2:
        raise ValueError("k must be >= 2")
    idx0 = np.flatnonzero(s == 0)
    idx1 = np.flatnonzero(s == 1)
    if len(idx0) < k or len(idx1) < k:
        raise InsufficientRowsError(
            f"insufficient rows: {k} folds need at least {k} rows per class, "
            f"got {len(idx1)} selected and {len(idx0)} not selected"
        )
    g = rngmod.stream(seed, "folds")
    order = np.concatenate([g.permutation(idx0), g.permutation(idx1)])
    fold_of = np.empty(len(s), dtype=np.int64)
    fold_of[order] = np.arange(len(order)) % k
    folds = []
    for j in range(k):
        test = np.flatnonzero(fold_of == j)
        train = np.flatnonzero(fold_of != j)
        folds.append((train, test))
    return folds


def sample_model_params(g: np.random.Generator, ranges: ParamRanges = ParamRanges()) -> TreeModelParams:
    """Independent uniform draw of each tree parameter (fixed draw order)."""
    max_leaves = int(g.integers(*ranges.max_leaves))
    max_depth = int(g.integers(*ranges.max_depth))
    measure = ranges.purity_measures[int(g.integers(0, len(ranges.purity_measures)))]
    msl = int(g.integers(*ranges.min_samples_leaf))
    mss = int(g.integers(*ranges.min_samples_split))
    return TreeModelParams(max_leaves, max_depth, measure, msl, mss)


def model_candidates(config: AuditConfig) -> list[TreeModelParams]:
    return [
        sample_model_params(rngmod.stream(config.seed, "model-params", i), config.ranges)
        for i in range(config.n_models)
    ]


def _fold_digest(folds) -> str:
    h = hashlib.sha256()
    for _, test in folds:
        h.update(np.asarray(test, dtype=np.int64).tobytes())
        h.update(b"|")
    return h.hexdigest()[:16]


class _FoldContext:
    """Per-audit shared read-only state: data, folds, presorted train rows."""

    def __init__(self, X, s, folds, class_weighting):
        self.X = np.ascontiguousarray(X, dtype=np.float64)
        self.s = np.ascontiguousarray(s, dtype=np.int8)
        self.folds = folds
        self.digest = _fold_digest(folds)
        self.sorted_train = [presort(self.X, train) for train, _ in folds]
        if class_weighting == "balanced":
            self.weights = [ClassWeights.balanced(self.s[train]) for train, _ in folds]
        else:
            self.weights = [class_weighting] * len(folds)

    def evaluate(self, index: int, params: TreeModelParams) -> ModelTrace:
        scores = []
        for (train, test), S, w in zip(self.folds, self.sorted_train, self.weights):
            tree = fit(self.X, self.s, params, w, sorted_rows=S)
            pred = predict(tree, self.X[test])
            scores.append(mcc(confusion(self.s[test], pred)))
        return ModelTrace(index, params, tuple(scores), self.digest)


_WORKER_CTX: _FoldContext | None = None


def _worker_init(ctx):
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _worker_eval(job):
    index, params = job
    return _WORKER_CTX.evaluate(index, params)


def _evaluate_all(ctx: _FoldContext, candidates, workers: int) -> list[ModelTrace]:
    jobs = list(enumerate(candidates))
    if workers <= 1 or len(jobs) < 2:
        return [ctx.evaluate(i, p) for i, p in jobs]
    with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init, initargs=(ctx,)) as ex:
        traces = list(ex.map(_worker_eval, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return sorted(traces, key=lambda t: t.index)


def select_best(traces: Sequence[ModelTrace]) -> ModelTrace:
    """Highest mean MCC; the earlier model wins ties; undefined models never win."""
    best = None
    best_mean = -math.inf
    for t in traces:
        m = t.mean
        if m is not None and m > best_mean:
            best, best_mean = t, m
    if best is None:
        raise AuditInconclusive("audit inconclusive: no fold MCC was defined for any model", traces)
    return best


def quantify_labeled(table: LabeledTable, config: AuditConfig) -> AuditResult:
    n0, n1 = table.class_counts()
    folds = stratified_folds(table.s, config.k, config.seed)
    ctx = _FoldContext(table.feature_matrix, table.s, folds, config.class_weighting)
    traces = _evaluate_all(ctx, model_candidates(config), config.workers)
    best = select_best(traces)
    return AuditResult(
        mcc_max_mean=best.mean,
        reliability=best.std,
        winning_params=best.params,
        winning_index=best.index,
        per_model_trace=tuple(traces),
        folds_skipped=len(best.fold_mccs) - best.folds_used,
        n_selected=n1,
        n_not_selected=n0,
    )


def quantify_shift(selected, not_selected, config: AuditConfig = AuditConfig()) -> AuditResult:
    """Score how well trees separate ``selected`` rows from ``not_selected`` rows."""
    table = label_selection(selected, not_selected)
    if not np.isfinite(table.feature_matrix).all():
        raise DataError("feature matrix contains missing or non-finite values")
    return quantify_labeled(table, config)


def permutation_null(selected, not_selected, config: AuditConfig = AuditConfig(), n_permutations: int = 50) -> np.ndarray:
    """Audit scores after randomly permuting the selection labels.

    Each permutation keeps the class sizes and reuses ``config`` (same model
    candidates); inconclusive permutations yield NaN.
    """
    table = label_selection(selected, not_selected)
    out = np.empty(n_permutations)
    for j in range(n_permutations):
        s = rngmod.stream(config.seed, "permutation", j).permutation(table.s)
        perm = LabeledTable(table.feature_matrix, s, table.column_names, table.source)
        try:
            out[j] = quantify_labeled(perm, config).mcc_max_mean
        except AuditInconclusive:
            out[j] = np.nan
    return out


def shift_verdict(result, threshold: float = DEFAULT_THRESHOLD) -> str:
    """``shifted`` iff the score is strictly above ``threshold``.

    Accepts an :class:`AuditResult` or a bare score.
    """
    score = result.mcc_max_mean if isinstance(result, AuditResult) else float(result)
    return SHIFTED if score > threshold else NOT_SHIFTED


# -- feature-set reports ---------------------------------------------------

OK = "ok"
INCONCLUSIVE = "inconclusive"
ERROR = "error"


@dataclass
class ReportRow:
    feature_set: tuple[str, ...]
    label: str
    status: str
    mcc_max_mean: float | None = None
    reliability: float | None = None
    winning_params: TreeModelParams | None = None
    folds_skipped: int | None = None
    verdict: str | None = None
    message: str = ""
    n_selected: int = 0
    n_not_selected: int = 0
    n_dropped: int = 0

    def as_dict(self) -> dict:
        return {
            "feature_set": self.label,
            "features": list(self.feature_set),
            "mcc_max_mean": self.mcc_max_mean,
            "reliability": self.reliability,
            "winning_params": None if self.winning_params is None else self.winning_params.as_dict(),
            "folds_skipped": self.folds_skipped,
            "verdict": self.verdict,
            "status": self.status,
            "message": self.message,
            "n_selected": self.n_selected,
            "n_not_selected": self.n_not_selected,
            "n_dropped": self.n_dropped,
        }


def feature_set_label(features: Sequence[str], all_features: Sequence[str]) -> str:
    if len(features) > 1 and set(features) == set(all_features):
        return "All"
    return " + ".join(features)


def audit_features(
    population: CustomerTable,
    inspected_flag,
    feature_sets: Sequence[Sequence[str]],
    config: AuditConfig = AuditConfig(),
    threshold: float = DEFAULT_THRESHOLD,
) -> list[ReportRow]:
    """One audit per feature set; rows sorted by descending score.

    Per-set failures become rows with status ``inconclusive`` or ``error``
    (listed after the scored rows) rather than aborting the run.
    """
    schema = population.schema
    flag = population.inspected if inspected_flag is None else np.asarray(inspected_flag, dtype=bool)
    rows = []
    for fs in feature_sets:
        fs = tuple(fs)
        row = ReportRow(fs, feature_set_label(fs, schema.names), ERROR)
        try:
            ordered = tuple(f.name for f in schema.features if f.name in fs)
            for name in fs:
                schema.feature(name)
            sel, rest, dropped = split_by_flag(population, ordered, flag)
            row.n_selected, row.n_not_selected, row.n_dropped = len(sel.matrix), len(rest.matrix), dropped
            res = quantify_shift(sel, rest, config)
        except AuditInconclusive as exc:
            row.status = INCONCLUSIVE
            row.message = str(exc)
        except (DataError, ValueError) as exc:
            row.message = str(exc)
        else:
            row.status = OK
            row.mcc_max_mean = res.mcc_max_mean
            row.reliability = res.reliability
            row.winning_params = res.winning_params
            row.folds_skipped = res.folds_skipped
            row.verdict = shift_verdict(res, threshold)
        log.info("audit %s: %s %s", row.label, row.status, row.mcc_max_mean)
        rows.append(row)
    scored = sorted((r for r in rows if r.status == OK), key=lambda r: -r.mcc_max_mean)
    return scored + [r for r in rows if r.status != OK]


REPORT_COLUMNS = (
    "feature_set", "mcc_max_mean", "reliability", "winning_params", "folds_skipped",
    "verdict", "status", "n_selected", "n_not_selected", "n_dropped", "message", "notes",
)


def _num(x) -> str:
    return "" if x is None else repr(x)


def write_report_csv(rows: Sequence[ReportRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            params = "" if r.winning_params is None else json.dumps(r.winning_params.as_dict(), sort_keys=True)
            w.writerow([
                r.label, _num(r.mcc_max_mean), _num(r.reliability), params, _num(r.folds_skipped),
                r.verdict or "", r.status, r.n_selected, r.n_not_selected, r.n_dropped,
                r.message, LOW_MCC_CAVEAT,
            ])


def write_report_json(rows: Sequence[ReportRow], path, threshold: float = DEFAULT_THRESHOLD, config: AuditConfig | None = None) -> None:
    doc = {
        "threshold": threshold,
        "notes": LOW_MCC_CAVEAT,
        "config": None if config is None else config.as_dict(),
        "rows": [r.as_dict() for r in rows],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=False)
        fh.write("\n")
