"""AUC and group-fairness metrics over prediction records.

Every function takes a list of :class:`PredictionRecord`.  Group-level
quantities that are undefined for some group (a single-class group for AUC,
a group lacking positives for TPR, ...) drop that group and emit a
``RuntimeWarning``; when nothing is left the metric raises
:class:`UndefinedMetricError`.
"""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

ATTRIBUTES = ("race", "gender", "ethnicity", "language")
DPD_MODES = ("standard", "as-printed")


class UndefinedMetricError(ValueError):
    """The metric has no value on the given records."""


@dataclass(frozen=True)
class PredictionRecord:
    score: float
    label: int
    groups: dict
    id: str | None = None
    pred: int | None = None


def _arrays(records: Sequence[PredictionRecord]):
    scores = np.array([r.score for r in records], dtype=float)
    labels = np.array([r.label for r in records], dtype=int)
    return scores, labels


def _preds(records: Sequence[PredictionRecord], threshold: float = 0.5) -> np.ndarray:
    if any(r.pred is None for r in records):
        records = binarize(records, threshold)
    return np.array([r.pred for r in records], dtype=int)


def _group_ids(records: Sequence[PredictionRecord], attribute: str) -> np.ndarray:
    try:
        return np.array([r.groups[attribute] for r in records], dtype=object)
    except KeyError as exc:
        raise KeyError(f"record lacks attribute {attribute!r}") from exc


def _sorted_groups(ids: np.ndarray) -> list:
    return sorted(set(ids.tolist()), key=lambda g: (str(type(g)), g))


# ---------------------------------------------------------------------------
# AUC
# ---------------------------------------------------------------------------


def auc_score(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for ties: ``P(s+ > s-) + P(s+ = s-) / 2``."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores)  # average ranks
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc(records: Sequence[PredictionRecord]) -> float:
    return auc_score(*_arrays(records))


def group_aucs(records: Sequence[PredictionRecord], attribute: str) -> tuple[dict, dict]:
    """Per-group AUC; returns ``(aucs, excluded)`` where ``excluded`` maps group to reason."""
    scores, labels = _arrays(records)
    ids = _group_ids(records, attribute)
    out, excluded = {}, {}
    for g in _sorted_groups(ids):
        sel = ids == g
        try:
            out[g] = auc_score(scores[sel], labels[sel])
        except UndefinedMetricError:
            excluded[g] = "single-class group"
            warnings.warn(f"{attribute}={g!r}: AUC undefined (single class); excluded", RuntimeWarning, stacklevel=2)
    return out, excluded


def es_auc(records: Sequence[PredictionRecord], attribute: str) -> float:
    """``AUC / (1 + sum_a |AUC - AUC_a|)`` over groups with a defined AUC."""
    overall = auc(records)
    per_group, _ = group_aucs(records, attribute)
    return overall / (1.0 + sum(abs(overall - a) for a in per_group.values()))


# ---------------------------------------------------------------------------
# thresholded metrics
# ---------------------------------------------------------------------------


def binarize(records: Sequence[PredictionRecord], threshold: float = 0.5) -> list[PredictionRecord]:
    """Set ``pred = 1`` iff ``sigmoid(score) >= threshold``."""
    probs = expit(np.array([r.score for r in records], dtype=float))
    return [replace(r, pred=int(p >= threshold)) for r, p in zip(records, probs)]


def dpd(records: Sequence[PredictionRecord], attribute: str, mode: str = "standard", threshold: float = 0.5) -> float:
    """Demographic parity difference: largest gap in positive-prediction rate.

    ``mode="standard"`` uses ``P(yhat=1 | G=a)``; ``mode="as-printed"``
    conditions on ``y=1`` as well.
    """
    if mode not in DPD_MODES:
        raise ValueError(f"unknown DPD mode {mode!r}; expected one of {DPD_MODES}")
    preds = _preds(records, threshold)
    _, labels = _arrays(records)
    ids = _group_ids(records, attribute)
    rates = []
    for g in _sorted_groups(ids):
        sel = ids == g
        if mode == "as-printed":
            sel = sel & (labels == 1)
        if not sel.any():
            warnings.warn(f"{attribute}={g!r}: no samples for DPD ({mode}); excluded", RuntimeWarning, stacklevel=2)
            continue
        rates.append(preds[sel].mean())
    if len(rates) < 2:
        raise UndefinedMetricError(f"DPD needs at least two groups of {attribute!r}")
    return float(max(rates) - min(rates))


def _confusion_rates(preds, labels, sel) -> tuple[float, float] | None:
    pos = sel & (labels == 1)
    neg = sel & (labels == 0)
    if not pos.any() or not neg.any():
        return None
    return preds[pos].mean(), preds[neg].mean()


def eod(records: Sequence[PredictionRecord], attribute: str, threshold: float = 0.5) -> float:
    """Equalized-odds difference: max over group pairs of ``max(|dTPR|, |dFPR|)``."""
    preds = _preds(records, threshold)
    _, labels = _arrays(records)
    ids = _group_ids(records, attribute)
    rates = {}
    for g in _sorted_groups(ids):
        r = _confusion_rates(preds, labels, ids == g)
        if r is None:
            warnings.warn(f"{attribute}={g!r}: group lacks a class; its pairs are skipped", RuntimeWarning, stacklevel=2)
        rates[g] = r
    best = None
    for a, b in itertools.combinations(rates, 2):
        if rates[a] is None or rates[b] is None:
            continue
        gap = max(abs(rates[a][0] - rates[b][0]), abs(rates[a][1] - rates[b][1]))
        best = gap if best is None else max(best, gap)
    if best is None:
        raise UndefinedMetricError(f"EOD undefined for {attribute!r}: no comparable group pair")
    return float(best)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    attribute: str
    auc: float | None
    es_auc: float | None
    dpd: float | None
    eod: float | None
    per_group_auc: dict
    counts: dict
    threshold: float = 0.5
    dpd_mode: str = "standard"
    notes: dict = field(default_factory=dict)  # metric or group -> reason
    ci: dict = field(default_factory=dict)  # metric -> (lo, hi)

    def as_dict(self) -> dict:
        return {
            "attribute": self.attribute,
            "auc": self.auc,
            "es_auc": self.es_auc,
            "dpd": self.dpd,
            "eod": self.eod,
            "dpd_mode": self.dpd_mode,
            "threshold": self.threshold,
            "per_group_auc": {str(k): v for k, v in self.per_group_auc.items()},
            "counts": {str(k): v for k, v in self.counts.items()},
            "notes": {str(k): v for k, v in self.notes.items()},
            "ci": {k: list(v) for k, v in self.ci.items()},
        }


def _safe(fn, notes: dict, key: str):
    try:
        return fn()
    except UndefinedMetricError as exc:
        notes[key] = str(exc)
        return None


def evaluate_attribute(
    records: Sequence[PredictionRecord],
    attribute: str,
    threshold: float = 0.5,
    dpd_mode: str = "standard",
    bootstrap: int = 0,
    seed: int = 0,
) -> MetricsReport:
    """All four metrics for one attribute; undefined values become None with a note.

    ``bootstrap > 0`` adds percentile 95% intervals from that many resamples.
    """
    records = binarize(records, threshold)
    notes: dict = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        per_group, excluded = group_aucs(records, attribute)
        for g, why in excluded.items():
            notes[f"auc[{g}]"] = why
        report = MetricsReport(
            attribute=attribute,
            auc=_safe(lambda: auc(records), notes, "auc"),
            es_auc=_safe(lambda: es_auc(records, attribute), notes, "es_auc"),
            dpd=_safe(lambda: dpd(records, attribute, dpd_mode, threshold), notes, "dpd"),
            eod=_safe(lambda: eod(records, attribute, threshold), notes, "eod"),
            per_group_auc=per_group,
            counts={g: int(n) for g, n in zip(*np.unique(_group_ids(records, attribute).astype(str), return_counts=True))},
            threshold=threshold,
            dpd_mode=dpd_mode,
            notes=notes,
        )
        if bootstrap:
            report.ci = bootstrap_ci(records, attribute, bootstrap, seed, threshold, dpd_mode)
    return report


def bootstrap_ci(records, attribute, n_resamples=1000, seed=0, threshold=0.5, dpd_mode="standard", level=0.95) -> dict:
    rng = np.random.default_rng(seed)
    records = list(records)
    n = len(records)
    fns = {
        "auc": lambda rs: auc(rs),
        "es_auc": lambda rs: es_auc(rs, attribute),
        "dpd": lambda rs: dpd(rs, attribute, dpd_mode, threshold),
        "eod": lambda rs: eod(rs, attribute, threshold),
    }
    draws: dict[str, list[float]] = {k: [] for k in fns}
    for _ in range(n_resamples):
        sample = [records[i] for i in rng.integers(0, n, n)]
        for k, fn in fns.items():
            try:
                draws[k].append(fn(sample))
            except UndefinedMetricError:
                pass
    lo, hi = (1 - level) / 2 * 100, (1 + level) / 2 * 100
    return {k: (float(np.percentile(v, lo)), float(np.percentile(v, hi))) for k, v in draws.items() if v}


def evaluate_all(records, attributes: Iterable[str] = ATTRIBUTES, **kw) -> list[MetricsReport]:
    return [evaluate_attribute(records, a, **kw) for a in attributes]


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def read_predictions(path) -> list[PredictionRecord]:
    """Read a line-delimited prediction manifest (``id, score, label, attributes``)."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out.append(PredictionRecord(float(d["score"]), int(d["label"]), dict(d["attributes"]), d.get("id")))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad prediction record ({exc})") from exc
    return out


def write_predictions(records: Iterable[PredictionRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({"id": r.id, "score": r.score, "label": r.label, "attributes": r.groups}) + "\n")


def _cell(value, key: str, notes: dict) -> str:
    if value is None:
        return f"n/a ({notes.get(key, 'undefined')})"
    return f"{100 * value:.2f}"


def format_table(reports: Sequence[MetricsReport], title: str | None = None) -> str:
    """Aligned text table, metrics scaled by 100."""
    cols = ("ES-AUC", "AUC", "DPD", "EOD")
    keys = ("es_auc", "auc", "dpd", "eod")
    rows = [(r.attribute, *[_cell(getattr(r, k), k, r.notes) for k in keys]) for r in reports]
    widths = [max(len(x) for x in col) for col in zip(("Attr.", *cols), *rows)]
    lines = []
    if title:
        lines.append(title)
    if reports:
        lines.append(f"DPD mode: {reports[0].dpd_mode}  threshold: {reports[0].threshold}")
    fmt = "  ".join(f"{{:<{widths[0]}}}" if i == 0 else f"{{:>{w}}}" for i, w in enumerate(widths))
    lines.append(fmt.format("Attr.", *cols))
    lines.append("-" * (sum(widths) + 2 * len(cols)))
    lines.extend(fmt.format(*row) for row in rows)
    return "\n".join(lines)


def write_reports(reports: Iterable[MetricsReport], path) -> None:
    Path(path).write_text("".join(json.dumps(r.as_dict()) + "\n" for r in reports))
