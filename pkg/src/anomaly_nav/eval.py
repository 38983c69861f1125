"""Threshold-free detector evaluation and the modality x method report.

Scores follow the detector convention (larger = more anomalous).  ROC points
treat *safe* as the positive class: a threshold ``t`` accepts a patch as safe
when its score is ``<= t``, so TPR is the accepted share of safe patches and
FPR the accepted share of anomalous ones.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import NEGATIVE, POSITIVE, PatchDataset
from .errors import UsageError
from .modalities import canonical

log = logging.getLogger(__name__)

TPR_CAP = 0.05
DEFAULT_REPEATS = 10
MODALITY_ROWS = (
    "RGB",
    "D",
    "RGB+D",
    "RGB+G",
    "RGB+N",
    "RGB+A",
    "D+N",
    "D+A",
    "G+A",
    "RGB+D+N",
    "RGB+D+A",
    "RGB+G+N",
    "RGB+G+A",
)
# (method, regime) columns of the report
METHOD_COLUMNS = (
    ("ae", "none"),
    ("svdd-soft", "no-pretrain"),
    ("svdd-hard", "no-pretrain"),
    ("svdd-soft", "pretrained"),
    ("svdd-hard", "pretrained"),
    ("nvp", "no-pretrain"),
    ("nvp", "pretrained"),
    ("nvp", "fixed-features"),
)
CSV_FIELDS = (
    "method",
    "regime",
    "modality",
    "seed_count",
    "auroc_mean",
    "auroc_std",
    "tpr_at_5fpr_mean",
    "tpr_at_5fpr_std",
)


def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(safe scores, anomalous scores)``.

    ``labels`` may be dataset codes (1 safe, 2 anomalous) or booleans with
    True meaning anomalous.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    l = np.asarray(labels).reshape(-1)
    if s.shape != l.shape:
        raise UsageError(f"{len(s)} scores but {len(l)} labels")
    if l.dtype == bool:
        anom = l
    else:
        bad = ~np.isin(l, (POSITIVE, NEGATIVE))
        if bad.any():
            raise UsageError(f"labels must be {POSITIVE} (safe) or {NEGATIVE} (anomalous)")
        anom = l == NEGATIVE
    if np.isnan(s).any():
        raise UsageError("scores contain NaN")
    safe, bad_ = s[~anom], s[anom]
    if len(safe) == 0 or len(bad_) == 0:
        raise UsageError("evaluation needs at least one safe and one anomalous sample")
    return safe, bad_


def auroc(scores, labels) -> float:
    """P(anomalous score > safe score) with ties counted 1/2 (midrank U statistic)."""
    safe, anom = _split(scores, labels)
    allv = np.concatenate([safe, anom])
    order = np.argsort(allv, kind="mergesort")
    sv = allv[order]
    ranks = np.empty(len(allv))
    # midranks over runs of equal values
    bounds = np.flatnonzero(np.diff(sv)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [len(sv)]])
    mid = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(mid, ends - starts)
    n0, n1 = len(safe), len(anom)
    u = ranks[n0:].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n0 * n1))


@dataclass
class RocCurve:
    thresholds: np.ndarray  # first entry -inf: nothing accepted
    fpr: np.ndarray
    tpr: np.ndarray

    def area(self) -> float:
        return float(np.trapezoid(self.tpr, self.fpr))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(self.thresholds, self.fpr, self.tpr):
            w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])
        return buf.getvalue()


def roc_points(scores, labels) -> RocCurve:
    """One point per distinct score threshold, from (0, 0) to (1, 1).

    The leading (0, 0) point uses threshold ``-inf`` (accept nothing); every
    other point accepts scores ``<= threshold``.
    """
    safe, anom = _split(scores, labels)
    thr = np.unique(np.concatenate([safe, anom]))
    safe_s, anom_s = np.sort(safe), np.sort(anom)
    tpr = np.searchsorted(safe_s, thr, side="right") / len(safe_s)
    fpr = np.searchsorted(anom_s, thr, side="right") / len(anom_s)
    return RocCurve(
        np.concatenate([[-np.inf], thr]),
        np.concatenate([[0.0], fpr]),
        np.concatenate([[0.0], tpr]),
    )


def tpr_at_fpr(scores, labels, fpr_cap: float = TPR_CAP) -> float:
    """Largest TPR reachable with FPR <= cap, interpolating linearly along the ROC."""
    if not 0.0 <= fpr_cap <= 1.0:
        raise UsageError(f"fpr cap must lie in [0, 1], got {fpr_cap}")
    c = roc_points(scores, labels)
    ok = c.fpr <= fpr_cap
    best = float(c.tpr[ok].max())
    # first point beyond the cap: interpolate on the segment that crosses it
    beyond = np.flatnonzero(~ok)
    if len(beyond):
        i = beyond[0]
        f0, f1 = c.fpr[i - 1], c.fpr[i]
        t0, t1 = c.tpr[i - 1], c.tpr[i]
        best = max(best, float(t0 + (t1 - t0) * (fpr_cap - f0) / (f1 - f0)))
    return best


# --------------------------------------------------------------------------
# report matrix


@dataclass
class CellResult:
    method: str
    regime: str
    modality: str
    aurocs: list[float]
    tprs: list[float]

    def row(self) -> dict[str, str]:
        a, t = np.asarray(self.aurocs), np.asarray(self.tprs)
        return {
            "method": self.method,
            "regime": self.regime,
            "modality": self.modality,
            "seed_count": str(len(a)),
            "auroc_mean": repr(float(a.mean())),
            "auroc_std": repr(float(a.std())),
            "tpr_at_5fpr_mean": repr(float(t.mean())),
            "tpr_at_5fpr_std": repr(float(t.std())),
        }


def report_csv(cells: Iterable[CellResult]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for c in cells:
        w.writerow(c.row())
    return buf.getvalue()


def read_report(path) -> list[dict[str, str]]:
    return list(csv.DictReader(Path(path).read_text().splitlines()))


def score_dataset(detector, test: PatchDataset) -> tuple[np.ndarray, np.ndarray]:
    """Scores and labels of the labelled records of ``test`` in the detector's modality."""
    keep = np.flatnonzero(np.isin(test.labels, (POSITIVE, NEGATIVE)))
    sub = test.subset(keep)
    if sub.modality != detector.modality:
        sub = sub.select_modality(detector.modality)
    return detector.score(sub.data), sub.labels


def _run_group(args) -> list[tuple[float, float]]:
    """All columns for one (modality, seed); the autoencoder is pretrained once
    and shared by every column that needs it."""
    from .trainer import pretrain_autoencoder, train

    train_set, test_set, base_cfg, columns, modality, seed = args
    pre = None
    out = []
    for method, regime in columns:
        cfg = base_cfg.replace(method=method, regime=None if method == "ae" else regime, modality=modality, seed=seed)
        if (cfg.method == "ae" or cfg.needs_pretrained) and pre is None:
            pre, _ = pretrain_autoencoder(train_set, cfg)
        det = pre if cfg.method == "ae" else train(train_set, cfg, pre)[0]
        s, l = score_dataset(det, test_set)
        out.append((auroc(s, l), tpr_at_fpr(s, l)))
    return out


def eval_matrix(
    train_set: PatchDataset,
    test_set: PatchDataset,
    config,
    modalities: Sequence[str] = MODALITY_ROWS,
    columns: Sequence[tuple[str, str]] = METHOD_COLUMNS,
    repeats: int = DEFAULT_REPEATS,
    workers: int = 1,
) -> list[CellResult]:
    """Train and evaluate every (modality, method, regime) cell ``repeats``
    times with seeds ``config.seed + r``; (modality, seed) groups fan out over
    ``workers`` processes."""
    if repeats < 1:
        raise UsageError("repeats must be >= 1")
    columns = list(columns)
    jobs = [
        (train_set, test_set, config, columns, canonical(mod), config.seed + r)
        for mod in modalities
        for r in range(repeats)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_group, jobs))
    else:
        results = [_run_group(j) for j in jobs]
    cells: dict[tuple[str, str, str], CellResult] = {}
    for mod in modalities:
        for method, regime in columns:
            key = (method, regime, canonical(mod))
            cells[key] = CellResult(*key, [], [])
    for job, res in zip(jobs, results):
        for (method, regime), (a, t) in zip(columns, res):
            cell = cells[(method, regime, job[4])]
            cell.aurocs.append(a)
            cell.tprs.append(t)
            log.info("%s/%s/%s seed %d auroc %.4f tpr@5 %.4f", method, regime, job[4], job[5], a, t)
    return list(cells.values())


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


__all__ = [
    "CSV_FIELDS",
    "METHOD_COLUMNS",
    "MODALITY_ROWS",
    "TPR_CAP",
    "CellResult",
    "RocCurve",
    "auroc",
    "eval_matrix",
    "mean_std",
    "read_report",
    "report_csv",
    "roc_points",
    "score_dataset",
    "tpr_at_fpr",
]
