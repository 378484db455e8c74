"""False-positive-rate tables, the gender bias score over them, and detection AP."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .scenes import FEMALE, MALE

GENDERS = (MALE, FEMALE)
FPR_REPORT_COLUMNS = ("object", "fpr_male", "fpr_female", "diff")


@dataclass(frozen=True)
class FprCell:
    false_positives: int
    eligible: int

    @property
    def rate(self) -> float:
        return self.false_positives / self.eligible if self.eligible else 0.0


@dataclass(frozen=True)
class FprTable:
    objects: tuple[str, ...]
    cells: dict  # (object, gender) -> FprCell

    def rate(self, obj: str, gender: str) -> float:
        return self.cells[(obj, gender)].rate

    @property
    def skipped(self) -> tuple[str, ...]:
        return tuple(o for o in self.objects if any(self.cells[(o, g)].eligible == 0 for g in GENDERS))


@dataclass(frozen=True)
class BiasScore:
    value: float
    per_object: dict = field(default_factory=dict)
    skipped: tuple[str, ...] = ()


def fpr_table(
    scores: np.ndarray,
    truth: np.ndarray,
    genders: Sequence[str],
    objects: Sequence[str],
    tau: float = 0.5,
) -> FprTable:
    """Per-(object, gender) false positives among images of that gender lacking the object.

    ``scores`` and ``truth`` are (images x objects); a prediction is ``score > tau``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=bool)
    objects = tuple(objects)
    if not objects:
        raise ValueError("fpr_table needs at least one object")
    if scores.shape != truth.shape or scores.shape != (len(genders), len(objects)):
        raise ValueError(f"shape mismatch: scores {scores.shape}, truth {truth.shape}, "
                         f"{len(genders)} genders, {len(objects)} objects")
    g = np.asarray(genders)
    bad = set(g.tolist()) - set(GENDERS)
    if bad:
        raise ValueError(f"genders must be male/female, got {sorted(bad)}")
    negative = ~truth
    false_pos = (scores > tau) & negative
    cells = {}
    for gender in GENDERS:
        m = g == gender
        elig = negative[m].sum(axis=0)
        fp = false_pos[m].sum(axis=0)
        for j, o in enumerate(objects):
            cells[(o, gender)] = FprCell(int(fp[j]), int(elig[j]))
    return FprTable(objects, cells)


def bias_vl(table: FprTable) -> BiasScore:
    """Sum over objects of |FPR_male - FPR_female|, accumulated left to right in object order.

    Objects lacking eligible images for either gender contribute nothing and
    are listed in ``skipped``.
    """
    skipped = set(table.skipped)
    per_object = {}
    total = 0.0
    for o in table.objects:
        if o in skipped:
            continue
        diff = abs(table.rate(o, MALE) - table.rate(o, FEMALE))
        per_object[o] = diff
        total += diff
    return BiasScore(total, per_object, tuple(o for o in table.objects if o in skipped))


@dataclass(frozen=True)
class SplitBaseline:
    mean: float
    std: float
    values: tuple[float, ...]


def split_baseline(
    scores: np.ndarray,
    truth: np.ndarray,
    objects: Sequence[str],
    tau: float = 0.5,
    seed: int = 0,
    n_trials: int = 20,
) -> SplitBaseline:
    """Bias score between random halves of a single-gender image set.

    Each trial permutes the images; the first ``n // 2`` act as "male", the
    rest (one more when ``n`` is odd) as "female". ``std`` is the sample
    standard deviation over trials (0 for one trial).
    """
    scores = np.asarray(scores)
    n = scores.shape[0]
    if n < 2:
        raise ValueError("split_baseline needs at least two images")
    if n_trials < 1:
        raise ValueError("n_trials must be positive")
    rng = np.random.default_rng(seed)
    values = []
    for _ in range(n_trials):
        perm = rng.permutation(n)
        pseudo = np.empty(n, dtype=object)
        pseudo[perm[: n // 2]] = MALE
        pseudo[perm[n // 2 :]] = FEMALE
        values.append(bias_vl(fpr_table(scores, truth, list(pseudo), objects, tau)).value)
    arr = np.array(values)
    std = float(arr.std(ddof=1)) if n_trials > 1 else 0.0
    return SplitBaseline(float(arr.mean()), std, tuple(values))


@dataclass(frozen=True)
class ObjectRow:
    object: str
    fpr_male: float
    fpr_female: float
    diff: float


def per_object_report(table: FprTable) -> list[ObjectRow]:
    """Rows sorted by signed ``diff = fpr_male - fpr_female`` (female-leaning first), ties by name.

    Skipped objects are listed with ``diff = 0``.
    """
    skipped = set(table.skipped)
    rows = []
    for o in table.objects:
        m, f = table.rate(o, MALE), table.rate(o, FEMALE)
        rows.append(ObjectRow(o, m, f, 0.0 if o in skipped else m - f))
    return sorted(rows, key=lambda r: (r.diff, r.object))


def write_fpr_report(rows: Iterable[ObjectRow], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FPR_REPORT_COLUMNS)
        for r in rows:
            w.writerow([r.object, repr(r.fpr_male), repr(r.fpr_female), repr(r.diff)])
    return path


def read_fpr_report(path) -> list[ObjectRow]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != FPR_REPORT_COLUMNS:
            raise ValueError(f"{path}: expected columns {FPR_REPORT_COLUMNS}")
        return [ObjectRow(r["object"], float(r["fpr_male"]), float(r["fpr_female"]), float(r["diff"])) for r in reader]


# --------------------------------------------------------------------- AP


@dataclass(frozen=True)
class APResult:
    value: float
    per_object: dict
    excluded: tuple[str, ...]


def average_precision_1d(scores: np.ndarray, labels: np.ndarray) -> float:
    """Non-interpolated AP; tied scores form one block evaluated at its end.

    AP = sum over distinct thresholds of (recall gain) * precision. A constant
    ranker therefore scores exactly the prevalence.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("AP undefined without positives")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    # index of the last element of each tie block
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_at = tp[ends]
    precision = tp_at / (ends + 1)
    gain = np.diff(np.r_[0, tp_at]) / n_pos
    return float(np.sum(gain * precision))


def average_precision(scores: np.ndarray, truth: np.ndarray, objects: Sequence[str]) -> APResult:
    """Mean over objects of image-level AP; objects never present are excluded."""
    per, excluded = {}, []
    for j, o in enumerate(objects):
        if not np.any(truth[:, j]):
            excluded.append(o)
            continue
        per[o] = average_precision_1d(scores[:, j], truth[:, j])
    value = float(np.mean(list(per.values()))) if per else float("nan")
    return APResult(value, per, tuple(excluded))
