"""Overlap and size metrics, fold aggregation and the text report tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .volume import LA, LV, MYO, STRUCTURE_IDS, STRUCTURES, as_label_array

HEART_VOLUME = "Heart Volume"
HEART_CLASSES = (LV, LA, MYO)
LAYOUTS = ("validation", "test")


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    a, b = as_label_array(pred), as_label_array(gt)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: prediction {a.shape} vs ground truth {b.shape}")
    return a, b


def dice(pred, gt, class_id: int) -> float:
    """2|A∩B| / (|A|+|B|) for the voxels of ``class_id``; 1.0 when both are empty."""
    a, b = _pair(pred, gt)
    A, B = a == class_id, b == class_id
    denom = int(A.sum()) + int(B.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(A & B)) / denom


def volume_similarity(pred, gt, class_set=HEART_CLASSES) -> float:
    """1 - ||A|-|B|| / (|A|+|B|) over the union of ``class_set``; 1.0 when both are empty."""
    a, b = _pair(pred, gt)
    cs = [class_set] if np.isscalar(class_set) else list(class_set)
    na, nb = int(np.isin(a, cs).sum()), int(np.isin(b, cs).sum())
    if na + nb == 0:
        return 1.0
    return 1.0 - abs(na - nb) / (na + nb)


def aggregate(scores) -> tuple[float, float]:
    """Mean and population standard deviation."""
    x = np.asarray(list(scores), dtype=np.float64)
    if x.size == 0:
        raise ValueError("aggregate needs at least one score")
    # sort first so the result does not depend on input order, bit for bit
    x = np.sort(x)
    mu = math.fsum(x) / x.size
    return mu, math.sqrt(math.fsum((x - mu) ** 2) / x.size)


@dataclass
class StructureScores:
    case_id: str
    dice: dict = field(default_factory=dict)
    vs: float | None = None

    def __post_init__(self):
        for k, v in list(self.dice.items()) + ([("vs", self.vs)] if self.vs is not None else []):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"score {k}={v} outside [0, 1]")


def score_case(pred, gt, case_id: str = "") -> StructureScores:
    return StructureScores(case_id, {s: dice(pred, gt, STRUCTURE_IDS[s]) for s in STRUCTURES},
                           volume_similarity(pred, gt, HEART_CLASSES))


@dataclass
class AggregateRow:
    model: str
    structure: str
    mean: float
    std: float
    n: int
    metric: str = "dice"

    def __post_init__(self):
        if self.std < 0 or self.n < 1:
            raise ValueError(f"invalid aggregate row {self}")

    @classmethod
    def from_scores(cls, model: str, structure: str, scores, metric: str = "dice") -> "AggregateRow":
        scores = list(scores)
        mu, sd = aggregate(scores)
        return cls(model, structure, mu, sd, len(scores), metric)


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.3f} ± {std:.3f}"


def report_tables(rows, layout: str = "validation") -> str:
    """One column per model, one row per structure; the best score per row carries a ``*``.

    The test layout additionally needs a volume-similarity row.
    """
    if layout not in LAYOUTS:
        raise ValueError(f"layout must be one of {LAYOUTS}, got {layout!r}")
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to report")
    models = list(dict.fromkeys(r.model for r in rows))
    row_keys = list(dict.fromkeys((r.metric, r.structure) for r in rows))
    if layout == "test" and not any(m == "vs" for m, _ in row_keys):
        raise ValueError("test layout needs a volume-similarity row")
    cells = {(r.metric, r.structure, r.model): r for r in rows}
    header = ["Structure"] + models
    body = []
    for metric, structure in row_keys:
        missing = [m for m in models if (metric, structure, m) not in cells]
        if missing:
            raise ValueError(f"missing cell: model {missing[0]!r}, {metric} {structure!r}")
        means = [round(cells[metric, structure, m].mean, 3) for m in models]
        best = max(means)
        label = structure if metric == "dice" else f"VS {structure}"
        body.append([label] + [format_mean_std(cells[metric, structure, m].mean, cells[metric, structure, m].std)
                               + ("*" if mu == best else " ") for m, mu in zip(models, means)])
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    fmt = lambda r: " | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    lines = [fmt(header), "-+-".join("-" * w for w in widths)] + [fmt(r) for r in body]
    return "\n".join(lines) + "\n"


def rows_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "metric", "structure", "mean", "std", "n"])
    for r in rows:
        w.writerow([r.model, r.metric, r.structure, repr(r.mean), repr(r.std), r.n])
    return buf.getvalue()


def scores_csv(model: str, scores) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "case", "structure", "dice", "vs"])
    for s in scores:
        for k in STRUCTURES:
            w.writerow([model, s.case_id, k, repr(s.dice[k]), ""])
        if s.vs is not None:
            w.writerow([model, s.case_id, HEART_VOLUME, "", repr(s.vs)])
    return buf.getvalue()
