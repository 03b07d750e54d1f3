"""Per-case segmentation metrics and their aggregation into a report."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from useg.errors import EmptyCaseList, ShapeMismatch

HIST_BINS = 20


def _pair(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeMismatch(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred, gt) -> ConfusionCounts:
    p, g = _pair(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def dice_score(pred, gt) -> float:
    """2|P∩G| / (|P|+|G|); 1.0 when both masks are empty."""
    c = confusion(pred, gt)
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def jaccard(pred, gt) -> float:
    """|P∩G| / |P∪G|; 1.0 when both masks are empty."""
    c = confusion(pred, gt)
    union = c.tp + c.fp + c.fn
    return 1.0 if union == 0 else c.tp / union


def sensitivity_specificity(pred, gt) -> Tuple[Optional[float], Optional[float]]:
    """Pixel-wise (TP/(TP+FN), TN/(TN+FP)); a component is None when undefined."""
    c = confusion(pred, gt)
    sens = c.tp / (c.tp + c.fn) if c.tp + c.fn else None
    spec = c.tn / (c.tn + c.fp) if c.tn + c.fp else None
    return sens, spec


def boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour; outside the image counts as background."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


def percentile_nearest_rank(values: np.ndarray, q: int = 95) -> float:
    """Lower nearest-rank percentile: sorted[ceil(q*n/100) - 1]."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = v.size
    k = -(-q * n // 100)  # integer ceil
    return float(v[max(k, 1) - 1])


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # distance from every src boundary pixel to the nearest dst boundary pixel
    dist = ndimage.distance_transform_edt(~dst)
    return dist[src]


def hausdorff95(pred, gt, spacing: float = 1.0) -> Tuple[float, bool]:
    """Symmetric 95th-percentile boundary distance in pixels and a defined flag.

    Exactly one empty mask gives (image diagonal, False); both empty gives (0, True).
    """
    p, g = _pair(pred, gt)
    pe, ge = not p.any(), not g.any()
    if pe and ge:
        return 0.0, True
    if pe or ge:
        return float(math.hypot(*p.shape)) * spacing, False
    bp, bg = boundary(p), boundary(g)
    d_pg = percentile_nearest_rank(_directed(bp, bg))
    d_gp = percentile_nearest_rank(_directed(bg, bp))
    return max(d_pg, d_gp) * spacing, True


@dataclass
class PerCaseMetrics:
    case_id: str
    dice: float
    jaccard: float
    hd95: float
    hd95_defined: bool
    sensitivity: Optional[float]
    specificity: Optional[float]

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_case(case_id: str, pred, gt) -> PerCaseMetrics:
    sens, spec = sensitivity_specificity(pred, gt)
    hd, defined = hausdorff95(pred, gt)
    return PerCaseMetrics(str(case_id), dice_score(pred, gt), jaccard(pred, gt), hd, defined, sens, spec)


def _stats(values: Sequence[float]) -> Dict[str, Optional[float]]:
    if not values:
        return {"mean": None, "std": None, "n": 0}
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std()), "n": int(a.size)}


@dataclass
class MetricsReport:
    model: str
    split: str
    n: int
    metrics: Dict[str, dict]
    dice_histogram: List[int]
    per_case: List[PerCaseMetrics]

    def to_dict(self) -> dict:
        return {"model": self.model, "split": self.split, "n": self.n,
                "metrics": self.metrics, "dice_histogram": self.dice_histogram}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def per_case_jsonl(self) -> str:
        return "".join(json.dumps(c.to_dict(), sort_keys=True) + "\n" for c in self.per_case)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "split", "metric", "mean", "std", "n", "undefined_count"])
        for name, s in self.metrics.items():
            w.writerow([self.model, self.split, name, s["mean"], s["std"], s["n"], s.get("undefined_count", 0)])
        return buf.getvalue()

    def write(self, out_dir) -> Dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"json": out / "report.json", "csv": out / "report.csv", "per_case": out / "per_case.jsonl"}
        paths["json"].write_text(self.to_json())
        paths["csv"].write_text(self.to_csv())
        paths["per_case"].write_text(self.per_case_jsonl())
        return paths


def aggregate_report(cases: Iterable[PerCaseMetrics], model: str = "", split: str = "") -> MetricsReport:
    """Table-style mean ± population std per metric plus a 20-bin Dice histogram.

    Cases are reduced in case-id order so the result does not depend on the
    order they were evaluated in. HD95 statistics include the penalty value
    of undefined cases; their count is reported alongside.
    """
    cases = sorted(cases, key=lambda c: c.case_id)
    if not cases:
        raise EmptyCaseList("cannot aggregate an empty case list")
    metrics = {
        "dice": _stats([c.dice for c in cases]),
        "jaccard": _stats([c.jaccard for c in cases]),
        "hd95": _stats([c.hd95 for c in cases]),
        "sensitivity": _stats([c.sensitivity for c in cases if c.sensitivity is not None]),
        "specificity": _stats([c.specificity for c in cases if c.specificity is not None]),
    }
    metrics["hd95"]["undefined_count"] = sum(not c.hd95_defined for c in cases)
    metrics["sensitivity"]["undefined_count"] = sum(c.sensitivity is None for c in cases)
    metrics["specificity"]["undefined_count"] = sum(c.specificity is None for c in cases)
    hist, _ = np.histogram([c.dice for c in cases], bins=HIST_BINS, range=(0.0, 1.0))
    return MetricsReport(model, split, len(cases), metrics, [int(h) for h in hist], cases)


def read_per_case(path) -> List[PerCaseMetrics]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(PerCaseMetrics(**json.loads(line)))
    return out
