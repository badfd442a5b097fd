"""S-measure, max F-measure, max E-measure and MAE for saliency maps."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from mccl.data import read_gray, resize_array

THRESHOLDS = np.arange(256) / 255.0
BETA2 = 0.3
EPS = 1e-12


class EvaluationError(RuntimeError):
    pass


def _check(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    return np.clip(pred, 0.0, 1.0), gt >= 0.5


def mae(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    return float(np.abs(pred - gt).mean())


def _threshold_counts(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predicted-positive and true-positive counts of the binarisation pred > t, per threshold."""
    fg = np.sort(pred[gt])
    allv = np.sort(pred.ravel())
    n_pos = allv.size - np.searchsorted(allv, THRESHOLDS, side="right")
    tp = fg.size - np.searchsorted(fg, THRESHOLDS, side="right")
    return n_pos.astype(np.float64), tp.astype(np.float64)


def f_measure_curve(pred, gt) -> np.ndarray:
    pred, gt = _check(pred, gt)
    n_gt = gt.sum()
    if n_gt == 0:
        raise ValueError("F-measure is undefined for an empty ground truth")
    n_pos, tp = _threshold_counts(pred, gt)
    precision = np.where(n_pos > 0, tp / np.maximum(n_pos, 1), 1.0)
    recall = tp / n_gt
    denom = BETA2 * precision + recall
    return np.where(denom > 0, (1 + BETA2) * precision * recall / np.where(denom > 0, denom, 1), 0.0)


def f_measure_max(pred, gt) -> float:
    return float(f_measure_curve(pred, gt).max())


def e_measure_curve(pred, gt) -> np.ndarray:
    pred, gt = _check(pred, gt)
    n = gt.size
    n_gt = gt.sum()
    n_pos, tp = _threshold_counts(pred, gt)
    if n_gt == 0:
        return 1.0 - n_pos / n
    if n_gt == n:
        return n_pos / n
    mg = n_gt / n
    mb = n_pos / n
    # (gt, B) takes four values; each gives a constant enhanced-alignment score
    counts = {(1, 1): tp, (1, 0): n_gt - tp, (0, 1): n_pos - tp, (0, 0): n - n_gt - n_pos + tp}
    score = np.zeros_like(mb)
    for (g, b), c in counts.items():
        phi_g = g - mg
        phi_b = b - mb
        xi = 2 * phi_g * phi_b / (phi_g * phi_g + phi_b * phi_b + EPS)
        score += c * (xi + 1) ** 2 / 4
    return score / n


def e_measure_max(pred, gt) -> float:
    return float(e_measure_curve(pred, gt).max())


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    x, y = pred.mean(), gt.mean()
    dof = max(n - 1, 1)
    sx = ((pred - x) ** 2).sum() / dof
    sy = ((gt - y) ** 2).sum() / dof
    sxy = ((pred - x) * (gt - y)).sum() / dof
    a = 4 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return float(a / (b + EPS))
    if b == 0:
        return 1.0
    return 0.0


def _centroid(gt: np.ndarray) -> tuple[int, int]:
    h, w = gt.shape
    if not gt.any():
        return int(round(w / 2)), int(round(h / 2))
    ys, xs = np.nonzero(gt)
    return int(np.round(xs.mean())) + 1, int(np.round(ys.mean())) + 1


def _region(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    cx, cy = _centroid(gt)
    area = h * w
    g = gt.astype(np.float64)
    blocks = (
        (slice(0, cy), slice(0, cx)),
        (slice(0, cy), slice(cx, w)),
        (slice(cy, h), slice(0, cx)),
        (slice(cy, h), slice(cx, w)),
    )
    total = 0.0
    for rs, cs in blocks:
        p, q = pred[rs, cs], g[rs, cs]
        if p.size:
            total += p.size / area * _ssim(p, q)
    return total


def _object_score(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return float(2 * x / (x * x + 1 + sigma + EPS))


def _object(pred: np.ndarray, gt: np.ndarray) -> float:
    u = gt.mean()
    fg = _object_score(pred[gt])
    bg = _object_score((1 - pred)[~gt])
    return u * fg + (1 - u) * bg


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    """Structure measure: object-aware and region-aware similarity, equally weighted."""
    pred, gt = _check(pred, gt)
    y = gt.mean()
    if y == 0:
        score = 1.0 - pred.mean()
    elif y == 1:
        score = pred.mean()
    else:
        score = alpha * _object(pred, gt) + (1 - alpha) * _region(pred, gt)
    return float(np.clip(score, 0.0, 1.0))


def all_metrics(pred, gt) -> dict:
    gt_b = np.asarray(gt) >= 0.5
    return {
        "S": s_measure(pred, gt),
        "Fmax": f_measure_max(pred, gt) if gt_b.any() else float("nan"),
        "Emax": e_measure_max(pred, gt),
        "MAE": mae(pred, gt),
    }


@dataclass
class MetricsReport:
    s_measure: float
    f_max: float
    e_max: float
    mae: float
    n_images: int = 0
    per_group: dict = field(default_factory=dict)
    dataset: str = "dataset"

    def row(self) -> dict:
        return {"S": self.s_measure, "Fmax": self.f_max, "Emax": self.e_max, "MAE": self.mae}

    def to_tsv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(("dataset", "group", "S", "Fmax", "Emax", "MAE"))
        for gname, m in self.per_group.items():
            w.writerow((self.dataset, gname, *(f"{m[k]:.4f}" for k in ("S", "Fmax", "Emax", "MAE"))))
        w.writerow((self.dataset, "ALL", *(f"{v:.4f}" for v in (self.s_measure, self.f_max, self.e_max, self.mae))))
        return buf.getvalue()

    def table(self) -> str:
        """Single row in the column order E, S, F, MAE."""
        head = f"{'Dataset':<12} {'Emax':>7} {'S':>7} {'Fmax':>7} {'MAE':>7}"
        line = f"{self.dataset:<12} {self.e_max:7.3f} {self.s_measure:7.3f} {self.f_max:7.3f} {self.mae:7.3f}"
        return head + "\n" + line


def _aggregate(records: list, dataset: str) -> MetricsReport:
    per_group: dict = {}
    for gname, m in records:
        per_group.setdefault(gname, []).append(m)
    per_group_mean = {g: {k: float(np.nanmean([m[k] for m in ms])) for k in ("S", "Fmax", "Emax", "MAE")}
                      for g, ms in per_group.items()}
    allm = [m for _, m in records]
    mean = {k: float(np.nanmean([m[k] for m in allm])) for k in ("S", "Fmax", "Emax", "MAE")}
    return MetricsReport(mean["S"], mean["Fmax"], mean["Emax"], mean["MAE"], len(allm), per_group_mean, dataset)


def evaluate_maps(preds: dict, gts: dict, dataset: str = "dataset") -> MetricsReport:
    """In-memory evaluation; both dicts map (group, stem) -> H x W array."""
    missing = sorted(k for k in gts if k not in preds)
    if missing:
        raise EvaluationError("missing predictions for: " + ", ".join(f"{g}/{s}" for g, s in missing))
    records = []
    for key in sorted(gts):
        p, g = preds[key], gts[key]
        if np.shape(p) != np.shape(g):
            p = resize_array(np.asarray(p, dtype=np.float64)[None], *np.shape(g))[0]
        records.append((key[0], all_metrics(p, g)))
    return _aggregate(records, dataset)


def _read_tree(root: Path) -> dict:
    out = {}
    for gdir in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in sorted(gdir.iterdir()):
            if f.suffix.lower() in (".png", ".jpg", ".jpeg"):
                out[(gdir.name, f.stem)] = read_gray(f)
    return out


def evaluate_dataset(pred_root, gt_root, dataset: Optional[str] = None) -> MetricsReport:
    """Evaluate ``pred_root/<group>/<stem>.png`` against the same layout under ``gt_root``."""
    gt_root = Path(gt_root)
    gts = {k: (v >= 0.5).astype(np.float64) for k, v in _read_tree(gt_root).items()}
    preds = _read_tree(Path(pred_root))
    return evaluate_maps(preds, gts, dataset or gt_root.parent.name or "dataset")
