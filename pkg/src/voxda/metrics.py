"""Evaluation: thresholded voxel IoU, domain-confusion accuracy, PCA embeddings."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

DEFAULT_THRESHOLD = 0.4


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = DEFAULT_THRESHOLD
    split: str = "test"
    domain: str = "both"  # source | target | both

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.domain not in ("source", "target", "both"):
            raise ValueError(f"domain must be source, target or both, got {self.domain!r}")


@dataclass
class IoUReport:
    per_class: Dict[str, float]
    counts: Dict[str, int]
    overall: float
    threshold: float
    method: str = ""
    domain: str = ""
    per_sample: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    def rows(self) -> List[dict]:
        rows = [{"class": name, "method": self.method, "iou": self.per_class[name],
                 "count": self.counts[name], "threshold": self.threshold}
                for name in self.per_class]
        # "overall" is the per-sample mean, i.e. weighted by class counts
        rows.append({"class": "overall", "method": self.method, "iou": self.overall,
                     "count": int(sum(self.counts.values())), "threshold": self.threshold})
        return rows


def iou(pred, gt, t: float = DEFAULT_THRESHOLD) -> float:
    """|{p > t} & {gt}| / |{p > t} | {gt}|; 1.0 when both sets are empty."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"iou: prediction {pred.shape} vs ground truth {gt.shape}")
    if not 0 < t < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {t}")
    p = pred > t
    g = gt > 0.5
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def batch_iou(pred, gt, t: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Per-sample IoU for (n, V, V, V) stacks."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"batch_iou: prediction {pred.shape} vs ground truth {gt.shape}")
    p = (pred > t).reshape(len(pred), -1)
    g = (gt > 0.5).reshape(len(gt), -1)
    inter = np.count_nonzero(p & g, axis=1)
    union = np.count_nonzero(p | g, axis=1)
    out = np.ones(len(pred))
    nz = union > 0
    out[nz] = inter[nz] / union[nz]
    return out


def iou_report_from_predictions(pred, gt, labels, class_names: Sequence[str],
                                t: float = DEFAULT_THRESHOLD, method: str = "", domain: str = "") -> IoUReport:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("iou_report: empty split")
    scores = batch_iou(pred, gt, t)
    per_class, counts = {}, {}
    for k, name in enumerate(class_names):
        sel = labels == k
        counts[name] = int(sel.sum())
        per_class[name] = float(scores[sel].mean()) if sel.any() else float("nan")
    return IoUReport(per_class=per_class, counts=counts, overall=float(scores.mean()),
                     threshold=t, method=method, domain=domain, per_sample=scores)


def iou_report(predict_fn, images, gt, labels, class_names: Sequence[str],
               eval_config: EvalConfig = EvalConfig(), method: str = "", domain: str = "") -> IoUReport:
    """Run ``predict_fn(images) -> probabilities`` and summarize IoU per class."""
    if len(images) == 0:
        raise ValueError("iou_report: empty split")
    pred = predict_fn(images)
    return iou_report_from_predictions(pred, gt, labels, class_names, eval_config.threshold, method, domain)


def reports_to_csv(reports: Sequence[IoUReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class", "method", "iou", "count", "threshold"])
    for rep in reports:
        for row in rep.rows():
            method = row["method"] if not rep.domain else f"{row['method']}@{rep.domain}"
            writer.writerow([row["class"], method, f"{row['iou']:.6f}", row["count"], f"{row['threshold']:g}"])
    return buf.getvalue()


def domain_confusion_accuracy(logits, domain_tags) -> float:
    """Fraction of samples whose domain is predicted correctly (logit > 0 means target)."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    tags = np.asarray(domain_tags).reshape(-1)
    if z.shape != tags.shape:
        raise ValueError(f"{z.size} logits for {tags.size} tags")
    if len(np.unique(tags)) < 2:
        raise ValueError("domain_confusion_accuracy needs samples from both domains")
    return float(np.mean((z > 0).astype(int) == tags))


def pca_embed(features, dims: int = 2):
    """Project mean-centred rows onto the top principal components.

    Returns ``(coords, components, explained_variance)``.  The sign of each
    component is fixed so that its largest-magnitude loading is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"pca_embed expects an (n, d) matrix, got shape {x.shape}")
    n = x.shape[0]
    if n < 3:
        raise ValueError(f"pca_embed needs n >= 3 rows, got {n}")
    if dims > x.shape[1]:
        raise ValueError(f"dims={dims} exceeds feature width {x.shape[1]}")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:dims]
    comps = evecs[:, order].T
    for i in range(dims):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return xc @ comps.T, comps, evals[order]


def embedding_csv(coords, domains, classes) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["x", "y", "domain", "class"])
    for (x, y), d, c in zip(np.asarray(coords)[:, :2], domains, classes):
        writer.writerow([f"{x:.6f}", f"{y:.6f}", d, c])
    return buf.getvalue()


DOMAIN_COLORS = {"source": "#6a3d9a", "target": "#e3c800"}


def embedding_svg(coords, domains, size: int = 400, margin: int = 20) -> str:
    """Scatter plot, one fill colour per domain."""
    xy = np.asarray(coords, dtype=np.float64)[:, :2]
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pts = margin + (xy - lo) / span * (size - 2 * margin)
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="#ffffff"/>']
    for (px, py), d in zip(pts, domains):
        color = DOMAIN_COLORS.get(d, "#888888")
        lines.append(f'<circle cx="{px:.2f}" cy="{size - py:.2f}" r="3" fill="{color}"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"
