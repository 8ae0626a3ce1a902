"""Training objectives: reconstruction, voxel classification, adversarial domain
loss, and the two discrepancy losses (CORAL covariance alignment and kernel MMD).

All functions take and return :class:`~voxda.tensor.Tensor` objects so they can
be differentiated end to end.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Mapping, Optional, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor

RECON_EPS = 1e-7
MMD_NEG_TOL = 1e-6

#: loss part names, in reporting order
PARTS = ("recon", "domain", "class", "coral", "mmd")


class NonFiniteLossError(FloatingPointError):
    """A loss term evaluated to NaN or infinity."""

    def __init__(self, part: str, value: float):
        super().__init__(f"loss part {part!r} is not finite ({value})")
        self.part = part
        self.value = value


@dataclass(frozen=True)
class KernelSpec:
    """Kernel for MMD.  ``bandwidth=None`` selects the median heuristic (rbf only)."""

    kind: str = "rbf"
    bandwidth: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("linear", "rbf"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError(f"kernel bandwidth must be positive, got {self.bandwidth}")


@dataclass(frozen=True)
class LossWeights:
    w_recon: float = 1.0
    w_domain: float = 0.1
    w_class: float = 0.1
    w_coral: float = 0.0
    w_mmd: float = 0.0
    grl_lambda: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")
        if not self.w_recon > 0:
            raise ValueError("w_recon must be > 0")

    def weight_for(self, part: str) -> float:
        return getattr(self, f"w_{part}")

    @property
    def uses_target(self) -> bool:
        """True when any term needs target-domain images in the batch."""
        return any(self.weight_for(p) > 0 for p in ("domain", "class", "coral", "mmd"))


@dataclass
class LossReport:
    """Per-part loss values (floats) from one evaluation of the composite loss."""

    parts: Dict[str, float] = field(default_factory=dict)
    weights: Optional[LossWeights] = None
    total: float = 0.0

    def get(self, part: str) -> float:
        return self.parts.get(part, 0.0)


def _check_batch(d: Tensor, name: str, min_rows: int = 1) -> None:
    if d.ndim != 2:
        raise T.ShapeError(f"{name}: expected an n x d feature matrix, got shape {d.shape}")
    if d.shape[0] < min_rows or d.shape[1] < 1:
        raise ValueError(f"{name}: need at least {min_rows} rows and 1 column, got {d.shape}")


# ---------------------------------------------------------------------------
# CORAL
# ---------------------------------------------------------------------------

def covariance(d: Tensor) -> Tensor:
    """Unbiased feature covariance ``(D^T D - (1/n) s^T s) / (n - 1)`` with ``s = 1^T D``."""
    _check_batch(d, "covariance")
    n = d.shape[0]
    if n < 2:
        raise ValueError(f"covariance needs n >= 2 rows, got {n}")
    s = T.tsum(d, axis=0, keepdims=True)
    gram = T.matmul(T.transpose(d), d)
    outer = T.matmul(T.transpose(s), s)
    return T.scale(gram - T.scale(outer, 1.0 / n), 1.0 / (n - 1))


def coral_loss(d_source: Tensor, d_target: Tensor) -> Tensor:
    """``||C_S - C_T||_F^2 / (4 d^2)``."""
    _check_batch(d_source, "coral_loss source", 2)
    _check_batch(d_target, "coral_loss target", 2)
    if d_source.shape[1] != d_target.shape[1]:
        raise T.ShapeError(
            f"coral_loss: feature dims differ {d_source.shape} vs {d_target.shape}")
    dim = d_source.shape[1]
    diff = covariance(d_source) - covariance(d_target)
    return T.scale(T.tsum(diff * diff), 1.0 / (4 * dim * dim))


# ---------------------------------------------------------------------------
# MMD
# ---------------------------------------------------------------------------

def median_heuristic(x_source, x_target) -> float:
    """Median pairwise Euclidean distance over the pooled points; 1.0 if that is 0."""
    xs = x_source.data if isinstance(x_source, Tensor) else np.asarray(x_source)
    xt = x_target.data if isinstance(x_target, Tensor) else np.asarray(x_target)
    pooled = np.concatenate([np.atleast_2d(xs), np.atleast_2d(xt)]).astype(np.float64)
    n = pooled.shape[0]
    if n < 2:
        raise ValueError(f"median_heuristic needs at least 2 pooled points, got {n}")
    diff = pooled[:, None, :] - pooled[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    iu = np.triu_indices(n, k=1)
    med = float(np.median(dist[iu]))
    return med if med > 0 else 1.0


def _sq_dists(a: Tensor, b: Tensor) -> Tensor:
    n, m = a.shape[0], b.shape[0]
    na = T.reshape(T.tsum(a * a, axis=1), (n, 1))
    nb = T.reshape(T.tsum(b * b, axis=1), (1, m))
    cross = T.matmul(a, T.transpose(b))
    return T.expand(na, (n, m)) + T.expand(nb, (n, m)) - T.scale(cross, 2.0)


def kernel_matrix(a: Tensor, b: Tensor, kernel: KernelSpec, bandwidth: Optional[float] = None) -> Tensor:
    if kernel.kind == "linear":
        return T.matmul(a, T.transpose(b))
    sigma = bandwidth if bandwidth is not None else kernel.bandwidth
    return T.exp(T.scale(_sq_dists(a, b), -1.0 / (2.0 * sigma * sigma)))


def mmd_loss(x_source: Tensor, x_target: Tensor, kernel: KernelSpec = KernelSpec()) -> Tensor:
    """Squared MMD, biased V-statistic: mean k(s,s') + mean k(t,t') - 2 mean k(s,t)."""
    _check_batch(x_source, "mmd_loss source")
    _check_batch(x_target, "mmd_loss target")
    if x_source.shape[1] != x_target.shape[1]:
        raise T.ShapeError(f"mmd_loss: feature dims differ {x_source.shape} vs {x_target.shape}")
    bandwidth = None
    if kernel.kind == "rbf":
        bandwidth = kernel.bandwidth or median_heuristic(x_source, x_target)
    kss = T.mean(kernel_matrix(x_source, x_source, kernel, bandwidth))
    ktt = T.mean(kernel_matrix(x_target, x_target, kernel, bandwidth))
    kst = T.mean(kernel_matrix(x_source, x_target, kernel, bandwidth))
    value = kss + ktt - T.scale(kst, 2.0)
    v = value.item()
    if v < -MMD_NEG_TOL:
        raise ArithmeticError(f"mmd_loss is negative beyond rounding ({v}); kernel not PSD?")
    return T.relu(value) if v < 0 else value


# ---------------------------------------------------------------------------
# supervised / adversarial terms
# ---------------------------------------------------------------------------

def domain_loss(logits: Tensor, domain_tags) -> Tensor:
    """Binary cross-entropy with logits; tags are 0 = source, 1 = target."""
    tags = np.asarray(domain_tags, dtype=logits.dtype).reshape(-1)
    if logits.size != tags.size or (logits.ndim == 2 and logits.shape[1] != 1):
        raise T.ShapeError(f"domain_loss: {logits.shape} logits for {tags.size} tags")
    z = T.reshape(logits, (tags.size,))
    # -[y log s(z) + (1-y) log(1-s(z))] == softplus(z) - y z
    return T.mean(T.softplus(z) - z * Tensor(tags, dtype=logits.dtype))


def recon_loss(pred: Tensor, gt) -> Tensor:
    """Mean voxel-wise binary cross-entropy of probabilities against a binary grid."""
    g = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=pred.dtype)
    if g.shape != pred.shape:
        raise T.ShapeError(f"recon_loss: prediction {pred.shape} vs ground truth {g.shape}")
    p = T.clip(pred, RECON_EPS, 1.0 - RECON_EPS)
    y = Tensor(g, dtype=pred.dtype)
    ll = y * T.log(p) + (1.0 - y) * T.log(1.0 - p)
    return T.neg(T.mean(ll))


def class_loss(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy."""
    labels = np.asarray(labels).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise T.ShapeError(f"class_loss: logits {logits.shape} for {labels.size} labels")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"class_loss: labels must lie in [0, {k}), got {labels.min()}..{labels.max()}")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(labels.size), labels.astype(np.int64)] = 1
    picked = T.tsum(logits * Tensor(onehot, dtype=logits.dtype), axis=1)
    return T.mean(T.logsumexp(logits, axis=1) - picked)


def composite_loss(parts: Mapping[str, Union[Tensor, float]], weights: LossWeights):
    """Weighted sum of the given parts.  Returns ``(total, LossReport)``.

    Parts missing from ``parts`` count as zero.  The domain part is expected to
    have been computed through the gradient reversal layer already.
    """
    unknown = set(parts) - set(PARTS)
    if unknown:
        raise KeyError(f"unknown loss parts: {sorted(unknown)}")
    total = None
    values = {}
    for name in PARTS:
        if name not in parts:
            continue
        part = parts[name]
        v = part.item() if isinstance(part, Tensor) else float(part)
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
        values[name] = v
        w = weights.weight_for(name)
        if w == 0:
            continue
        term = T.scale(part, w) if isinstance(part, Tensor) else w * v
        total = term if total is None else total + term
    if total is None:
        total = 0.0
    report = LossReport(parts=values, weights=weights,
                        total=total.item() if isinstance(total, Tensor) else float(total))
    return total, report
