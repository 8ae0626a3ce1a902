"""End-to-end training loop and evaluation.

Each step draws half a batch from the source pool and half from the target
pool.  Only source samples carry voxel supervision; target samples contribute
class labels, domain labels, and the discrepancy losses.  Target ground-truth
grids never enter this module's training path: :func:`fit_arrays` receives
target images and labels only.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import losses as L
from . import metrics as M
from . import tensor as T
from .data import ArraySplit, Dataset, MixedBatchLoader, read_dataset
from .model import (ModelParams, NetworkConfig, classify_domain, classify_voxel, decode, encode,
                    init_params, load_checkpoint, refine, save_checkpoint)

logger = logging.getLogger(__name__)

METHODS = ("none", "dann", "coral", "mmd", "dann+class")
DEFAULT_W_DOMAIN = 0.03
DEFAULT_W_CLASS = 0.1
DEFAULT_W_CORAL = 1.0
DEFAULT_W_MMD = 1.0

LOG_COLUMNS = ("epoch", "loss_recon", "loss_domain", "loss_class", "loss_coral", "loss_mmd",
               "iou_source", "iou_target", "domain_acc")


def method_weights(method: str, grl_lambda: float = 1.0, **overrides) -> L.LossWeights:
    """Loss weights for one of the named presets; keyword overrides win."""
    presets = {
        "none": {},
        "dann": {"w_domain": DEFAULT_W_DOMAIN},
        "coral": {"w_coral": DEFAULT_W_CORAL},
        "mmd": {"w_mmd": DEFAULT_W_MMD},
        "dann+class": {"w_domain": DEFAULT_W_DOMAIN, "w_class": DEFAULT_W_CLASS},
    }
    if method not in presets:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    w = {"w_recon": 1.0, "w_domain": 0.0, "w_class": 0.0, "w_coral": 0.0, "w_mmd": 0.0,
         "grl_lambda": grl_lambda}
    w.update(presets[method])
    w.update({k: v for k, v in overrides.items() if v is not None})
    return L.LossWeights(**w)


@dataclass
class TrainConfig:
    """Optimizer, schedule and bookkeeping settings.

    None of these values come from a published recipe: loss weights, learning
    rate, batch size and the GRL schedule are tuned for CPU-scale runs.
    """

    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    method: str = "dann+class"
    weights: L.LossWeights = field(default_factory=lambda: method_weights("dann+class"))
    grl_mode: str = "ramp"
    head_source_only: bool = True
    source_bn_stats: bool = True
    seed: int = 0
    eval_every: int = 1
    eval_split: str = "test"
    threshold: float = M.DEFAULT_THRESHOLD
    network: NetworkConfig = field(default_factory=NetworkConfig)
    data_dir: Optional[str] = None
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 4 or self.batch_size % 2:
            raise ValueError(f"batch_size must be even and >= 4, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.grl_mode not in ("constant", "ramp"):
            raise ValueError(f"grl_mode must be 'constant' or 'ramp', got {self.grl_mode!r}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    losses: Dict[str, float]
    iou_source: Optional[float] = None
    iou_target: Optional[float] = None
    domain_acc: Optional[float] = None

    def row(self) -> List[str]:
        def fmt(v):
            return "" if v is None else format(v, ".8g")
        return [str(self.epoch)] + [fmt(self.losses.get(p, 0.0)) for p in L.PARTS] + [
            fmt(self.iou_source), fmt(self.iou_target), fmt(self.domain_acc)]


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.records:
            w.writerow(r.row())
        return buf.getvalue()

    def column(self, name: str) -> List[Optional[float]]:
        if name.startswith("loss_"):
            return [r.losses.get(name[5:], 0.0) for r in self.records]
        return [getattr(r, name) for r in self.records]


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, Optional[np.ndarray]], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place.  A missing gradient counts as zero."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)


def grl_schedule(epoch: int, total_epochs: int, mode: str = "ramp", lam_max: float = 1.0) -> float:
    """Constant ``lam_max``, or the ramp ``lam_max * (2 / (1 + exp(-10 p)) - 1)`` with p = epoch / total."""
    if mode == "constant":
        return lam_max
    if mode != "ramp":
        raise ValueError(f"unknown grl schedule {mode!r}")
    p = epoch / total_epochs
    return lam_max * (2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0)


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------

EVAL_CHUNK = 64


def _chunks(n: int, size: int = EVAL_CHUNK):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


def predict_voxels(params: ModelParams, config: NetworkConfig, images: np.ndarray) -> np.ndarray:
    out = []
    for sl in _chunks(len(images)):
        z = encode(images[sl], params, config, "eval")
        out.append(refine(decode(z, params, config, "eval"), params, config, "eval").data)
    return np.concatenate(out)


def predict_latent(params: ModelParams, config: NetworkConfig, images: np.ndarray) -> np.ndarray:
    return np.concatenate([encode(images[sl], params, config, "eval").data for sl in _chunks(len(images))])


def predict_domain_logits(params: ModelParams, config: NetworkConfig, images: np.ndarray) -> np.ndarray:
    out = []
    for sl in _chunks(len(images)):
        out.append(classify_domain(encode(images[sl], params, config, "eval"), params, config, 0.0).data)
    return np.concatenate(out).reshape(-1)


@dataclass
class EvalResult:
    reports: List[M.IoUReport]
    domain_acc: Optional[float]

    def overall(self, domain: str) -> Optional[float]:
        for r in self.reports:
            if r.domain == domain:
                return r.overall
        return None


def evaluate_arrays(params: ModelParams, config: NetworkConfig, source: Optional[ArraySplit],
                    target: Optional[ArraySplit], class_names, threshold: float = M.DEFAULT_THRESHOLD,
                    method: str = "") -> EvalResult:
    reports = []
    for split in (source, target):
        if split is None:
            continue
        pred = predict_voxels(params, config, split.images)
        reports.append(M.iou_report_from_predictions(pred, split.voxels, split.labels, class_names,
                                                     threshold, method, split.domain))
    acc = None
    if source is not None and target is not None:
        logits = np.concatenate([predict_domain_logits(params, config, source.images),
                                 predict_domain_logits(params, config, target.images)])
        tags = np.r_[np.zeros(len(source), int), np.ones(len(target), int)]
        acc = M.domain_confusion_accuracy(logits, tags)
    return EvalResult(reports, acc)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train_step(params: ModelParams, config: NetworkConfig, weights: L.LossWeights,
               src_images: np.ndarray, src_voxels: np.ndarray, src_labels: np.ndarray,
               tgt_images: Optional[np.ndarray], tgt_labels: Optional[np.ndarray],
               grl_lambda: float, head_source_only: bool = True,
               source_bn_stats: bool = True) -> L.LossReport:
    """Forward, composite loss, backward.  Leaves gradients on ``params``.

    With ``head_source_only`` the voxel-class head learns from source
    reconstructions alone; the target class loss still trains everything
    upstream of the head.  With ``source_bn_stats`` batch normalization takes
    its statistics from the source rows and applies them to the target rows,
    so mixing target images into a batch cannot shift the source features.
    """
    h = len(src_images)
    use_target = weights.uses_target and tgt_images is not None
    images = np.concatenate([src_images, tgt_images]) if use_target else src_images
    rows = h if use_target and source_bn_stats else None
    latent = encode(images, params, config, "train", rows)
    raw = decode(latent, params, config, "train", rows)
    refined = refine(raw, params, config, "train", rows)

    parts = {}
    recon = L.recon_loss(refined[:h], src_voxels)
    if config.refiner_enabled:
        recon = T.scale(recon + L.recon_loss(raw[:h], src_voxels), 0.5)
    parts["recon"] = recon
    if use_target:
        if weights.w_domain > 0:
            logits = classify_domain(latent, params, config, grl_lambda)
            parts["domain"] = L.domain_loss(logits, np.r_[np.zeros(h), np.ones(len(tgt_images))])
        if weights.w_class > 0:
            labels = np.concatenate([src_labels, tgt_labels])
            if head_source_only:
                # otherwise the head learns to read arbitrary codes in target grids
                logits = T.concat([classify_voxel(refined[:h], params, config),
                                   classify_voxel(refined[h:], params, config, frozen=True)])
            else:
                logits = classify_voxel(refined, params, config)
            parts["class"] = L.class_loss(logits, labels)
        if weights.w_coral > 0:
            parts["coral"] = L.coral_loss(latent[:h], latent[h:])
        if weights.w_mmd > 0:
            parts["mmd"] = L.mmd_loss(latent[:h], latent[h:])
    total, report = L.composite_loss(parts, weights)
    params.zero_grad()
    total.backward()
    return report


def fit_arrays(source: ArraySplit, target: Optional[ArraySplit], net: NetworkConfig, cfg: TrainConfig,
               eval_source: Optional[ArraySplit] = None, eval_target: Optional[ArraySplit] = None,
               class_names=None, params: Optional[ModelParams] = None,
               on_epoch: Optional[Callable[[EpochRecord, ModelParams], None]] = None):
    """Train from in-memory arrays.  ``target.voxels`` is never read.

    Returns ``(params, TrainLog)``.
    """
    weights = cfg.weights
    if weights.uses_target and target is None:
        raise ValueError("the selected loss weights need target-domain images")
    class_names = class_names or [str(k) for k in range(net.num_classes)]
    params = params or init_params(net, cfg.seed)
    tgt_images = target.images if target is not None else None
    tgt_labels = target.labels if target is not None else None

    n_target = len(tgt_images) if (weights.uses_target and tgt_images is not None) else len(source)
    loader = MixedBatchLoader(len(source), n_target, cfg.batch_size, cfg.seed)
    state = AdamState()
    log = TrainLog()
    for epoch in range(cfg.epochs):
        lam = grl_schedule(epoch, cfg.epochs, cfg.grl_mode, weights.grl_lambda)
        sums = {p: 0.0 for p in L.PARTS}
        steps = 0
        for si, ti in loader.epoch(epoch):
            report = train_step(
                params, net, weights, source.images[si], source.voxels[si], source.labels[si],
                tgt_images[ti] if weights.uses_target else None,
                tgt_labels[ti] if weights.uses_target else None, lam, cfg.head_source_only,
                cfg.source_bn_stats)
            adam_step({k: t.data for k, t in params.tensors.items()},
                      {k: t.grad for k, t in params.tensors.items()},
                      state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            for p, v in report.parts.items():
                sums[p] += v
            steps += 1
        rec = EpochRecord(epoch + 1, {p: sums[p] / steps for p in L.PARTS})
        if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs:
            if eval_source is not None or eval_target is not None:
                res = evaluate_arrays(params, net, eval_source, eval_target, class_names, cfg.threshold)
                rec.iou_source = res.overall("source")
                rec.iou_target = res.overall("target")
                rec.domain_acc = res.domain_acc
        log.records.append(rec)
        logger.info("epoch %d %s", rec.epoch, rec.row())
        if on_epoch is not None:
            on_epoch(rec, params)
    return params, log


def _config_json(cfg: TrainConfig) -> str:
    d = asdict(cfg)
    d["network"] = json.loads(cfg.network.to_json())
    return json.dumps(d, sort_keys=True, indent=2) + "\n"


def train(cfg: TrainConfig):
    """Train on the dataset at ``cfg.data_dir`` and write outputs to ``cfg.out_dir``.

    Writes ``checkpoint.vxda`` (at each eval and at the end), the append-only
    ``train_log.csv``, ``iou_report.csv`` for the final model, and the resolved
    ``train_config.json``.  Returns ``(params, TrainLog)``.
    """
    if cfg.data_dir is None:
        raise ValueError("TrainConfig.data_dir is required")
    ds = read_dataset(cfg.data_dir)
    net = replace(cfg.network, num_classes=ds.num_classes, voxel_size=ds.manifest["voxel_size"],
                  image_size=ds.manifest["image_size"])
    source = ds.arrays("train", "source")
    target = ds.arrays("train", "target") if cfg.weights.uses_target else None
    if target is not None:
        # the training path has no business with target grids
        target = replace(target, voxels=np.empty((0,), np.float32))
    eval_source = ds.arrays(cfg.eval_split, "source")
    eval_target = ds.arrays(cfg.eval_split, "target")

    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_config.json").write_text(_config_json(cfg))
        (out / "train_log.csv").write_text(",".join(LOG_COLUMNS) + "\n")

    def on_epoch(rec: EpochRecord, params: ModelParams):
        if out is None:
            return
        with open(out / "train_log.csv", "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(rec.row())
        if rec.iou_source is not None or rec.epoch == cfg.epochs:
            save_checkpoint(out / "checkpoint.vxda", net, params)

    params, log = fit_arrays(source, target, net, cfg, eval_source, eval_target, ds.class_names,
                             on_epoch=on_epoch)
    if out is not None:
        res = evaluate_arrays(params, net, eval_source, eval_target, ds.class_names, cfg.threshold, cfg.method)
        (out / "iou_report.csv").write_text(M.reports_to_csv(res.reports))
    return params, log


def check_compatible(config: NetworkConfig, ds: Dataset) -> None:
    """Raise ValueError when a network cannot consume the dataset's images and grids."""
    if (config.voxel_size != ds.manifest["voxel_size"] or config.image_size != ds.manifest["image_size"]
            or config.num_classes != ds.num_classes):
        raise ValueError(
            f"checkpoint (V={config.voxel_size}, image={config.image_size}, K={config.num_classes}) is "
            f"incompatible with dataset (V={ds.manifest['voxel_size']}, image={ds.manifest['image_size']}, "
            f"K={ds.num_classes})")


def evaluate(checkpoint, dataset, eval_config: M.EvalConfig = M.EvalConfig(), method: str = "",
             network: Optional[NetworkConfig] = None) -> EvalResult:
    """Evaluate a checkpoint on one split of a dataset (eval mode throughout)."""
    config, params = load_checkpoint(checkpoint)
    ds = dataset if isinstance(dataset, Dataset) else read_dataset(dataset)
    if network is not None and network != config:
        raise ValueError(f"checkpoint network {config} does not match expected {network}")
    check_compatible(config, ds)
    domains = ("source", "target") if eval_config.domain == "both" else (eval_config.domain,)
    splits = {d: ds.arrays(eval_config.split, d) for d in domains}
    return evaluate_arrays(params, config, splits.get("source"), splits.get("target"), ds.class_names,
                           eval_config.threshold, method)
