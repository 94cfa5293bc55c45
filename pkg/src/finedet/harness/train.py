"""End-to-end training of the three streams, inference and evaluation."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from finedet.attention import class_softmax, fine_attention
from finedet.correlation import CorrelationMatrix
from finedet.errors import NumericalError, ValidationError
from finedet.harness.boxes import Detection, apply_deltas, soft_nms
from finedet.harness.metrics import COCO_THRESHOLDS, corloc, evaluate_map
from finedet.harness.model import HeadParameters
from finedet.harness.synth import Scene, SyntheticDataset
from finedet.losses import detection_loss, softmax, softmax_backward, weakly_loss
from finedet.memory import MemoryBank, MemoryScene, dual_memory_step
from finedet.taxonomy import build_semantic_correlation
from finedet.visual_corr import ThresholdRule, hard_assign, soft_assign

ABLATIONS = ("naive", "attention", "cg-memory", "dlm-fa")
BASELINE = "coarse-only"
CORRELATION_KINDS = ("semantic", "visual-hard", "visual-soft")
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    ablation: str = "attention"
    correlation: str = "semantic"
    beta: float | None = None
    theta_factor: float = 1.2
    nearest: bool = True
    epochs: int = 6
    lr: float = 0.05
    batch_pairs: int = 4
    lam: float = 0.1
    mu: float = 0.1
    momentum: float = 0.5
    gamma: float | None = None
    reg_weight: float = 0.5
    include_background: bool = False
    fa_min_prob: float = 0.0
    init_scale: float = 0.01
    seed: int = 0
    sigma: float = 0.55
    score_floor: float = 1e-3
    max_dets: int = 100
    all_points: bool = True

    def validate(self):
        if self.ablation not in ABLATIONS + (BASELINE,):
            raise ValidationError(f"unknown ablation {self.ablation!r}")
        if self.correlation not in CORRELATION_KINDS:
            raise ValidationError(f"unknown correlation kind {self.correlation!r}")
        if self.beta is not None and not self.beta > 0:
            raise ValidationError("beta must be positive")
        if self.epochs < 1 or self.batch_pairs < 1:
            raise ValidationError("epochs and batch_pairs must be >= 1")
        if self.lr < 0 or self.lam < 0 or self.mu < 0:
            raise ValidationError("lr, lam and mu must be non-negative")
        if not 0 <= self.momentum <= 1:
            raise ValidationError("momentum must lie in [0, 1]")
        if not self.sigma > 0:
            raise ValidationError("sigma must be positive")

    # ablation switches
    @property
    def uses_fine(self) -> bool:
        return self.ablation != BASELINE

    @property
    def uses_attention(self) -> bool:
        return self.ablation in ("attention", "cg-memory", "dlm-fa")

    @property
    def uses_proposal_memory(self) -> bool:
        return self.ablation in ("cg-memory", "dlm-fa")

    @property
    def uses_image_memory(self) -> bool:
        return self.ablation == "dlm-fa"


@dataclass
class LossBreakdown:
    l_cg_cls: float = 0.0
    l_cg_reg: float = 0.0
    l_cg: float = 0.0
    l_fg_global: float = 0.0
    l_fg_attention: float = 0.0
    l_fg: float = 0.0
    l_m_w: float = 0.0
    l_m_f: float = 0.0
    l_m: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def build_correlation(dataset: SyntheticDataset, cfg: TrainConfig) -> CorrelationMatrix:
    part = dataset.partition
    if cfg.correlation == "semantic":
        return build_semantic_correlation(dataset.graph, part)
    coarse = dataset.embeddings.select(part.coarse)
    fine = dataset.embeddings.select(part.fine)
    if cfg.correlation == "visual-hard":
        return hard_assign(coarse, fine, ThresholdRule(cfg.theta_factor, cfg.nearest))
    return soft_assign(coarse, fine, cfg.beta)


def class_softmax_backward(logits, grad_p, include_background=False):
    """dL/dlogits for :func:`finedet.attention.class_softmax`."""
    z = np.asarray(logits, dtype=np.float64)
    out = np.zeros_like(z)
    if include_background:
        q = softmax(z, axis=1)
        g = np.concatenate([grad_p, np.zeros((len(z), 1))], axis=1)
        return softmax_backward(q, g, axis=1)
    p = softmax(z[:, :-1], axis=1)
    out[:, :-1] = softmax_backward(p, grad_p, axis=1)
    return out


@dataclass
class _DetTargets:
    labels: np.ndarray  # coarse label, -1 background
    ce_labels: np.ndarray  # background mapped to n_coarse
    targets: np.ndarray
    fg: np.ndarray


def _det_targets(scene: Scene, n_coarse: int) -> _DetTargets:
    labels, targets = scene.proposal_targets()
    fg = labels >= 0
    return _DetTargets(labels, np.where(fg, labels, n_coarse), targets, fg)


def batch_objective(params: HeadParameters, det_batch, cls_batch, correlation, cfg: TrainConfig,
                    coarse_bank: MemoryBank | None = None, fine_bank: MemoryBank | None = None):
    """Loss breakdown and parameter gradient for one mini-batch.

    ``det_batch`` holds ``(scene, _DetTargets)`` pairs, ``cls_batch`` scenes.
    Memory banks, when given, are updated in place after the losses are
    computed.
    """
    grad = HeadParameters.zeros_like(params)
    lb = LossBreakdown()
    n_d, n_c = len(det_batch), len(cls_batch)
    n_fine = params.n_fine
    cache = []

    for scene, t in det_batch:
        x = scene.features
        z = params.coarse_logits(x)
        box = params.box_deltas(x)
        det = detection_loss(z, t.ce_labels, box[t.fg], t.targets[t.fg], cfg.reg_weight)
        lb.l_cg_cls += det.cls / n_d
        lb.l_cg_reg += det.reg / n_d
        gz = det.grad_logits / n_d
        grad.coarse_w += x.T @ gz
        grad.coarse_b += gz.sum(axis=0)
        gb = np.zeros_like(box)
        gb[t.fg] = det.grad_box / n_d
        grad.box_w += x.T @ gb
        grad.box_b += gb.sum(axis=0)
        cache.append(z)

    cls_coarse = []
    if cfg.uses_fine:
        lam = cfg.lam if cfg.uses_attention else 0.0
        for scene in cls_batch:
            x = scene.features
            sw = params.fine_logits(x)
            zc = params.coarse_logits(x)
            cls_coarse.append(zc)
            aw = fine_attention(zc, correlation, cfg.include_background) if lam else np.zeros_like(sw)
            wl = weakly_loss(sw, aw, scene.image_labels(n_fine), lam)
            lb.l_fg_global += wl.global_term / n_c
            lb.l_fg_attention += wl.attention_term / n_c
            gs = wl.grad_sw / n_c
            grad.fine_w += x.T @ gs
            grad.fine_b += gs.sum(axis=0)

    if cfg.uses_proposal_memory and coarse_bank is not None:
        image_level = cfg.uses_image_memory and fine_bank is not None
        mscenes = []
        det_fine = []
        for (scene, t), z in zip(det_batch, cache):
            fl = params.fine_logits(scene.features) if image_level else np.zeros((scene.n_proposals, n_fine))
            det_fine.append(fl)
            mscenes.append(MemoryScene("detection", scene.features,
                                       class_softmax(z, cfg.include_background), softmax(fl, axis=1),
                                       proposal_labels=t.labels))
        cls_fine = []
        for scene, zc in zip(cls_batch, cls_coarse):
            fl = params.fine_logits(scene.features)
            cls_fine.append(fl)
            mscenes.append(MemoryScene("classification", scene.features,
                                       class_softmax(zc, cfg.include_background), softmax(fl, axis=1),
                                       image_labels=tuple(int(c) for c in np.unique(scene.gt_fine)),
                                       foreground=np.argmax(zc, axis=1) != params.n_coarse))
        res = dual_memory_step(coarse_bank, fine_bank if fine_bank is not None else _dummy_bank(params),
                               mscenes, proposal_level=True, image_level=image_level,
                               min_prob=cfg.fa_min_prob)
        lb.l_m_w, lb.l_m_f = res.l_w, res.l_f
        scenes = [s for s, _ in det_batch] + list(cls_batch)
        zs = cache + cls_coarse
        fls = det_fine + cls_fine
        for scene, z, fl, ms, gc, gf in zip(scenes, zs, fls, mscenes, res.grad_coarse, res.grad_fine):
            x = scene.features
            if np.any(gc):
                dz = cfg.mu * class_softmax_backward(z, gc, cfg.include_background)
                grad.coarse_w += x.T @ dz
                grad.coarse_b += dz.sum(axis=0)
            if np.any(gf):
                dfl = cfg.mu * softmax_backward(ms.fine_probs, gf, axis=1)
                grad.fine_w += x.T @ dfl
                grad.fine_b += dfl.sum(axis=0)

    lb.l_cg = cfg.reg_weight * lb.l_cg_reg + lb.l_cg_cls
    lb.l_fg = lb.l_fg_global + (cfg.lam if cfg.uses_attention else 0.0) * lb.l_fg_attention
    lb.l_m = lb.l_m_w + lb.l_m_f
    lb.total = lb.l_cg + lb.l_fg + cfg.mu * lb.l_m
    return lb, grad


def _dummy_bank(params):
    return MemoryBank(params.n_fine, params.dim)


# --- checkpoint --------------------------------------------------------------

@dataclass
class Checkpoint:
    params: HeadParameters
    coarse_bank: MemoryBank
    fine_bank: MemoryBank
    correlation: CorrelationMatrix
    config: TrainConfig
    coarse_ids: tuple[str, ...]
    fine_ids: tuple[str, ...]
    epochs_completed: int = 0

    def to_json(self) -> str:
        doc = {
            "format": "finedet-checkpoint",
            "version": CHECKPOINT_VERSION,
            "epochs_completed": self.epochs_completed,
            "config": dataclasses.asdict(self.config),
            "coarse_ids": list(self.coarse_ids),
            "fine_ids": list(self.fine_ids),
            "params": self.params.to_dict(),
            "correlation": self.correlation.to_text(),
            "coarse_bank": self.coarse_bank.to_lines(),
            "fine_bank": self.fine_bank.to_lines(),
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Checkpoint":
        doc = json.loads(text)
        if doc.get("format") != "finedet-checkpoint":
            raise ValidationError("not a checkpoint file")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {doc.get('version')}")
        cfg = TrainConfig(**doc["config"])
        params = HeadParameters.from_dict(doc["params"])
        return cls(
            params,
            MemoryBank.from_lines(doc["coarse_bank"], params.dim, cfg.momentum, cfg.gamma),
            MemoryBank.from_lines(doc["fine_bank"], params.dim, cfg.momentum, cfg.gamma),
            CorrelationMatrix.from_text(doc["correlation"]),
            cfg, tuple(doc["coarse_ids"]), tuple(doc["fine_ids"]), doc["epochs_completed"],
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


# --- inference and evaluation --------------------------------------------------------

def fine_scores(params: HeadParameters, correlation, scene: Scene, rerank: bool,
                include_background: bool = False) -> np.ndarray:
    """Per-proposal fine scores in [0, 1].

    Class probabilities from the fine head, multiplied (when re-ranking) by
    the fine attention rescaled so the most-attended proposal of each class
    gets weight 1. Classes with no attention anywhere score 0.
    """
    prob = softmax(params.fine_logits(scene.features), axis=1)
    if not rerank:
        return prob
    aw = fine_attention(params.coarse_logits(scene.features), correlation, include_background)
    peak = aw.max(axis=0)
    rel = np.divide(aw, peak, out=np.zeros_like(aw), where=peak > 0)
    return np.clip(prob * rel, 0.0, 1.0)


def _candidates(boxes, scores, labels, floor, limit):
    rows, cols = np.nonzero(scores >= floor)
    vals = scores[rows, cols]
    order = np.lexsort((cols, rows, -vals))[:limit]
    return [Detection(tuple(boxes[rows[k]]), labels[cols[k]], float(vals[k])) for k in order]


def scene_detections(params, correlation, scene: Scene, cfg: TrainConfig, coarse_ids, fine_ids):
    """(coarse detections, fine detections, fine score matrix) for one scene."""
    if scene.n_proposals == 0:
        return [], [], np.zeros((0, len(fine_ids)))
    x = scene.features
    params.check_features(x)
    coarse_p = softmax(params.coarse_logits(x), axis=1)[:, :-1]
    boxes = apply_deltas(scene.proposals, params.box_deltas(x), scene.extent)
    coarse = soft_nms(_candidates(boxes, coarse_p, coarse_ids, cfg.score_floor, cfg.max_dets),
                      cfg.sigma, cfg.score_floor)
    fs = fine_scores(params, correlation, scene, cfg.uses_attention, cfg.include_background)
    fine = []
    if cfg.uses_fine:
        fine = soft_nms(_candidates(scene.proposals, fs, fine_ids, cfg.score_floor, cfg.max_dets),
                        cfg.sigma, cfg.score_floor)
    return coarse, fine, fs


def infer(checkpoint: Checkpoint, scene: Scene) -> list[Detection]:
    """Coarse then fine detections for one scene after soft-NMS."""
    if scene.n_proposals and scene.features.shape[1] != checkpoint.params.dim:
        raise ValidationError("scene feature dimension does not match checkpoint")
    coarse, fine, _ = scene_detections(checkpoint.params, checkpoint.correlation, scene,
                                       checkpoint.config, checkpoint.coarse_ids, checkpoint.fine_ids)
    return coarse + fine


@dataclass
class MetricsReport:
    ablation: str
    coarse_ap: dict = field(default_factory=dict)
    coarse_map50: float = 0.0
    coarse_map50_95: float = 0.0
    fine_ap: dict = field(default_factory=dict)
    fine_map50: float = 0.0
    fine_map50_95: float = 0.0
    fine_corloc: float = 0.0
    loss_trace: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def headline(self) -> dict:
        return {
            "coarse_map50": self.coarse_map50,
            "coarse_map50_95": self.coarse_map50_95,
            "fine_map50": self.fine_map50,
            "fine_map50_95": self.fine_map50_95,
            "fine_corloc": self.fine_corloc,
        }


def evaluate(params, correlation, scenes, cfg: TrainConfig, coarse_ids, fine_ids,
             ablation: str | None = None) -> MetricsReport:
    coarse_dets, fine_dets, coarse_gt, fine_gt = [], [], [], []
    tops = {}
    for img, scene in enumerate(scenes):
        c, f, fs = scene_detections(params, correlation, scene, cfg, coarse_ids, fine_ids)
        coarse_dets.append(c)
        fine_dets.append(f)
        coarse_gt.append([(tuple(b), coarse_ids[k]) for b, k in zip(scene.gt_boxes, scene.gt_coarse)])
        fine_gt.append([(tuple(b), fine_ids[k]) for b, k in zip(scene.gt_boxes, scene.gt_fine)])
        if cfg.uses_fine and scene.n_proposals:
            for k in np.unique(scene.gt_fine):
                tops[(img, fine_ids[k])] = tuple(scene.proposals[int(np.argmax(fs[:, k]))])
    cm = evaluate_map(coarse_dets, coarse_gt, COCO_THRESHOLDS, cfg.all_points, labels=coarse_ids)
    rep = MetricsReport(ablation or cfg.ablation)
    rep.coarse_ap = cm.per_class[0.5]
    rep.coarse_map50, rep.coarse_map50_95 = cm.map50, cm.map50_95
    if cfg.uses_fine:
        fm = evaluate_map(fine_dets, fine_gt, COCO_THRESHOLDS, cfg.all_points, labels=fine_ids)
        rep.fine_ap = fm.per_class[0.5]
        rep.fine_map50, rep.fine_map50_95 = fm.map50, fm.map50_95
        rep.fine_corloc = corloc(tops, fine_gt)
    return rep


# --- training loop -----------------------------------------------------------

class TrainingDiverged(NumericalError):
    def __init__(self, message, last_good: Checkpoint):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    report: MetricsReport


def train(cfg: TrainConfig, dataset: SyntheticDataset, progress=None) -> TrainResult:
    """Mini-batch gradient descent over alternating detection/classification scenes.

    Each step takes ``batch_pairs`` detection scenes and as many
    classification scenes. The learning rate drops by 10x every
    ``ceil(epochs / 3)`` epochs. Evaluation runs on the test split.
    """
    cfg.validate()
    part = dataset.partition
    n_coarse, n_fine = len(part.coarse), len(part.fine)
    correlation = build_correlation(dataset, cfg)
    params = HeadParameters.init(dataset.config.dim, n_coarse, n_fine,
                                 np.random.default_rng([cfg.seed, 1]), cfg.init_scale)
    coarse_bank = MemoryBank(n_coarse, dataset.config.dim, cfg.momentum, cfg.gamma, part.coarse)
    fine_bank = MemoryBank(n_fine, dataset.config.dim, cfg.momentum, cfg.gamma, part.fine)
    det = [(s, _det_targets(s, n_coarse)) for s in dataset.splits["detection"]]
    cls = list(dataset.splits["classification"]) if cfg.uses_fine else []
    n_pairs = max(len(det), len(cls))
    if n_pairs == 0:
        raise ValidationError("dataset has no training scenes")
    drop_every = math.ceil(cfg.epochs / 3)
    trace = []

    def snapshot(epochs_done):
        return Checkpoint(params.copy(), coarse_bank.copy(), fine_bank.copy(), correlation, cfg,
                          part.coarse, part.fine, epochs_done)

    last_good = snapshot(0)
    for epoch in range(cfg.epochs):
        lr = cfg.lr * 0.1 ** (epoch // drop_every)
        rng = np.random.default_rng([cfg.seed, 2, epoch])
        det_order = rng.permutation(len(det)) if det else np.zeros(0, dtype=int)
        cls_order = rng.permutation(len(cls)) if cls else np.zeros(0, dtype=int)
        sums = LossBreakdown()
        n_steps = 0
        for start in range(0, n_pairs, cfg.batch_pairs):
            idx = range(start, min(start + cfg.batch_pairs, n_pairs))
            det_batch = [det[det_order[i % len(det)]] for i in idx] if det else []
            cls_batch = [cls[cls_order[i % len(cls)]] for i in idx] if cls else []
            lb, grad = batch_objective(params, det_batch, cls_batch, correlation, cfg,
                                       coarse_bank if cfg.uses_proposal_memory else None,
                                       fine_bank if cfg.uses_image_memory else None)
            if not math.isfinite(lb.total) or not all(np.all(np.isfinite(g)) for g in grad.arrays()):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch + 1}, step {n_steps + 1}: {lb.as_dict()}", last_good)
            if lr:
                params.step(grad, lr)
            for k, v in lb.as_dict().items():
                setattr(sums, k, getattr(sums, k) + v)
            n_steps += 1
        if not params.is_finite():
            raise TrainingDiverged(f"parameters became non-finite in epoch {epoch + 1}", last_good)
        epoch_means = {k: v / n_steps for k, v in sums.as_dict().items()}
        trace.append({"epoch": epoch + 1, "lr": lr, **epoch_means})
        last_good = snapshot(epoch + 1)
        if progress:
            progress(epoch + 1, epoch_means)

    report = evaluate(params, correlation, dataset.splits["test"], cfg, part.coarse, part.fine)
    report.loss_trace = trace
    return TrainResult(last_good, report)
