"""Synthetic detection harness: scene generation, training, evaluation."""

from finedet.harness.boxes import Detection, iou, soft_nms
from finedet.harness.metrics import corloc, evaluate_map
from finedet.harness.synth import GeneratorConfig, Scene, SyntheticDataset, emulate_coarse_scores, generate_dataset
from finedet.harness.train import Checkpoint, MetricsReport, TrainConfig, infer, train

__all__ = [
    "Checkpoint", "Detection", "GeneratorConfig", "MetricsReport", "Scene", "SyntheticDataset",
    "TrainConfig", "corloc", "emulate_coarse_scores", "evaluate_map", "generate_dataset", "infer",
    "iou", "soft_nms", "train",
]
