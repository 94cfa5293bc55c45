"""Synthetic scenes standing in for a backbone and a region proposal network.

Every fine class owns a Gaussian feature cluster centred on its coarse
parent's mean plus a class offset. Each object contributes jittered
whole-object proposals and a few small "part" proposals. Part features carry
little of the coarse signal and an amplified fine offset, so a classifier
trained from image labels alone tends to prefer them over the whole object.
Background proposals carry noise, sometimes mixed with the fine offset of an
object in the scene (context).

The last ``GEOMETRY_DIMS`` feature dimensions hold a noisy encoding of the
proposal-to-object regression target, so the box head has something to learn.
"""

from __future__ import annotations

import dataclasses
import io
import json
from dataclasses import dataclass, field

import numpy as np

from finedet.errors import ValidationError
from finedet.harness.boxes import box_deltas, iou, pairwise_iou
from finedet.taxonomy import ClassPartition, TaxonomyGraph, hypernym_closure
from finedet.visual_corr import ClassEmbeddingTable, class_representation

GEOMETRY_DIMS = 4
KIND_GOOD, KIND_PART, KIND_BACKGROUND, KIND_CONTEXT = 0, 1, 2, 3
SPLITS = ("detection", "classification", "test")
DATASET_MAGIC = b"FINEDET-DATASET 1\n"


@dataclass
class GeneratorConfig:
    n_coarse: int = 8
    fine_per_coarse: int = 4
    dim: int = 32
    n_detection: int = 1000
    n_classification: int = 1000
    n_test: int = 400
    objects_min: int = 1
    objects_max: int = 3
    proposals_per_scene: int = 40
    good_per_object: int = 4
    parts_per_object: int = 2
    extent: float = 512.0
    jitter: float = 0.12
    feature_noise: float = 1.5
    coarse_scale: float = 1.0
    fine_scale: float = 0.6
    part_coarse: float = 0.1
    part_fine: float = 1.6
    context_prob: float = 0.3
    context_strength: float = 0.8
    geometry_gain: float = 1.0
    geometry_noise: float = 0.1
    embedding_samples: int = 20

    @property
    def semantic_dim(self) -> int:
        return self.dim - GEOMETRY_DIMS

    def validate(self):
        if self.dim <= GEOMETRY_DIMS:
            raise ValidationError(f"dim must exceed {GEOMETRY_DIMS}")
        if self.n_coarse < 1 or self.fine_per_coarse < 1:
            raise ValidationError("need at least one coarse and one fine class per coarse class")
        if not 1 <= self.objects_min <= self.objects_max:
            raise ValidationError("objects_min must be in [1, objects_max]")
        need = self.objects_max * (self.good_per_object + self.parts_per_object)
        if need > self.proposals_per_scene:
            raise ValidationError(f"proposals_per_scene must be >= {need}")
        if self.good_per_object < 1:
            raise ValidationError("good_per_object must be >= 1")
        for name in ("jitter", "feature_noise", "geometry_noise", "context_prob"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")
        if min(self.n_detection, self.n_classification, self.n_test) < 0:
            raise ValidationError("split sizes must be non-negative")


@dataclass
class Scene:
    source: str
    extent: tuple[float, float]
    gt_boxes: np.ndarray
    gt_fine: np.ndarray
    gt_coarse: np.ndarray
    proposals: np.ndarray
    features: np.ndarray
    proposal_kind: np.ndarray
    proposal_object: np.ndarray

    @property
    def n_proposals(self) -> int:
        return len(self.proposals)

    def image_labels(self, n_fine: int) -> np.ndarray:
        y = np.zeros(n_fine)
        y[np.unique(self.gt_fine)] = 1.0
        return y

    def proposal_targets(self, threshold: float = 0.5):
        """Coarse label per proposal (``-1`` background) and box targets.

        A proposal is foreground when its best IoU with a ground-truth box
        reaches ``threshold``.
        """
        labels = np.full(self.n_proposals, -1, dtype=int)
        targets = np.zeros((self.n_proposals, 4))
        if len(self.gt_boxes) and self.n_proposals:
            ov = pairwise_iou(self.proposals, self.gt_boxes)
            best = np.argmax(ov, axis=1)
            fg = ov[np.arange(self.n_proposals), best] >= threshold
            labels[fg] = self.gt_coarse[best[fg]]
            if fg.any():
                targets[fg] = box_deltas(self.proposals[fg], self.gt_boxes[best[fg]])
        return labels, targets


@dataclass
class SyntheticDataset:
    config: GeneratorConfig
    seed: int
    graph: TaxonomyGraph
    partition: ClassPartition
    fine_parent: np.ndarray
    coarse_means: np.ndarray
    fine_offsets: np.ndarray
    embeddings: ClassEmbeddingTable
    splits: dict[str, list[Scene]] = field(default_factory=dict)

    @property
    def n_coarse(self) -> int:
        return len(self.partition.coarse)

    @property
    def n_fine(self) -> int:
        return len(self.partition.fine)

    def statistics(self) -> list[tuple[str, int, int, int]]:
        """Rows of (level, classes, training scenes, test scenes)."""
        det, cls, test = (self.splits.get(s, []) for s in SPLITS)
        return [
            ("coarse-grained", self.n_coarse, len(det), len(test)),
            ("fine-grained", self.n_fine, len(cls), len(test)),
        ]


def default_taxonomy(n_coarse: int, fine_per_coarse: int):
    coarse = [f"coarse{i:02d}" for i in range(n_coarse)]
    fine = [f"fine{i:02d}_{j:02d}" for i in range(n_coarse) for j in range(fine_per_coarse)]
    edges = [(c, fine[i * fine_per_coarse + j]) for i, c in enumerate(coarse) for j in range(fine_per_coarse)]
    return TaxonomyGraph(tuple(coarse + fine), tuple(edges)), ClassPartition(tuple(coarse), tuple(fine))


def _fine_parents(graph, partition):
    index = {c: i for i, c in enumerate(partition.coarse)}
    parents = []
    for f in partition.fine:
        above = [index[c] for c in partition.coarse if c in hypernym_closure(graph, f)]
        if not above:
            raise ValidationError(f"fine class {f!r} has no coarse ancestor")
        parents.append(above[0])
    return np.array(parents, dtype=int)


def _class_rng(seed):
    return np.random.default_rng([seed, 7919])


def _scene_rng(seed, split, index):
    return np.random.default_rng([seed, SPLITS.index(split) + 1, index])


def _random_box(rng, extent, lo, hi):
    w = rng.uniform(lo, hi) * extent
    h = rng.uniform(lo, hi) * extent
    x1 = rng.uniform(0, extent - w)
    y1 = rng.uniform(0, extent - h)
    return np.array([x1, y1, x1 + w, y1 + h])


def _jitter_box(rng, box, jitter, extent):
    if jitter == 0:
        return box.copy()
    w, h = box[2] - box[0], box[3] - box[1]
    for _ in range(20):
        cand = box + jitter * np.array([w, h, w, h]) * rng.standard_normal(4)
        cand = np.clip(cand, 0, extent)
        if cand[2] - cand[0] > 1 and cand[3] - cand[1] > 1 and iou(cand, box) >= 0.5:
            return cand
    return box.copy()


def _part_box(rng, box):
    w, h = box[2] - box[0], box[3] - box[1]
    pw, ph = rng.uniform(0.25, 0.45) * w, rng.uniform(0.25, 0.45) * h
    x1 = box[0] + rng.uniform(0, w - pw)
    y1 = box[1] + rng.uniform(0, h - ph)
    return np.array([x1, y1, x1 + pw, y1 + ph])


def _make_scene(cfg: GeneratorConfig, ds: SyntheticDataset, source, rng) -> Scene:
    extent = cfg.extent
    n_obj = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    boxes, fine = [], []
    for _ in range(n_obj):
        for _attempt in range(50):
            b = _random_box(rng, extent, 0.2, 0.5)
            if all(iou(b, o) < 0.3 for o in boxes):
                break
        boxes.append(b)
        fine.append(int(rng.integers(ds.n_fine)))
    boxes = np.array(boxes).reshape(-1, 4)
    fine = np.array(fine, dtype=int)
    coarse = ds.fine_parent[fine]

    ds_dim = cfg.semantic_dim
    props, feats, kinds, owners = [], [], [], []

    def add(box, sem, kind, owner, geometry):
        props.append(box)
        feats.append(np.concatenate([sem, geometry]))
        kinds.append(kind)
        owners.append(owner)

    def noise():
        return cfg.feature_noise * rng.standard_normal(ds_dim)

    def geom_noise():
        return cfg.geometry_noise * rng.standard_normal(GEOMETRY_DIMS)

    for k in range(n_obj):
        mu, delta = ds.coarse_means[coarse[k]], ds.fine_offsets[fine[k]]
        for _ in range(cfg.good_per_object):
            b = _jitter_box(rng, boxes[k], cfg.jitter, extent)
            t = box_deltas(b, boxes[k])[0]
            add(b, mu + delta + noise(), KIND_GOOD, k, cfg.geometry_gain * t + geom_noise())
        for _ in range(cfg.parts_per_object):
            b = _part_box(rng, boxes[k])
            add(b, cfg.part_coarse * mu + cfg.part_fine * delta + noise(), KIND_PART, k, geom_noise())
    while len(props) < cfg.proposals_per_scene:
        for _attempt in range(50):
            b = _random_box(rng, extent, 0.05, 0.4)
            if all(iou(b, o) < 0.3 for o in boxes):
                break
        sem = noise()
        kind = KIND_BACKGROUND
        if rng.random() < cfg.context_prob:
            sem = sem + cfg.context_strength * ds.fine_offsets[fine[int(rng.integers(n_obj))]]
            kind = KIND_CONTEXT
        add(b, sem, kind, -1, geom_noise())

    order = rng.permutation(len(props))
    return Scene(
        source=source,
        extent=(extent, extent),
        gt_boxes=boxes,
        gt_fine=fine,
        gt_coarse=coarse,
        proposals=np.array(props)[order],
        features=np.array(feats)[order],
        proposal_kind=np.array(kinds, dtype=int)[order],
        proposal_object=np.array(owners, dtype=int)[order],
    )


def generate_dataset(config: GeneratorConfig, seed: int, graph: TaxonomyGraph | None = None,
                     partition: ClassPartition | None = None) -> SyntheticDataset:
    """Deterministic synthetic dataset for ``(config, seed)``.

    Without an explicit taxonomy a balanced two-level tree with
    ``fine_per_coarse`` children per coarse class is used.
    """
    config.validate()
    if graph is None or partition is None:
        graph, partition = default_taxonomy(config.n_coarse, config.fine_per_coarse)
    partition.check_graph(graph)
    fine_parent = _fine_parents(graph, partition)
    rng = _class_rng(seed)
    sdim = config.semantic_dim
    coarse_means = config.coarse_scale * rng.standard_normal((len(partition.coarse), sdim))
    fine_offsets = config.fine_scale * rng.standard_normal((len(partition.fine), sdim))

    def object_feature(f):
        return np.concatenate([coarse_means[fine_parent[f]] + fine_offsets[f]
                               + config.feature_noise * rng.standard_normal(sdim),
                               np.zeros(GEOMETRY_DIMS)])

    reps, ids = [], []
    for ci, cid in enumerate(partition.coarse):
        children = np.flatnonzero(fine_parent == ci)
        picks = rng.choice(children, size=config.embedding_samples) if len(children) else []
        samples = [object_feature(f) for f in picks] or [np.concatenate([coarse_means[ci], np.zeros(GEOMETRY_DIMS)])]
        reps.append(class_representation(samples))
        ids.append(cid)
    for fi, fid in enumerate(partition.fine):
        reps.append(class_representation([object_feature(fi) for _ in range(config.embedding_samples)]))
        ids.append(fid)
    ds = SyntheticDataset(config, seed, graph, partition, fine_parent, coarse_means, fine_offsets,
                          ClassEmbeddingTable(tuple(ids), np.array(reps)))
    sizes = {"detection": config.n_detection, "classification": config.n_classification, "test": config.n_test}
    for split in SPLITS:
        ds.splits[split] = [_make_scene(config, ds, split, _scene_rng(seed, split, i))
                            for i in range(sizes[split])]
    return ds


def emulate_coarse_scores(scene: Scene, n_coarse: int, noise: float, rng=None, peak: float = 4.0) -> np.ndarray:
    """Coarse logits ``(P, n_coarse + 1)`` peaked at each proposal's true class.

    The true class is the coarse label of the best-overlapping object when
    IoU >= 0.5, background (last column) otherwise.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    labels, _ = scene.proposal_targets()
    truth = np.where(labels >= 0, labels, n_coarse)
    logits = np.zeros((scene.n_proposals, n_coarse + 1))
    logits[np.arange(scene.n_proposals), truth] = peak
    return logits + noise * rng.standard_normal(logits.shape)


# --- dataset file -------------------------------------------------------------

_SCENE_ARRAYS = ("gt_boxes", "gt_fine", "gt_coarse", "proposals", "features", "proposal_kind", "proposal_object")


def save_dataset(ds: SyntheticDataset, path) -> None:
    """Write a self-describing container: magic, JSON header, raw arrays.

    Arrays are little-endian and listed in the header in write order, so the
    file is byte-identical for identical datasets.
    """
    from finedet.taxonomy import serialize_partition, serialize_taxonomy

    arrays = [("coarse_means", ds.coarse_means), ("fine_offsets", ds.fine_offsets),
              ("fine_parent", ds.fine_parent), ("embeddings", ds.embeddings.vectors)]
    scenes = []
    for split in SPLITS:
        for i, sc in enumerate(ds.splits.get(split, [])):
            scenes.append({"split": split, "extent": list(sc.extent)})
            for name in _SCENE_ARRAYS:
                arrays.append((f"{split}/{i}/{name}", getattr(sc, name)))
    layout = []
    blobs = io.BytesIO()
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        dtype = "<f8" if arr.dtype.kind == "f" else "<i8"
        data = arr.astype(dtype).tobytes()
        layout.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "nbytes": len(data)})
        blobs.write(data)
    header = {
        "seed": ds.seed,
        "dim": ds.config.dim,
        "counts": {s: len(ds.splits.get(s, [])) for s in SPLITS},
        "generator": dataclasses.asdict(ds.config),
        "taxonomy": serialize_taxonomy(ds.graph),
        "partition": serialize_partition(ds.partition),
        "embedding_ids": list(ds.embeddings.ids),
        "scenes": scenes,
        "arrays": layout,
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(f"{len(head)}\n".encode())
        fh.write(head)
        fh.write(blobs.getvalue())


def load_dataset(path) -> SyntheticDataset:
    from finedet.taxonomy import parse_partition, parse_taxonomy

    with open(path, "rb") as fh:
        if fh.readline() != DATASET_MAGIC:
            raise ValidationError(f"{path} is not a dataset file")
        size = int(fh.readline())
        header = json.loads(fh.read(size))
        arrays = {}
        for item in header["arrays"]:
            buf = fh.read(item["nbytes"])
            if len(buf) != item["nbytes"]:
                raise ValidationError(f"{path} is truncated")
            arrays[item["name"]] = np.frombuffer(buf, dtype=item["dtype"]).reshape(item["shape"]).copy()
    cfg = GeneratorConfig(**header["generator"])
    graph = parse_taxonomy(header["taxonomy"])
    partition = parse_partition(header["partition"], graph)
    ds = SyntheticDataset(cfg, header["seed"], graph, partition, arrays["fine_parent"].astype(int),
                          arrays["coarse_means"], arrays["fine_offsets"],
                          ClassEmbeddingTable(tuple(header["embedding_ids"]), arrays["embeddings"]))
    counters = dict.fromkeys(SPLITS, 0)
    for meta in header["scenes"]:
        split = meta["split"]
        i = counters[split]
        counters[split] += 1
        kw = {name: arrays[f"{split}/{i}/{name}"] for name in _SCENE_ARRAYS}
        for name in ("gt_fine", "gt_coarse", "proposal_kind", "proposal_object"):
            kw[name] = kw[name].astype(int)
        ds.splits.setdefault(split, []).append(Scene(source=split, extent=tuple(meta["extent"]), **kw))
    for split in SPLITS:
        ds.splits.setdefault(split, [])
    return ds
