import numpy as np
import pytest

from finedet.errors import ValidationError
from finedet.harness.boxes import Detection, pairwise_iou
from finedet.harness.metrics import evaluate_map
from finedet.harness.synth import (GEOMETRY_DIMS, KIND_GOOD, emulate_coarse_scores, generate_dataset,
                                   load_dataset, save_dataset)
from finedet.taxonomy import hypernym_closure

from conftest import small_config


def test_same_seed_gives_identical_files(tmp_path):
    cfg = small_config()
    a, b = tmp_path / "a.fgds", tmp_path / "b.fgds"
    save_dataset(generate_dataset(cfg, 4), a)
    save_dataset(generate_dataset(cfg, 4), b)
    assert a.read_bytes() == b.read_bytes()
    save_dataset(generate_dataset(cfg, 5), b)
    assert a.read_bytes() != b.read_bytes()


def test_save_load_roundtrip(tmp_path, small_dataset):
    path = tmp_path / "d.fgds"
    save_dataset(small_dataset, path)
    back = load_dataset(path)
    assert back.config == small_dataset.config and back.partition == small_dataset.partition
    for split, scenes in small_dataset.splits.items():
        assert len(back.splits[split]) == len(scenes)
        for s, t in zip(scenes, back.splits[split]):
            assert np.array_equal(s.features, t.features) and np.array_equal(s.gt_fine, t.gt_fine)
    path2 = tmp_path / "e.fgds"
    save_dataset(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.fgds"
    p.write_bytes(b"hello\n")
    with pytest.raises(ValidationError):
        load_dataset(p)


def test_scene_invariants(small_dataset):
    ds = small_dataset
    for split, scenes in ds.splits.items():
        for s in scenes:
            w, h = s.extent
            for boxes in (s.gt_boxes, s.proposals):
                assert np.all(boxes[:, 0] < boxes[:, 2]) and np.all(boxes[:, 1] < boxes[:, 3])
                assert np.all(boxes >= 0) and np.all(boxes[:, [0, 2]] <= w) and np.all(boxes[:, [1, 3]] <= h)
            for f, c in zip(s.gt_fine, s.gt_coarse):
                assert ds.partition.coarse[c] in hypernym_closure(ds.graph, ds.partition.fine[f])
            good = s.proposal_kind == KIND_GOOD
            ov = pairwise_iou(s.proposals[good], s.gt_boxes)
            assert np.all(ov[np.arange(good.sum()), s.proposal_object[good]] >= 0.5)


def test_split_counts_match_config(small_dataset):
    cfg = small_dataset.config
    assert [len(small_dataset.splits[s]) for s in ("detection", "classification", "test")] == \
        [cfg.n_detection, cfg.n_classification, cfg.n_test]


def test_statistics_match_recount(tmp_path, small_dataset):
    path = tmp_path / "d.fgds"
    save_dataset(small_dataset, path)
    back = load_dataset(path)
    recount = [("coarse-grained", len(set(back.fine_parent)), len(back.splits["detection"]), len(back.splits["test"])),
               ("fine-grained", len(back.fine_parent), len(back.splits["classification"]), len(back.splits["test"]))]
    assert small_dataset.statistics() == recount


def test_noise_free_good_proposals_hit_exactly():
    ds = generate_dataset(small_config(jitter=0.0, feature_noise=0.0), 2)
    for s in ds.splits["test"]:
        good = s.proposal_kind == KIND_GOOD
        ov = pairwise_iou(s.proposals[good], s.gt_boxes)
        assert np.all(ov[np.arange(good.sum()), s.proposal_object[good]] == 1.0)


def test_well_separated_clusters_are_classifiable():
    cfg = small_config(fine_scale=2.0, coarse_scale=0.0, feature_noise=0.2)
    ds = generate_dataset(cfg, 9)
    centres = ds.fine_offsets
    sep = min(np.linalg.norm(a - b) for i, a in enumerate(centres) for b in centres[i + 1:])
    assert sep / cfg.feature_noise >= 10
    hits = total = 0
    for s in ds.splits["detection"]:
        good = s.proposal_kind == KIND_GOOD
        x = s.features[good, :-GEOMETRY_DIMS]
        pred = np.argmin(((x[:, None, :] - centres[None]) ** 2).sum(-1), axis=1)
        hits += int((pred == s.gt_fine[s.proposal_object[good]]).sum())
        total += int(good.sum())
    assert hits / total > 0.99


def test_emulated_scores(small_dataset):
    s = small_dataset.splits["test"][0]
    n = small_dataset.n_coarse
    labels, _ = s.proposal_targets()
    clean = emulate_coarse_scores(s, n, 0.0)
    assert np.array_equal(np.argmax(clean, axis=1), np.where(labels >= 0, labels, n))
    rng = np.random.default_rng(1)
    rows = hits = 0
    scenes = small_dataset.splits["detection"]
    while rows < 10_000:
        sc = scenes[rows % len(scenes)]
        lab, _ = sc.proposal_targets()
        noisy = emulate_coarse_scores(sc, n, 1e3, rng)
        hits += int((np.argmax(noisy, axis=1) == np.where(lab >= 0, lab, n)).sum())
        rows += sc.n_proposals
    assert abs(hits / rows - 1 / (n + 1)) < 0.03
    a = emulate_coarse_scores(s, n, 0.5, np.random.default_rng(3))
    assert np.array_equal(a, emulate_coarse_scores(s, n, 0.5, np.random.default_rng(3)))


def test_oracle_detections_score_perfectly():
    ds = generate_dataset(small_config(jitter=0.0, feature_noise=0.0), 2)
    dets, gts = [], []
    for s in ds.splits["test"]:
        labels = [ds.partition.fine[k] for k in s.gt_fine]
        dets.append([Detection(tuple(b), lab, 1.0) for b, lab in zip(s.gt_boxes, labels)])
        gts.append([(tuple(b), lab) for b, lab in zip(s.gt_boxes, labels)])
    assert evaluate_map(dets, gts, (0.5,)).map50 == 1.0


def test_config_validation():
    with pytest.raises(ValidationError):
        generate_dataset(small_config(objects_min=4, objects_max=3), 0)
    with pytest.raises(ValidationError):
        generate_dataset(small_config(proposals_per_scene=3), 0)
    with pytest.raises(ValidationError):
        generate_dataset(small_config(dim=GEOMETRY_DIMS), 0)
