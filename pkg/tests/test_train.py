import dataclasses
import importlib
import json

import numpy as np
import pytest

from finedet.errors import NumericalError, ValidationError
from finedet.harness.model import HeadParameters
from finedet.harness.synth import Scene, generate_dataset
from finedet.harness.train import (Checkpoint, TrainConfig, TrainingDiverged, batch_objective, build_correlation,
                                   evaluate, infer, train, _det_targets)
from finedet.losses import grad_check

from conftest import check_golden, small_config

FAST = dict(epochs=2, batch_pairs=6)
train_mod = importlib.import_module("finedet.harness.train")


@pytest.fixture(scope="module")
def trained(small_dataset):
    return train(TrainConfig(ablation="dlm-fa", seed=1, **FAST), small_dataset)


def test_lr_zero_is_a_no_op(small_dataset):
    cfg = TrainConfig(ablation="attention", lr=0.0, seed=2, **FAST)
    res = train(cfg, small_dataset)
    init = HeadParameters.init(small_dataset.config.dim, small_dataset.n_coarse, small_dataset.n_fine,
                               np.random.default_rng([2, 1]), cfg.init_scale)
    assert all(np.array_equal(a, b) for a, b in zip(res.checkpoint.params.arrays(), init.arrays()))
    rep = evaluate(init, build_correlation(small_dataset, cfg), small_dataset.splits["test"], cfg,
                   small_dataset.partition.coarse, small_dataset.partition.fine)
    assert rep.headline() == res.report.headline()


def test_training_is_bit_reproducible(small_dataset, trained):
    again = train(TrainConfig(ablation="dlm-fa", seed=1, **FAST), small_dataset)
    assert json.dumps(again.report.as_dict()) == json.dumps(trained.report.as_dict())
    assert again.checkpoint.to_json() == trained.checkpoint.to_json()


def test_naive_loss_monotone_on_noise_free_data():
    ds = generate_dataset(small_config(jitter=0.0, feature_noise=0.0, geometry_noise=0.0), 6)
    res = train(TrainConfig(ablation="naive", epochs=6, batch_pairs=6, seed=0), ds)
    totals = [row["total"] for row in res.report.loss_trace]
    assert all(b <= a + 1e-3 for a, b in zip(totals, totals[1:])), totals


def test_lr_schedule_drops_every_third(small_dataset):
    res = train(TrainConfig(ablation="coarse-only", epochs=6, lr=0.1, seed=0), small_dataset)
    assert [round(r["lr"], 12) for r in res.report.loss_trace] == [0.1, 0.1, 0.01, 0.01, 0.001, 0.001]


def test_metrics_in_range(trained):
    rep = trained.report
    for v in list(rep.coarse_ap.values()) + list(rep.fine_ap.values()):
        assert 0.0 <= v <= 1.0
    assert rep.coarse_map50 == pytest.approx(np.mean(list(rep.coarse_ap.values())))
    assert 0.0 <= rep.fine_corloc <= 1.0
    assert len(rep.loss_trace) == 2


def test_checkpoint_roundtrip(tmp_path, trained):
    path = tmp_path / "c.json"
    trained.checkpoint.save(path)
    back = Checkpoint.load(path)
    assert back.to_json() == trained.checkpoint.to_json()
    assert back.coarse_bank == trained.checkpoint.coarse_bank
    bad = json.loads(path.read_text())
    bad["version"] = 99
    with pytest.raises(ValidationError):
        Checkpoint.from_json(json.dumps(bad))


def _flat_objective(params, dataset, cfg, banks=None, block=None):
    """Objective as a function of the flat parameters, or of one named block of them."""
    corr = build_correlation(dataset, cfg)
    det = [(s, _det_targets(s, dataset.n_coarse)) for s in dataset.splits["detection"][:2]]
    cls = dataset.splits["classification"][:2]
    lo, hi = 0, params.flat().size
    if block is not None:
        sizes = {f.name: getattr(params, f.name).size for f in dataclasses.fields(params)}
        names = list(sizes)
        lo = sum(sizes[n] for n in names[:names.index(block)])
        hi = lo + sizes[block]
    base = params.flat()

    def f(x):
        full = base.copy()
        full[lo:hi] = x
        p = params.with_flat(full)
        cb, fb = (None, None) if banks is None else (banks[0].copy(), banks[1].copy())
        lb, grad = batch_objective(p, det, cls, corr, cfg, cb, fb)
        return lb.total, grad.flat()[lo:hi]
    return f, base[lo:hi]


@pytest.mark.parametrize("ablation", ["coarse-only", "naive"])
def test_composed_objective_gradient(small_dataset, ablation):
    cfg = TrainConfig(ablation=ablation)
    params = HeadParameters.init(small_dataset.config.dim, small_dataset.n_coarse, small_dataset.n_fine,
                                 np.random.default_rng(0), 0.3)
    assert grad_check(*_flat_objective(params, small_dataset, cfg)) < 1e-4


@pytest.mark.parametrize("block", ["fine_w", "fine_b", "box_w", "box_b"])
def test_composed_objective_gradient_attention(small_dataset, block):
    # the attention map is a constant of the fine loss, so only non-coarse blocks match exactly
    cfg = TrainConfig(ablation="attention")
    params = HeadParameters.init(small_dataset.config.dim, small_dataset.n_coarse, small_dataset.n_fine,
                                 np.random.default_rng(0), 0.3)
    assert grad_check(*_flat_objective(params, small_dataset, cfg, block=block)) < 1e-4


def test_composed_objective_gradient_with_memory(small_dataset, trained):
    cfg = TrainConfig(ablation="dlm-fa", mu=1.0, lam=0.0)
    ck = trained.checkpoint
    assert ck.coarse_bank.is_warm()
    lb, _ = batch_objective(ck.params, [(s, _det_targets(s, small_dataset.n_coarse))
                                        for s in small_dataset.splits["detection"][:2]],
                            small_dataset.splits["classification"][:2], ck.correlation, cfg,
                            ck.coarse_bank.copy(), ck.fine_bank.copy())
    assert lb.l_m_w > 0
    assert grad_check(*_flat_objective(ck.params, small_dataset, cfg, (ck.coarse_bank, ck.fine_bank))) < 1e-4


def test_loss_breakdown_identity(small_dataset, trained):
    cfg = TrainConfig(ablation="dlm-fa")
    ck = trained.checkpoint
    det = [(s, _det_targets(s, small_dataset.n_coarse)) for s in small_dataset.splits["detection"][:3]]
    lb, _ = batch_objective(ck.params, det, small_dataset.splits["classification"][:3], ck.correlation, cfg,
                            ck.coarse_bank.copy(), ck.fine_bank.copy())
    assert lb.total == pytest.approx(lb.l_cg + lb.l_fg + cfg.mu * lb.l_m, abs=1e-12)
    assert lb.l_cg == pytest.approx(lb.l_cg_cls + 0.5 * lb.l_cg_reg, abs=1e-12)
    assert lb.l_fg == pytest.approx(lb.l_fg_global + 0.1 * lb.l_fg_attention, abs=1e-12)
    assert min(dataclasses.asdict(lb).values()) >= 0


def test_divergence_aborts_with_last_good(small_dataset, monkeypatch):
    real = train_mod.batch_objective
    calls = {"n": 0}

    def flaky(*args, **kw):
        lb, grad = real(*args, **kw)
        calls["n"] += 1
        if calls["n"] > 5:
            lb.total = float("nan")
        return lb, grad

    monkeypatch.setattr(train_mod, "batch_objective", flaky)
    with pytest.raises(TrainingDiverged) as exc:
        train(TrainConfig(ablation="naive", epochs=2, batch_pairs=8, seed=0), small_dataset)
    assert isinstance(exc.value, NumericalError)
    assert exc.value.last_good.epochs_completed == 1


def test_config_validation():
    for bad in (dict(ablation="full"), dict(correlation="random"), dict(beta=0.0), dict(epochs=0),
                dict(lam=-1.0), dict(momentum=2.0), dict(sigma=0.0)):
        with pytest.raises(ValidationError):
            TrainConfig(**bad).validate()


def _empty_scene(dim, n=0):
    return Scene("test", (100.0, 100.0), np.zeros((0, 4)), np.zeros(0, int), np.zeros(0, int),
                 np.zeros((n, 4)), np.zeros((n, dim)), np.zeros(n, int), np.zeros(n, int))


def test_infer_empty_and_mismatch(trained):
    ck = trained.checkpoint
    assert infer(ck, _empty_scene(ck.params.dim)) == []
    bad = _empty_scene(ck.params.dim + 1, 2)
    with pytest.raises(ValidationError):
        infer(ck, bad)


def test_infer_single_proposal_single_class(trained):
    ck = trained.checkpoint
    params = HeadParameters.zeros_like(ck.params)
    params.coarse_b[1] = 50.0
    params.fine_b[2] = 50.0
    single = Checkpoint(params, ck.coarse_bank, ck.fine_bank, ck.correlation, ck.config, ck.coarse_ids, ck.fine_ids)
    scene = _empty_scene(ck.params.dim, 1)
    scene.proposals = np.array([[10.0, 20.0, 60.0, 70.0]])
    out = infer(single, scene)
    assert [(d.label, d.box) for d in out] == [(ck.coarse_ids[1], (10.0, 20.0, 60.0, 70.0)),
                                               (ck.fine_ids[2], (10.0, 20.0, 60.0, 70.0))]


def test_infer_golden(small_dataset, trained):
    scene = small_dataset.splits["test"][0]
    lines = [f"{d.label} {' '.join(repr(v) for v in d.box)} {d.score!r}" for d in infer(trained.checkpoint, scene)]
    check_golden("infer_output.txt", "\n".join(lines) + "\n")
