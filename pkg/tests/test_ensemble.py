import json

import numpy as np
import pytest
import torch

from vox2seg import ensemble as ens
from vox2seg.data_io import from_categorical, phantom_subjects, to_categorical
from vox2seg.ensemble import (EarlyStopping, EnsemblerConfig, build_ensembler, ensemble_predict,
                              split_subjects, stack_predictions, train_ensembler)
from vox2seg.metrics import dice, remap_regions
from vox2seg.model import GeneratorConfig, build_generator, count_parameters


def _probs(rng, shape=(8, 8, 8)):
    p = rng.random((4,) + shape).astype(np.float32)
    return p / p.sum(0, keepdims=True)


# ---------------------------------------------------------------- stacking


def test_stack_three_models():
    rng = np.random.default_rng(0)
    preds = [_probs(rng, (32, 32, 32)) for _ in range(3)]
    x = stack_predictions(preds)
    assert x.shape == (12, 32, 32, 32)
    assert np.allclose(x[4:8], preds[1] - 0.5)
    assert x.min() >= -0.5 and x.max() <= 0.5


def test_stack_half_is_zero():
    assert np.all(stack_predictions([np.full((4, 2, 2, 2), 0.5, np.float32)]) == 0)


def test_stack_single_model():
    p = _probs(np.random.default_rng(1))
    assert np.allclose(stack_predictions([p]), p - 0.5)


def test_stack_errors():
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError):
        stack_predictions([_probs(rng), _probs(rng, (8, 8, 4))])
    with pytest.raises(ValueError):
        stack_predictions([_probs(rng)] * 2, models=3)
    with pytest.raises(ValueError):
        stack_predictions([])


# ---------------------------------------------------------------- network


@pytest.mark.parametrize("M", [1, 2, 3, 10])
def test_parameter_formula(M):
    assert count_parameters(build_ensembler(EnsemblerConfig(models=M))) == 3 ** 3 * 4 * M * 4 + 4


def test_ten_models_4324():
    assert count_parameters(build_ensembler(EnsemblerConfig(models=10))) == 4324


def test_single_conv_layer():
    e = build_ensembler(EnsemblerConfig())
    convs = [m for m in e.modules() if isinstance(m, torch.nn.Conv3d)]
    assert len(convs) == 1 and convs[0].stride == (1, 1, 1) and convs[0].kernel_size == (3, 3, 3)


def test_softmax_and_shape():
    e = build_ensembler(EnsemblerConfig(models=2)).eval()
    for shape in [(8, 8, 8), (5, 7, 9)]:
        with torch.no_grad():
            y = e(torch.randn(1, 8, *shape))
        assert y.shape == (1, 4) + shape
        assert torch.allclose(y.sum(1), torch.ones(1, *shape), atol=1e-5)


def test_neighborhood_property():
    e = build_ensembler(EnsemblerConfig(models=3)).eval()
    x = torch.randn(1, 12, 9, 9, 9)
    bumped = x.clone()
    bumped[0, 5, 4, 4, 4] += 3.0
    with torch.no_grad():
        changed = (e(x) - e(bumped)).abs().amax(1)[0] > 0
    idx = np.argwhere(changed.numpy())
    assert len(idx) > 0
    assert np.all(np.abs(idx - 4) <= 1)


def test_config_validation():
    with pytest.raises(ValueError):
        EnsemblerConfig(models=0)
    with pytest.raises(ValueError):
        EnsemblerConfig(epochs=5, patience=10)


# ---------------------------------------------------------------- early stopping


def test_early_stopping_constant():
    stopper = EarlyStopping(10)
    epochs = 0
    for epoch in range(1, 101):
        epochs = epoch
        if stopper.step(0.3):
            break
    assert epochs == 11


def test_early_stopping_improving():
    stopper = EarlyStopping(10)
    assert not any(stopper.step(1.0 / e) for e in range(1, 101))


def _pairs(n, seed=0, size=(8, 8, 8), models=2):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        labels = rng.choice([0, 1, 2, 4], size=size).astype(np.uint8)
        onehot = to_categorical(labels)
        out.append((stack_predictions([onehot * 0.7 + 0.075] * models), onehot))
    return out


def test_training_stops_at_11_with_constant_validation():
    cfg = EnsemblerConfig(models=2, lr=0.0, patch_size=(8, 8, 8))
    res = train_ensembler(build_ensembler(cfg), _pairs(4), _pairs(2, 1), cfg)
    assert res.stopped_epoch == 11 and len(res.log) == 11
    assert res.best_epoch == 1


def test_training_runs_full_budget_when_improving(monkeypatch):
    values = iter(1.0 / e for e in range(1, 1000))
    monkeypatch.setattr(ens, "_val_loss", lambda *a: next(values))
    cfg = EnsemblerConfig(models=2, patch_size=(8, 8, 8))
    res = train_ensembler(build_ensembler(cfg), _pairs(2), _pairs(1, 1), cfg)
    assert res.stopped_epoch == 100 and res.best_epoch == 100


def test_training_requires_both_splits():
    cfg = EnsemblerConfig(models=2)
    with pytest.raises(ValueError):
        train_ensembler(build_ensembler(cfg), _pairs(2), [], cfg)


def test_restores_best_weights_and_logs(tmp_path):
    cfg = EnsemblerConfig(models=2, epochs=15, patience=3, patch_size=(8, 8, 8), lr=1e-2)
    val = _pairs(2, 1)
    res = train_ensembler(build_ensembler(cfg), _pairs(4), val, cfg, log_path=tmp_path / "log.jsonl")
    best = min(r["val_GDL"] for r in res.log)
    assert ens._val_loss(res.ensembler, val, "cpu") == pytest.approx(best, abs=1e-6)
    lines = [json.loads(ln) for ln in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == list(range(1, res.stopped_epoch + 1))


@pytest.mark.slow
def test_identical_models_degenerate_consistency():
    # near-one-hot outputs like a trained generator's; 32^3 keeps every region well populated
    subjects = phantom_subjects(10, size=(32, 32, 32), seed=3)
    pairs = []
    singles = []
    for s in subjects:
        onehot = to_categorical(s.label)
        single = 0.96 * onehot + 0.01
        singles.append(from_categorical(single))
        pairs.append((stack_predictions([single] * 3), onehot))
    cfg = EnsemblerConfig(models=3, patch_size=(32, 32, 32), lr=2e-3, seed=0)
    res = train_ensembler(build_ensembler(cfg), pairs[:8], pairs[8:], cfg)
    for (x, _), single in zip(pairs, singles):
        with torch.no_grad():
            fused = from_categorical(res.ensembler(torch.from_numpy(x)[None])[0].numpy())
        for a, b in zip(remap_regions(fused), remap_regions(single)):
            assert dice(a, b) >= 0.99


def test_training_deterministic():
    cfg = EnsemblerConfig(models=2, epochs=5, patience=5, patch_size=(8, 8, 8))
    a = train_ensembler(build_ensembler(cfg), _pairs(3), _pairs(1, 1), cfg)
    torch.manual_seed(99)  # global state must not matter
    b = train_ensembler(build_ensembler(cfg), _pairs(3), _pairs(1, 1), cfg)
    assert [r["val_GDL"] for r in a.log] == [r["val_GDL"] for r in b.log]


# ---------------------------------------------------------------- inference helpers


def test_split_subjects():
    ids = [f"s{i}" for i in range(10)]
    tr, va = split_subjects(ids, 0.2, 0)
    assert len(va) == 2 and not set(tr) & set(va) and set(tr) | set(va) == set(ids)
    assert split_subjects(ids, 0.2, 0) == (tr, va)
    with pytest.raises(ValueError):
        split_subjects(["a"], 0.2, 0)


def test_ensemble_predict_valid_and_deterministic():
    torch.manual_seed(0)
    models = [build_generator(GeneratorConfig(base_filters=2)) for _ in range(2)]
    e = build_ensembler(EnsemblerConfig(models=2))
    v = np.random.default_rng(0).standard_normal((4, 32, 32, 32)).astype(np.float32)
    a = ensemble_predict(models, e, v)
    b = ensemble_predict(models, e, v)
    assert a.shape == (4, 32, 32, 32)
    assert np.allclose(a.sum(0), 1, atol=1e-5)
    assert np.array_equal(a, b)
