import json
import warnings

import numpy as np
import pytest

from castling import tensor as T
from castling.attention import KernelKind
from castling.data import generate_dataset
from castling.tensor import ConfigError, Parameter
from castling.train import (
    ABLATION_CELLS,
    ABLATION_COLUMNS,
    EpsilonSchedule,
    MaskTrace,
    NumericalError,
    SGD,
    TrainConfig,
    castle,
    load_checkpoint,
    run_ablation_grid,
    save_checkpoint,
    sgd_step,
    sparsity_penalty,
    train,
    write_metrics_csv,
    write_rows_csv,
    zero_mask_indices,
)

TINY = TrainConfig(image_size=16, num_samples=64, epochs=2, batch_size=16, dim=16, heads=2)


# -- optimiser ---------------------------------------------------------------


def test_sgd_plain_step():
    p = Parameter(np.array([1.0, -2.0]))
    p.grad[:] = [0.5, 1.0]
    sgd_step([p], [np.zeros(2)], lr=0.1, momentum=0.0)
    np.testing.assert_allclose(p.data, [0.95, -2.1])
    assert p.grad.tolist() == [0.0, 0.0]


def test_sgd_zero_gradient_is_noop():
    p, v = Parameter(np.array([3.0])), np.zeros(1)
    sgd_step([p], [v], lr=0.1, momentum=0.9)
    assert p.data.tolist() == [3.0] and v.tolist() == [0.0]


def test_sgd_momentum_recursion():
    p = Parameter(np.array([1.0]))
    opt = SGD([p], lr=0.1, momentum=0.9)
    for _ in range(2):
        p.grad[:] = 1.0
        opt.step()
    # v1 = 1, v2 = 0.9 + 1 = 1.9; p = 1 - 0.1 - 0.19
    assert p.data[0] == pytest.approx(0.71, abs=1e-15)


def test_sgd_weight_decay_enters_velocity():
    p = Parameter(np.array([2.0]))
    sgd_step([p], [np.zeros(1)], lr=0.5, momentum=0.0, weight_decay=0.1)
    assert p.data[0] == pytest.approx(2.0 - 0.5 * 0.2)


def test_sgd_nan_gradient_aborts_with_name():
    p = Parameter(np.ones(3), name="w")
    p.grad[1] = np.nan
    with pytest.raises(NumericalError, match="w"):
        sgd_step([p], [np.zeros(3)], lr=0.1, momentum=0.9)
    assert p.data.tolist() == [1.0, 1.0, 1.0]


# -- schedules and traces --------------------------------------------------


def test_epsilon_schedules():
    assert EpsilonSchedule()(1000) == 0.02
    ramp = EpsilonSchedule("linear_ramp", 0.04, warmup_steps=10)
    assert ramp(0) == 0.0 and ramp(5) == pytest.approx(0.02) and ramp(50) == 0.04
    with pytest.raises(ConfigError):
        EpsilonSchedule("linear_ramp", 0.02, warmup_steps=0)
    with pytest.raises(ConfigError):
        EpsilonSchedule(epsilon_max=1.5)


def test_mask_trace_rejects_impossible_counts():
    tr = MaskTrace()
    tr.add(0, 0, 3, 10)
    tr.add(0, 1, 1, 10)
    assert tr.fraction_at(0) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        tr.add(1, 0, 11, 10)


def test_config_roundtrip_and_validation():
    cfg = TINY.replace(epsilon=EpsilonSchedule("linear_ramp", 0.03, 5))
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        TINY.replace(sparsity_weight=-1.0).validate()
    with pytest.raises(ConfigError):
        TINY.replace(image_size=18).validate()


# -- training ----------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_run():
    return train(TINY)


def test_training_is_deterministic(tiny_run):
    again = train(TINY)
    assert [(m.step, m.loss, m.acc) for m in again.metrics] == [(m.step, m.loss, m.acc) for m in tiny_run.metrics]
    assert again.trace.records == tiny_run.trace.records


def test_trace_well_formed(tiny_run):
    steps = tiny_run.trace.steps()
    assert steps == sorted(set(steps)) and steps[0] == 0
    assert all(0 <= r.nonzeros <= r.mask_size for r in tiny_run.trace.records)
    assert {r.layer for r in tiny_run.trace.records} == {0, 1}


def test_aux_disabled_gives_empty_trace():
    res = train(TINY.replace(use_aux=False, epochs=1))
    assert len(res.trace) == 0 and np.isfinite(res.metrics[-1].loss)


def test_epsilon_one_masks_everything_from_step_zero():
    res = train(TINY.replace(sparsity_weight=0.0, epsilon=EpsilonSchedule(epsilon_max=1.0), epochs=1))
    assert all(r.nonzeros == 0 for r in res.trace.records)


def test_step_zero_loss_decomposes():
    cfg = TINY.replace(epochs=1)
    data = generate_dataset(cfg.num_samples, cfg.num_classes, cfg.image_size, cfg.seed)
    res = train(cfg, data)
    # rebuild the untrained model and its first batch
    from castling.model import TinyViT
    from castling.rng import SplitMix64

    model = TinyViT(cfg.model_config(), seed=cfg.seed + 1)
    x, y = data.split("train")
    idx = SplitMix64(cfg.seed + 2).permutation(len(y))[: cfg.batch_size]
    out = model(x[idx], 0.02)
    ce = T.cross_entropy(out.logits, y[idx]).item()
    pen = sparsity_penalty(out.traces).item()
    assert res.metrics[0].loss == pytest.approx(ce + cfg.sparsity_weight * pen, rel=1e-12)
    # with the aux output forced to zero (eps = 1) the logits are those of the aux-free model
    np.testing.assert_array_equal(model(x[idx], 1.0).logits.data, model.castled()(x[idx], 1.0).logits.data)


def test_metrics_csv_columns(tiny_run, tmp_path):
    write_metrics_csv(tiny_run, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "step,layer,nonzeros,mask_size,loss,acc"
    assert len(lines) == 1 + 2 * len(tiny_run.metrics)


# -- castling ----------------------------------------------------------------


def test_castle_without_aux_is_identity():
    res = train(TINY.replace(use_aux=False, epochs=1))
    x = res.dataset.split("val")[0]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        _, rep = castle(res.model, x)
    assert rep.bitwise_identical and rep.nonzeros == 0


def test_castle_all_zero_mask_is_bitwise_identical(tiny_run):
    x = tiny_run.dataset.split("val")[0]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        _, rep = castle(tiny_run.model, x, epsilon=1.0)
    assert rep.nonzeros == 0 and rep.bitwise_identical and rep.max_output_delta == 0.0


def test_castle_warns_with_residual_mass(tiny_run):
    x = tiny_run.dataset.split("val")[0]
    with pytest.warns(RuntimeWarning, match="residual mass"):
        _, rep = castle(tiny_run.model, x, epsilon=0.0)
    assert rep.nonzeros > 0 and rep.residual_mass > 0 and rep.max_output_delta > 0


def test_zero_mask_indices(tiny_run):
    x = tiny_run.dataset.split("val")[0]
    assert len(zero_mask_indices(tiny_run.model, x, epsilon=1.0)) == len(x)
    assert len(zero_mask_indices(tiny_run.model, x, epsilon=0.0)) == 0
    with pytest.raises(ConfigError):
        zero_mask_indices(tiny_run.model.castled(), x)


def test_checkpoint_roundtrip(tiny_run, tmp_path):
    save_checkpoint(tiny_run.model, tmp_path / "ck", TINY)
    back = load_checkpoint(tmp_path / "ck")
    x = tiny_run.dataset.images[:4]
    np.testing.assert_array_equal(back(x, 0.02).logits.data, tiny_run.model(x, 0.02).logits.data)
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert TrainConfig.from_dict(manifest["train_config"]) == TINY


# -- ablations ----------------------------------------------------------------


def test_ablation_grid_rows(tmp_path):
    rows = run_ablation_grid(TINY.replace(epochs=1))
    assert [r["cell"] for r in rows] == list(ABLATION_CELLS)
    assert len({r["dataset_hash"] for r in rows}) == 1 and len({r["seed"] for r in rows}) == 1
    by = {r["cell"]: r for r in rows}
    # 16 tokens, head dim 8: N > d, so the softmax cell costs more
    assert by["ExactSoftmax"]["macs_inference"] > by["Lin"]["macs_inference"]
    assert by["Lin+Aux"]["macs_inference"] == by["Lin"]["macs_inference"] < by["Lin+Aux"]["macs_training"]
    write_rows_csv(rows, tmp_path / "a.csv", ABLATION_COLUMNS)
    assert len((tmp_path / "a.csv").read_text().splitlines()) == 6


def test_kernel_choice_reaches_the_model():
    assert TINY.replace(kernel=KernelKind.EXACT_SOFTMAX).model_config().kernel is KernelKind.EXACT_SOFTMAX
