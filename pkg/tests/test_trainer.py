import numpy as np
import pytest

from rorkit.arch import ArchSpec
from rorkit.data import ChannelStats, preprocess, synth_dataset
from rorkit.network import RoRNet
from rorkit.objective import weighted_cross_entropy
from rorkit.trainer import (
    LabelSpaceError,
    OptimConfig,
    PipelineStage,
    SGDState,
    decays,
    evaluate,
    lr_at,
    predict,
    replace_head,
    run_pipeline,
    run_stage,
    sgd_step,
)
from rorkit.tensor import Tape, Tensor, backward, precision

SMALL = ArchSpec(group_blocks=(1, 1, 1, 1), base_widths=(4, 8, 8, 16), input_shape=(3, 8, 8))


@pytest.fixture(scope="module")
def tiny():
    return synth_dataset(4, 12, 8, seed=0)


# -- schedule -------------------------------------------------------------------

def test_lr_schedule_examples():
    cfg = OptimConfig()
    assert lr_at(1, cfg) == 0.1
    assert lr_at(80, cfg) == 0.1
    assert lr_at(81, cfg) == pytest.approx(0.01)
    assert lr_at(123, cfg) == pytest.approx(0.001)
    ft = OptimConfig.fine_tune(1e-4, 60)
    assert {lr_at(e, ft) for e in range(1, 61)} == {1e-4}
    lrs = [lr_at(e, cfg) for e in range(1, cfg.max_epochs + 1)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        lr_at(0, cfg)


def test_optim_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(decay_epochs=(10, 5))
    with pytest.raises(ValueError):
        OptimConfig(decay_epochs=(200,))
    with pytest.raises(ValueError):
        OptimConfig(dampening=0.5)
    assert OptimConfig().scaled(41).decay_epochs == (20, 30)


# -- SGD ------------------------------------------------------------------------

def param(value, grad):
    t = Tensor(np.array([value], dtype=np.float64), requires_grad=True)
    t.grad = np.array([grad], dtype=np.float64)
    return t


def test_sgd_zero_gradient_no_decay_is_noop():
    p = {"w": param(1.5, 0.0)}
    sgd_step(p, SGDState(), OptimConfig(weight_decay=0.0), 0.1)
    assert p["w"].data[0] == 1.5


def test_sgd_plain_step():
    cfg = OptimConfig(momentum=0.0, weight_decay=0.0, nesterov=False)
    p = {"w": param(1.0, 1.0)}
    sgd_step(p, SGDState(), cfg, 0.1)
    assert p["w"].data[0] == pytest.approx(0.9, abs=1e-15)


def test_sgd_nesterov_two_steps():
    mu, wd, lr = 0.9, 1e-4, 0.1
    cfg = OptimConfig(momentum=mu, weight_decay=wd)
    p = {"conv.weight": param(1.0, 0.5)}
    state = SGDState()
    theta, v = 1.0, 0.0
    for g in (0.5, -0.25):
        p["conv.weight"].grad = np.array([g])
        sgd_step(p, state, cfg, lr)
        d = g + wd * theta
        v = mu * v + d
        theta -= lr * (d + mu * v)
        assert p["conv.weight"].data[0] == pytest.approx(theta, abs=1e-12)


def test_sgd_nonfinite_gradient_aborts():
    p = {"a": param(1.0, 1.0), "b": param(2.0, np.inf)}
    state = SGDState()
    assert sgd_step(p, state, OptimConfig(), 0.1) is False
    assert p["a"].data[0] == 1.0 and p["b"].data[0] == 2.0
    assert state.aborted_steps == 1


def test_weight_decay_exclusions():
    assert decays("block1.conv1.weight")
    assert decays("head.weight")
    for name in ("block1.bn1.gamma", "block1.bn1.beta", "head.bias"):
        assert not decays(name)
    p = {"bn.gamma": param(1.0, 0.0)}
    sgd_step(p, SGDState(), OptimConfig(weight_decay=0.5, momentum=0.0, nesterov=False), 0.1)
    assert p["bn.gamma"].data[0] == 1.0


def test_frozen_params_untouched():
    p = {"block1.w": param(1.0, 1.0), "head.weight": param(1.0, 1.0)}
    sgd_step(p, SGDState(), OptimConfig(weight_decay=0.0), 0.1, frozen=("block1.",))
    assert p["block1.w"].data[0] == 1.0 and p["head.weight"].data[0] < 1.0


# -- training -------------------------------------------------------------------

def test_overfit_one_batch(tiny):
    batch = tiny.subset(np.arange(0, 48, 6))
    model = RoRNet(SMALL.with_classes(4), seed=0)
    x = Tensor(preprocess(batch.images, ChannelStats.of(batch.images)))
    cfg = OptimConfig(lr0=0.01, weight_decay=0.0)
    state = SGDState()
    for step in range(200):
        model.zero_grad()
        with Tape():
            loss = weighted_cross_entropy(model.forward(x), batch.age)
        backward(loss)
        if loss.item() < 1e-2:
            break
        sgd_step(model.params, state, cfg, 0.01)
    assert loss.item() < 1e-2


def test_separable_two_class_reaches_99():
    data = synth_dataset(2, 40, 8, seed=1)
    stage = PipelineStage("bin", data, 2, OptimConfig(lr0=0.05, decay_epochs=(), max_epochs=20,
                                                      batch_size=16), arch=SMALL)
    res = run_stage(stage)
    assert res.status == "ok" and len(res.log) == 20
    assert evaluate(res.model, data)["exact"] >= 0.99


def test_run_stage_is_deterministic(tiny):
    stage = PipelineStage("a", tiny, 4, OptimConfig(lr0=0.05, decay_epochs=(), max_epochs=2,
                                                    batch_size=8), val=tiny, arch=SMALL, seed=3)
    a, b = run_stage(stage), run_stage(stage)
    assert a.model.body_checksum() == b.model.body_checksum()
    assert [r.row() for r in a.log] == [r.row() for r in b.log]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(tiny):
    stage = PipelineStage("boom", tiny, 4, OptimConfig(lr0=1e12, decay_epochs=(), max_epochs=3,
                                                       batch_size=8), arch=SMALL)
    res = run_stage(stage)
    assert res.status == "diverged"
    assert len(res.log) < 3
    assert all(np.all(np.isfinite(v)) for v in res.model.state_arrays().values())


def test_init_from_zero_epochs_is_identity(tiny):
    model = RoRNet(SMALL.with_classes(4), seed=5)
    before = {k: v.copy() for k, v in model.state_arrays().items()}
    res = run_stage(PipelineStage("ft", tiny, 4, OptimConfig.fine_tune(1e-4, 0), init="from"), model)
    for k, v in res.model.state_arrays().items():
        np.testing.assert_array_equal(v, before[k])


def test_init_from_rejects_head_mismatch(tiny):
    model = RoRNet(SMALL.with_classes(2), seed=0)
    with pytest.raises(LabelSpaceError):
        run_stage(PipelineStage("ft", tiny, 4, OptimConfig.fine_tune(), init="from"), model)


def test_pipeline_handoff_keeps_body(tiny, tmp_path):
    seen = []
    stages = [
        PipelineStage("gender", tiny, 2, OptimConfig(lr0=0.05, decay_epochs=(), max_epochs=1, batch_size=8),
                      task="gender", arch=SMALL),
        PipelineStage("age", tiny, 4, OptimConfig.fine_tune(1e-3, 1, batch_size=8), val=tiny,
                      init="from"),
    ]
    results = run_pipeline(stages, tmp_path / "ckpt", tmp_path / "logs",
                           on_handoff=lambda st, m, before: seen.append((before, m.body_checksum())))
    assert len(seen) == 1 and seen[0][0] == seen[0][1]
    assert seen[0][0] == results[0].model.body_checksum()
    assert results[0].model.spec.num_classes == 2
    assert results[1].model.spec.num_classes == 4
    assert (tmp_path / "logs" / "age.csv").read_text().startswith("epoch,lr,train_loss,val_exact,val_one_off")
    assert (tmp_path / "ckpt" / "gender" / "last" / "manifest.json").exists()


def test_replace_head_same_size_changes_output_not_features(tiny):
    model = RoRNet(SMALL.with_classes(4), seed=0)
    x = Tensor(preprocess(tiny.images[:4], ChannelStats.of(tiny.images)))
    feats = model.features(x).data.copy()
    out = model.forward(x, mode="eval").data.copy()
    replace_head(model, 4, np.random.default_rng(99))
    np.testing.assert_array_equal(model.features(x).data, feats)
    assert not np.array_equal(model.forward(x, mode="eval").data, out)


# -- evaluation -----------------------------------------------------------------

def test_evaluate_deterministic_and_label_checks(tiny):
    model = RoRNet(SMALL.with_classes(4), seed=0)
    a, b = evaluate(model, tiny), evaluate(model, tiny)
    assert a == b and a["n"] == len(tiny)
    assert evaluate(model.replace_head(2, np.random.default_rng(0)), tiny, "gender")["one_off"] is None
    with pytest.raises(LabelSpaceError):
        evaluate(RoRNet(SMALL.with_classes(3), seed=0), tiny)


def test_constant_logits_give_chance_level(tiny):
    model = RoRNet(SMALL.with_classes(4), seed=0)
    model.params["head.weight"].data[...] = 0.0
    model.params["head.bias"].data[...] = 0.0
    preds = predict(model, tiny)
    assert set(preds) == {1}  # argmax ties resolve to the first class
    assert evaluate(model, tiny)["exact"] == pytest.approx(np.mean(tiny.age == 1))


def test_gradients_in_float64(tiny):
    with precision(np.float64):
        res = run_stage(PipelineStage("p", tiny, 4, OptimConfig(lr0=0.05, decay_epochs=(), max_epochs=1,
                                                                batch_size=16), arch=SMALL))
    assert res.model.params["head.weight"].data.dtype == np.float64
