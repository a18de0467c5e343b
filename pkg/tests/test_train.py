import csv
import math

import numpy as np
import pytest

from maskflow import checkpoint as ckpt
from maskflow import dit
from maskflow import mixture as mix
from maskflow import tensor as T
from maskflow import train as tr
from maskflow.tensor import Tensor


def adamw_oracle(p, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for k, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** k)
        v_hat = v / (1 - b2 ** k)
        p = p - lr * (m_hat / (math.sqrt(v_hat) + eps) + wd * p)
    return p


@pytest.mark.parametrize("wd", [0.0, 0.01])
def test_adamw_matches_hand_recurrence(wd):
    p = [np.array([0.5])]
    state = tr.OptimizerState.zeros_like(p)
    grads = [1.0, 1.0, -0.3, 2.0]
    for g in grads:
        tr.adamw_step(p, [np.array([g])], state, 1e-3, wd)
    assert p[0][0] == pytest.approx(adamw_oracle(0.5, grads, 1e-3, wd), rel=1e-12, abs=1e-12)
    assert state.step == 4


def test_adamw_first_step_moves_by_lr():
    # bias correction makes the first update lr * g / |g| (plus decay)
    p = [np.array([1.0, -2.0])]
    tr.adamw_step(p, [np.array([5.0, -0.01])], tr.OptimizerState.zeros_like(p), 0.1, 0.0)
    np.testing.assert_allclose(p[0], [0.9, -1.9], rtol=1e-6)


def test_decoupled_weight_decay_with_zero_gradient():
    p = [np.array([2.0])]
    tr.adamw_step(p, [np.zeros(1)], tr.OptimizerState.zeros_like(p), 0.1, 0.5)
    assert p[0][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, rel=1e-12)


def test_adamw_rejects_non_finite_and_misaligned_grads():
    p = [np.ones(2)]
    state = tr.OptimizerState.zeros_like(p)
    with pytest.raises(tr.TrainingDiverged):
        tr.adamw_step(p, [np.array([1.0, np.nan])], state, 0.1, 0.0)
    assert state.step == 0 and (p[0] == 1).all()
    with pytest.raises(ValueError):
        tr.adamw_step(p, [np.ones(3)], state, 0.1, 0.0)


@pytest.mark.parametrize("step,want", [(0, 0.0), (50, 1e-3), (100, 2e-3), (101, 2e-3), (5000, 2e-3)])
def test_warmup_schedule(step, want):
    assert tr.lr_schedule(step, 2e-3, 100) == pytest.approx(want, rel=1e-12, abs=0)
    assert tr.lr_schedule(7, 2e-3, 0) == 2e-3


def test_ema_closed_form():
    e = [np.array([0.0])]
    for _ in range(10):
        tr.ema_update(e, [np.array([1.0])], 0.9)
    assert e[0][0] == pytest.approx(1 - 0.9 ** 10, rel=1e-12)


def test_config_validation_and_dict_round_trip():
    cfg = tr.TrainConfig.toy(stage="flow", prior="mixture")
    assert tr.TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        tr.TrainConfig.from_dict({"learning_rate": 1.0})
    for bad in ({"stage": "vocoder"}, {"lr": 0.0}, {"ema_decay": 1.0}, {"grad_accum": 0},
                {"prior": "uniform"}, {"scale": "huge"}):
        with pytest.raises(ValueError):
            tr.TrainConfig.toy(**bad)
    full = tr.TrainConfig()
    assert (full.lr, full.warmup_steps, full.batch_size, full.grad_accum, full.ema_decay,
            full.chunk_seconds) == (2e-4, 10000, 10, 2, 0.9999, 10.0)


def test_gradient_accumulation_equals_one_big_batch():
    with T.precision(np.float64):
        model = dit.DiT(dit.DiTConfig.toy())
        rng = np.random.default_rng(0)
        for p in model.parameters():
            p.data[...] += 0.05 * rng.standard_normal(p.shape)
        x_t, cond, u = (rng.standard_normal((4, 6, 40)) for _ in range(3))
        t = rng.uniform(0, 1, 4)
        d = rng.standard_normal((4, 32))
        params = model.parameters()

        T.zero_grad(params)
        T.backward(tr.flow_batch_loss(model, x_t, cond, t, d, u))
        full = [p.grad.copy() for p in params]

        T.zero_grad(params)
        for sl in (slice(0, 2), slice(2, 4)):
            loss = tr.flow_batch_loss(model, x_t[sl], cond[sl], t[sl], d[sl], u[sl])
            T.backward(T.scale(loss, 0.5))
        for p, g in zip(params, full):
            np.testing.assert_allclose(p.grad, g, rtol=1e-5, atol=1e-12 * np.abs(g).max())


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    mix.generate_dataset(6, "additive", 5, root, duration_s=0.6)
    return root


def _flow_cfg(**kw):
    base = {"stage": "flow", "prior": "mixture", "max_steps": 3, "warmup_steps": 2, "save_every": 0}
    return tr.TrainConfig.toy(**{**base, **kw})


def test_accumulated_training_run_matches_big_batch_run(tiny_data, tmp_path):
    # Four items make every batch a whole epoch, so both runs draw the same samples and times.
    # float64 keeps Adam's sign-like first steps from being decided by float32 rounding.
    fe, ec = tr.frontend_for("toy"), tr.embed_config_for("toy")
    data = tr.prepare_data(mix.load_manifest(tiny_data), fe, ec).subset(range(4))
    with T.precision(np.float64):
        a = tr.train_stage(_flow_cfg(batch_size=4, grad_accum=1), None, tmp_path / "a.m2f", data=data)
        b = tr.train_stage(_flow_cfg(batch_size=2, grad_accum=2), None, tmp_path / "b.m2f", data=data)
    ta, _ = ckpt.load(a.checkpoint)
    tb, _ = ckpt.load(b.checkpoint)
    for k in ta:
        np.testing.assert_allclose(tb[k], ta[k], rtol=1e-5, atol=1e-6, err_msg=k)


def test_zero_steps_saves_the_initialization(tiny_data, tmp_path):
    res = tr.train_stage(tr.TrainConfig.toy(max_steps=0, seed=2), tiny_data, tmp_path / "m.m2f",
                         log_path=tmp_path / "log.csv")
    assert res.log == [] and res.steps_run == 0
    tr.init_checkpoint(tmp_path / "init.m2f", "mask", "toy", seed=2)
    got, meta = ckpt.load(res.checkpoint)
    want, _ = ckpt.load(tmp_path / "init.m2f")
    assert got.keys() == want.keys()
    for k in want:
        np.testing.assert_array_equal(got[k], want[k])
    assert meta["step"] == 0
    with (tmp_path / "log.csv").open() as fh:
        assert list(csv.reader(fh)) == [["step", "loss", "lr"]]


@pytest.mark.parametrize("stage", ["mask", "flow"])
def test_seeded_runs_give_byte_identical_checkpoints(tiny_data, tmp_path, stage):
    cfg = tr.TrainConfig.toy(stage=stage, prior="gaussian", max_steps=4, warmup_steps=2, seed=7)
    a = tr.train_stage(cfg, tiny_data, tmp_path / "a.m2f", log_path=tmp_path / "a.csv")
    b = tr.train_stage(cfg, tiny_data, tmp_path / "b.m2f", log_path=tmp_path / "b.csv")
    assert a.sha256 == b.sha256
    assert (tmp_path / "a.m2f").read_bytes() == (tmp_path / "b.m2f").read_bytes()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    c = tr.train_stage(cfg.with_(seed=8), tiny_data, tmp_path / "c.m2f")
    assert c.sha256 != a.sha256


def test_checkpoint_carries_raw_ema_and_configs(tiny_data, tmp_path):
    res = tr.train_stage(_flow_cfg(), tiny_data, tmp_path / "f.m2f")
    tensors, meta = ckpt.load(res.checkpoint)
    assert {k.split("/")[0] for k in tensors} == {"raw", "ema"}
    assert meta["train_config"]["prior"] == "mixture" and meta["step"] == 3
    raw, _ = tr.load_model(res.checkpoint, use_ema=False)
    ema, _ = tr.load_model(res.checkpoint)
    name = "block0.qkv.w"
    assert not np.array_equal(raw.params[name].data, ema.params[name].data)


def test_non_finite_data_aborts_and_keeps_the_last_checkpoint(tiny_data, tmp_path):
    fe, ec = tr.frontend_for("toy"), tr.embed_config_for("toy")
    data = tr.prepare_data(mix.load_manifest(tiny_data), fe, ec)
    data.target[:] = np.nan
    out = tmp_path / "nan.m2f"
    with pytest.raises(tr.TrainingDiverged, match="step 1"):
        tr.train_stage(_flow_cfg(), None, out, data=data)
    model, meta = tr.load_model(out)
    assert meta["step"] == 0
    assert len(T.get_tape()) == 0


def test_flow_training_leaves_the_mask_checkpoint_untouched(tiny_data, tmp_path):
    mask = tmp_path / "mask.m2f"
    tr.train_stage(tr.TrainConfig.toy(max_steps=2, warmup_steps=1), tiny_data, mask)
    before = mask.read_bytes()
    cfg = _flow_cfg(prior="masked", mask_checkpoint=str(mask))
    res = tr.train_stage(cfg, tiny_data, tmp_path / "flow.m2f")
    assert mask.read_bytes() == before
    assert res.mask_sha256 == ckpt.file_sha256(mask)
    _, meta = ckpt.load(res.checkpoint)
    assert meta["mask_sha256"] == res.mask_sha256

    def tamper(step, loss):
        mask.write_bytes(before + b"\0")

    with pytest.raises(RuntimeError, match="mask checkpoint changed"):
        tr.train_stage(cfg, tiny_data, tmp_path / "flow2.m2f", progress=tamper)
    with pytest.raises(ValueError, match="mask_checkpoint"):
        tr.train_stage(_flow_cfg(prior="masked"), tiny_data, tmp_path / "flow3.m2f")


@pytest.mark.parametrize("history,step,want", [
    ([(20, 1.0), (40, 0.9), (60, 0.895), (80, 0.894)], 80, True),
    ([(20, 1.0), (40, 0.9), (60, 0.85), (80, 0.80)], 80, False),
    ([(10, 1.0), (20, 1.0)], 20, False),  # too early: before 40% of max_steps
    ([], 90, False),
])
def test_convergence_rule(history, step, want):
    assert tr.has_converged(history, step, 100) is want


def test_mask_training_stops_early_once_converged(tiny_data, tmp_path):
    cfg = tr.TrainConfig.toy(max_steps=50, eval_every=5, lr=1e-9, warmup_steps=0, save_every=0)
    res = tr.train_stage(cfg, tiny_data, tmp_path / "m.m2f")
    assert res.converged and res.steps_run < 50
    _, meta = ckpt.load(res.checkpoint)
    assert meta["converged"] is True and meta["step"] == res.steps_run


def test_mask_batch_loss_equals_mask_stage_error():
    from maskflow import flow as fl
    from maskflow import masknet as mn
    model = mn.MaskNet(mn.MaskNetConfig.toy())
    rng = np.random.default_rng(3)
    x = rng.uniform(-8, 0, (1, 9, 40))
    y = rng.uniform(-8, 0, (1, 9, 40))
    d = rng.standard_normal((1, 32))
    with T.no_grad():
        loss = float(tr.mask_batch_loss(model, x, y, d, training=False).data)
    want = mn.mask_loss(fl.mask_stage(x[0], d[0], model), y[0])
    assert loss == pytest.approx(want, rel=1e-5)
    assert isinstance(mn.mask_loss(Tensor(x[0]), y[0]), Tensor)
