import dataclasses

import numpy as np
import pytest

from mtlab import nnet, trainer
from mtlab.nnet import ModelConfig, ParamVec
from mtlab.synthgen import DEFAULT_DOMAINS, generate_split
from mtlab.trainer import TrainData, TrainerConfig, UsageError, ema_update

CFG = ModelConfig()


@pytest.fixture(scope="module")
def small_data():
    return TrainData(generate_split(DEFAULT_DOMAINS["s1"], 16, 100),
                     {"s2": generate_split(DEFAULT_DOMAINS["s2"], 12, 200),
                      "s3": generate_split(DEFAULT_DOMAINS["s3"], 12, 300)})


def _init(seed=0):
    return nnet.init_params(np.random.default_rng(seed))


def test_ema_arithmetic():
    t = ParamVec(np.array([1.0]), CFG.config_hash())
    s = ParamVec(np.array([0.0]), CFG.config_hash())
    assert ema_update(t, s, 0.9996).values[0] == pytest.approx(0.9996, abs=1e-15)
    assert np.array_equal(ema_update(t, s, 1.0).values, t.values)
    assert np.array_equal(ema_update(t, s, 0.0).values, s.values)


def test_ema_rejects_mismatch():
    t = ParamVec(np.ones(3), CFG.config_hash())
    with pytest.raises(nnet.ConfigError):
        ema_update(t, ParamVec(np.ones(3), 123), 0.5)


@pytest.mark.parametrize("n", [1, 10, 1000])
def test_ema_closed_form_lr0(small_data, n):
    alpha = 0.9996
    student0 = _init(1)
    teacher0 = _init(2)
    cfg = TrainerConfig(lr=0.0, alpha=alpha, beta=0.0, iters_mt=n, eval_every=0, batch=2)
    st = trainer.train("ema-only", cfg, small_data, student0, teacher_init=teacher0)
    assert np.array_equal(st.student.values, student0.values)
    expected = alpha ** n * teacher0.values + (1 - alpha ** n) * student0.values
    assert np.max(np.abs(st.teacher.values - expected)) < 1e-9


def test_pretrain_lr0_is_identity(small_data):
    init = _init(3)
    out = trainer.pretrain(TrainerConfig(lr_pretrain=0.0), small_data.labeled, init=init, iters=20)
    assert np.array_equal(out.values, init.values)


def test_pretrain_descends_on_single_scene():
    scene = generate_split(DEFAULT_DOMAINS["s1"], 1, 42)
    cfg = TrainerConfig(lr_pretrain=0.1, weak_sigma=0.0, batch=4, seed=0)
    init = _init(4)
    gt = nnet.scene_targets(scene)
    img = scene[0].image[None]
    before, _ = nnet.sup_loss(init, img, gt, need_grad=False)
    after_p = trainer.pretrain(cfg, scene, init=init, iters=500)
    after, _ = nnet.sup_loss(after_p, img, gt, need_grad=False)
    assert after < before


def test_pretrain_deterministic(small_data):
    cfg = TrainerConfig(seed=5, lr=0.1)
    a = trainer.pretrain(cfg, small_data.labeled, iters=50)
    b = trainer.pretrain(cfg, small_data.labeled, iters=50)
    assert np.array_equal(a.values, b.values)


def test_train_run_twice_bit_identical(small_data):
    cfg = TrainerConfig(seed=2, lr=0.05, iters_mt=15, eval_every=5)
    a = trainer.train("ws-dgod", cfg, small_data, _init())
    b = trainer.train("ws-dgod", cfg, small_data, _init())
    assert np.array_equal(a.student.values, b.student.values)
    assert np.array_equal(a.teacher.values, b.teacher.values)
    assert a.history == b.history


def test_alpha0_teacher_tracks_student(small_data):
    cfg = TrainerConfig(alpha=0.0, lr=0.05, iters_mt=6, eval_every=0)
    st = trainer.train("ema-only", cfg, small_data, _init(), keep_trajectory=True)
    assert np.array_equal(st.teacher.values, st.student.values)


def test_regul_term_bookkeeping(small_data):
    base = TrainerConfig(lr=0.05, iters_mt=4, eval_every=0)
    off = trainer.train("ss-dgod", dataclasses.replace(base, beta=0.0), small_data, _init())
    on = trainer.train("ss-dgod", dataclasses.replace(base, beta=0.5), small_data, _init())
    for _, terms in off.history:
        assert not any(k.startswith("regul/") for k in terms)
        assert {"sup", "unsup/s2", "unsup/s3", "total"} <= set(terms)
    for _, terms in on.history:
        assert {"regul/s2", "regul/s3"} <= set(terms)
        assert terms["total"] == pytest.approx(sum(v for k, v in terms.items() if k != "total"))


def test_beta_does_not_shift_random_stream(small_data):
    base = TrainerConfig(lr=0.0, iters_mt=5, eval_every=0)
    a = trainer.train("ss-dgod", dataclasses.replace(base, beta=0.0), small_data, _init())
    b = trainer.train("ss-dgod", dataclasses.replace(base, beta=0.7), small_data, _init())
    # lr 0: same batches and views give identical supervised / unsupervised terms
    for (_, ta), (_, tb) in zip(a.history, b.history):
        assert ta["sup"] == tb["sup"] and ta["unsup/s2"] == tb["unsup/s2"]
    assert a.rng.bit_generator.state == b.rng.bit_generator.state


def test_teacher_is_pure_ema_of_student_trajectory(small_data):
    cfg = TrainerConfig(lr=0.05, alpha=0.9, beta=0.5, iters_mt=8, eval_every=0)
    init = _init()
    st = trainer.train("ss-dgod", cfg, small_data, init, keep_trajectory=True)
    teacher = init
    for s in st.trajectory:
        teacher = ema_update(teacher, s, cfg.alpha)
    assert np.array_equal(teacher.values, st.teacher.values)


def test_regul_sees_the_teacher_view(small_data, monkeypatch):
    seen = {"teacher": [], "regul": []}
    real_forward, real_regul = nnet.forward, nnet.regul_loss

    def spy_forward(params, images, config=CFG):
        seen["teacher"].append(images)
        return real_forward(params, images, config)

    def spy_regul(params, image_weak, raw, config=CFG, reg_lambda=1.0, **kw):
        seen["regul"].append(image_weak)
        return real_regul(params, image_weak, raw, config, reg_lambda, **kw)

    monkeypatch.setattr(trainer.nnet, "forward", spy_forward)
    monkeypatch.setattr(trainer.nnet, "regul_loss", spy_regul)
    cfg = TrainerConfig(lr=0.05, beta=0.5, iters_mt=3, eval_every=0)
    st = trainer.train("ss-dgod", cfg, small_data, _init(), record_views=True)
    assert len(seen["regul"]) == 6
    for t, r in zip(seen["teacher"], seen["regul"]):
        assert r is t
    assert all(a == b for _, _, a, b in st.view_log)


def test_validator_picks_best(small_data):
    scores = iter([0.1, 0.5, 0.3])
    cfg = TrainerConfig(lr=0.05, iters_mt=9, eval_every=3, beta=0.0)
    st = trainer.train("ema-only", cfg, small_data, _init(), validator=lambda p: next(scores))
    assert st.best_iteration == 6
    assert [it for it, _ in st.student_snapshots] == [3, 6, 9]


def test_usage_errors(small_data):
    cfg = TrainerConfig(iters_mt=1)
    with pytest.raises(UsageError):
        trainer.train("bogus", cfg, small_data, _init())
    with pytest.raises(UsageError):
        trainer.train("ss-dgod", cfg, TrainData(small_data.labeled), _init())
    with pytest.raises(ValueError):
        TrainerConfig(alpha=1.5)
    with pytest.raises(ValueError):
        TrainerConfig(beta=-1)


def test_divergence_is_reported(small_data):
    cfg = TrainerConfig(lr=0.05, iters_mt=5, eval_every=0, beta=0.0)
    values = _init().values.copy()
    values[-1] = np.nan
    with pytest.raises(trainer.TrainingDiverged) as err:
        trainer.train("ss-dgod", cfg, small_data, _init().with_values(values))
    assert err.value.iteration == 1


def test_mode_wiring():
    ds = {k: [k] for k in ("s1", "s2", "s3", "t/train")}
    assert set(trainer.train_data_for("uda", ds).auxiliary) == {"t"}
    assert trainer.train_data_for("ema-only", ds).auxiliary == {}
    assert set(trainer.train_data_for("ws-dgod", ds).auxiliary) == {"s2", "s3"}
