import numpy as np
import pytest
from scipy.special import softmax

from dualrec.models import AutoregressiveModel, TabularModel
from dualrec.space import enumerate_space
from dualrec.synth import Corpora, build_ground_truth, cipher_task, sample_corpora
from dualrec.trainers import (
    Adam,
    PlateauSchedule,
    RunResult,
    TrainConfig,
    TrainingDivergedError,
    _check_finite,
    back_translate,
    dual_learning_gradients,
    exact_dual_ascent,
    fit_language_models,
    ibt_batch_gradients,
    ibt_batch_update,
    make_models,
    parse_strategy,
    pretrain_supervised,
    run_strategy,
    strategy_label,
)

FAST = dict(batch_size=8, checkpoint_every=20, max_updates=60, patience_checkpoints=2, max_decays=1)


@pytest.fixture(scope="module")
def task():
    gt = build_ground_truth(cipher_task(n_symbols=3, max_len=2, seed=1))
    return gt, sample_corpora(gt, 4, 20, 20, 3, 3, seed=0)


@pytest.mark.parametrize("label,expected", [
    ("supervised", ("supervised", None)),
    ("baseline", ("supervised", None)),
    ("BT", ("BT", None)),
    ("IBT-batch", ("IBT-batch", None)),
    ("IBT-epoch", ("IBT-epoch", 1)),
    ("IBT-epoch(3)", ("IBT-epoch", 3)),
    ("IBT-epoch-2", ("IBT-epoch", 2)),
    ("DualLearning(0.1)", ("DualLearning", 0.1)),
    ("DL(0.5)", ("DualLearning", 0.5)),
    ("DL", ("DualLearning", 0.0)),
    ("ExactDualAscent", ("ExactDualAscent", None)),
])
def test_parse_strategy(label, expected):
    assert parse_strategy(label) == expected


def test_parse_strategy_errors_and_labels():
    for bad in ("foo", "IBT-epoch(0)", "DL(1.5)"):
        with pytest.raises(ValueError):
            parse_strategy(bad)
    assert strategy_label("IBT-epoch", 2) == "IBT-epoch(2)"
    assert strategy_label("DualLearning", 0.1) == "DualLearning(0.1)"
    assert TrainConfig(strategy="DL(0.5)").label == "DualLearning(0.5)"


def test_config_validation_and_round_trip():
    cfg = TrainConfig(strategy="BT", mi_constraint=[0.1, 1.0], seed=3)
    assert TrainConfig.from_dict(cfg.as_dict()) == cfg
    for bad in (dict(lr_decay=1.5), dict(batch_size=0), dict(model="rnn"), dict(mi_constraint=(2.0, 1.0)),
                dict(sample_mode="greedy")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"strategy": "BT", "bogus": 1})


def test_adam_first_step():
    params = np.zeros(3)
    g = np.array([2.0, -0.5, 0.0])
    Adam(0.1).step(params, g)
    # bias-corrected moments are g and g^2 on the first step
    np.testing.assert_allclose(params, 0.1 * g / (np.abs(g) + 1e-8), atol=1e-15)


def test_adam_second_step_by_hand():
    params = np.zeros(1)
    opt = Adam(0.01)
    g1, g2 = np.array([1.0]), np.array([3.0])
    opt.step(params, g1)
    opt.step(params, g2)
    m = 0.1 * 0.9 * 1.0 + 0.1 * 3.0
    v = 0.001 * 0.999 * 1.0 + 0.001 * 9.0
    step2 = 0.01 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert params[0] == pytest.approx(0.01 * 1 / (1 + 1e-8) + step2, abs=1e-14)


def test_plateau_schedule():
    s = PlateauSchedule(1.0, 0.3, patience=2, max_decays=1)
    actions = [s.update(v) for v in (1.0, 2.0, 1.5, 1.5, 3.0, 0.0, 0.0)]
    assert actions == ["improved", "improved", "wait", "decay", "improved", "wait", "stop"]
    assert s.lr == pytest.approx(0.7)


def test_single_pair_memorized():
    sp = enumerate_space(("a", "b"), 2)
    pair = (("a", "b"), ("b",))
    corpora = Corpora([pair], [], [], [pair], [])
    for kind in ("tabular", "autoregressive"):
        cfg = TrainConfig(model=kind, lr_pretrain=0.1, max_updates=400, checkpoint_every=50)
        p, q = make_models(sp, sp, cfg)
        pretrain_supervised((p, q), corpora, cfg)
        assert np.exp(p.log_prob_pairs([sp.index_of(pair[0])], [sp.index_of(pair[1])]))[0] > 0.99
        assert np.exp(q.log_prob_pairs([sp.index_of(pair[1])], [sp.index_of(pair[0])]))[0] > 0.99


def test_back_translate_with_exact_inverse():
    sp = enumerate_space(("a", "b"), 2)
    perm = np.roll(np.arange(len(sp)), 2)
    q = TabularModel(sp, sp, np.where(np.eye(len(sp))[perm] > 0, 5.0, 0.0))
    mono = [sp.sentence(i) for i in range(len(sp))]
    out = back_translate(q, mono)
    assert [o for o, _ in out] == [sp.sentence(perm[i]) for i in range(len(sp))]
    assert [s for _, s in out] == mono
    assert back_translate(q, []) == []


def _pair_models(seed=0, kind=AutoregressiveModel):
    sx = enumerate_space(("a", "b"), 2)
    sy = enumerate_space(("x", "y", "z"), 2)
    return kind(sx, sy, init_scale=1.0, random_state=seed), kind(sy, sx, init_scale=1.0, random_state=seed + 1)


def test_ibt_batch_gradients_stop_gradient():
    p, q = _pair_models()
    cfg = TrainConfig(strategy="IBT-batch", inference_beam=2)
    y, x = np.array([0, 4, 7]), np.array([1, 5])
    st = ibt_batch_gradients(p, q, y, x, cfg)
    xt = q.decode_indices(y, "beam", beam_size=2)[0]
    yt = p.decode_indices(x, "beam", beam_size=2)[0]
    # gradients of log p(y|x~) w.r.t. theta only; the decode is a constant
    np.testing.assert_allclose(st.g_theta, p.grad_pairs(xt, y) / 3, atol=1e-15)
    np.testing.assert_allclose(st.g_phi, q.grad_pairs(yt, x) / 2, atol=1e-15)
    assert st.loss_yxy == pytest.approx(-np.mean(p.log_prob_pairs(xt, y)))


def test_ibt_batch_update_is_one_adam_step():
    p, q = _pair_models(3)
    cfg = TrainConfig(strategy="IBT-batch", lr_finetune=0.05)
    y, x = np.array([2, 3]), np.array([0, 4])
    st = ibt_batch_gradients(p, q, y, x, cfg)
    before_p, before_q = p.logits.copy(), q.logits.copy()
    ibt_batch_update(p, q, y, x, cfg)
    np.testing.assert_allclose(p.logits, before_p + 0.05 * st.g_theta / (np.abs(st.g_theta) + 1e-8), atol=1e-14)
    np.testing.assert_allclose(q.logits, before_q + 0.05 * st.g_phi / (np.abs(st.g_phi) + 1e-8), atol=1e-14)


def test_dual_learning_without_policy_term_is_sampled_ibt():
    p, q = _pair_models(5)
    cfg = TrainConfig(strategy="DL(0)", logprob_floor=-1e9)
    y, x = np.array([0, 3, 3, 9]), np.array([1, 2, 5])
    dl = dual_learning_gradients(p, q, y, x, None, cfg, rng=np.random.default_rng(4), zero_inference=True)
    ibt = ibt_batch_gradients(p, q, y, x, cfg, rng=np.random.default_rng(4), decode_mode="sample")
    np.testing.assert_allclose(dl.g_theta, ibt.g_theta, atol=1e-15)
    np.testing.assert_allclose(dl.g_phi, ibt.g_phi, atol=1e-15)
    assert dl.loss_yxy == pytest.approx(ibt.loss_yxy)


def test_constant_reward_gives_zero_policy_gradient():
    sx = enumerate_space(("a", "b"), 2)
    sy = enumerate_space(("x", "y"), 2)
    p = TabularModel(sx, sy)  # uniform reconstruction: the reward is the same for every x~
    q = TabularModel(sy, sx, init_scale=1.0, random_state=0)
    cfg = TrainConfig(strategy="DL(0)")
    st = dual_learning_gradients(p, q, np.array([0, 1, 4]), np.array([], dtype=np.int64), None, cfg,
                                 rng=np.random.default_rng(0))
    assert np.max(np.abs(st.g_phi)) < 1e-12


def test_beam_mode_policy_gradient_is_exact_expectation():
    sx = enumerate_space(("a", "b"), 2)
    sy = enumerate_space(("x", "y"), 2)
    p = TabularModel(sx, sy, init_scale=1.0, random_state=1)
    q = TabularModel(sy, sx, init_scale=1.0, random_state=2)
    cfg = TrainConfig(strategy="DL(0)", sample_mode="beam", inference_beam=len(sx), logprob_floor=-1e9)
    y = np.array([0, 2, 5])
    st = dual_learning_gradients(p, q, y, np.array([], dtype=np.int64), None, cfg)
    # d/dphi of mean_y sum_h q(h|y) r(h, y) with r = log p(y|h) held fixed
    rows = softmax(q.logits, axis=1)
    reward = p.log_prob_matrix().T  # (Y, X)
    expected = np.zeros_like(q.logits)
    for j in y:
        expected[j] += rows[j] * (reward[j] - rows[j] @ reward[j]) / len(y)
    assert np.max(np.abs(st.g_phi - expected)) < 1e-8


def test_sampled_policy_gradient_is_unbiased():
    sx = enumerate_space(("a", "b"), 1)
    sy = enumerate_space(("x", "y", "z"), 1)
    p = TabularModel(sx, sy, init_scale=1.0, random_state=3)
    q = TabularModel(sy, sx, init_scale=1.0, random_state=4)
    cfg = TrainConfig(strategy="DL(0)", logprob_floor=-1e9)
    y = np.full(20_000, 1)
    st = dual_learning_gradients(p, q, y, np.array([], dtype=np.int64), None, cfg, rng=np.random.default_rng(0))
    rows = softmax(q.logits[1])
    r = p.log_prob_matrix()[:, 1]
    assert np.max(np.abs(st.g_phi[1] - rows * (r - rows @ r))) < 0.02


def test_lm_weight_requires_models():
    p, q = _pair_models()
    with pytest.raises(ValueError):
        dual_learning_gradients(p, q, [0], [0], None, TrainConfig(strategy="DL(0.5)"))


def test_diverged_error_keeps_checkpoint():
    p, q = _pair_models()
    with pytest.raises(TrainingDivergedError) as e:
        _check_finite([1.0, np.nan], (np.zeros(2),), (p, q))
    assert e.value.checkpoint[0] is not p


def test_run_is_deterministic(task):
    gt, c = task
    cfg = TrainConfig(strategy="IBT-batch", **FAST)
    a, b = run_strategy(c, cfg, gt=gt), run_strategy(c, cfg, gt=gt)
    assert a.curve_rows() == b.curve_rows()
    assert a.curve_rows()[0]["strategy"] == "IBT-batch"


def test_pretrained_models_are_not_modified(task):
    gt, c = task
    base = TrainConfig(**FAST)
    pre = pretrain_supervised(make_models(gt.src_space, gt.dst_space, base), c, base, gt)
    snapshot = pre.p_theta.logits.copy()
    r = run_strategy(c, TrainConfig(strategy="BT", **FAST), gt=gt, pretrained=pre)
    np.testing.assert_array_equal(pre.p_theta.logits, snapshot)
    assert len(r.curves) > len(pre.curves)
    assert isinstance(r, RunResult) and np.isfinite(r.last("j_dual"))


def test_ibt_epoch_one_equals_bt(task):
    gt, c = task
    a = run_strategy(c, TrainConfig(strategy="BT", **FAST), gt=gt)
    b = run_strategy(c, TrainConfig(strategy="IBT-epoch(1)", **FAST), gt=gt)
    strip = lambda rows: [{k: v for k, v in r.items() if k != "strategy"} for r in rows]
    assert strip(a.curve_rows()) == strip(b.curve_rows())


def test_zero_mono_reduces_to_supervised(task):
    gt, c = task
    bare = Corpora(c.parallel, [], [], c.valid, c.test)
    strip = lambda rows: [{k: v for k, v in r.items() if k != "strategy"} for r in rows]
    ref = strip(run_strategy(bare, TrainConfig(strategy="supervised", **FAST), gt=gt).curve_rows())
    for s in ("BT", "IBT-batch", "IBT-epoch(2)", "DL(0)"):
        assert strip(run_strategy(bare, TrainConfig(strategy=s, **FAST), gt=gt).curve_rows()) == ref


@pytest.mark.parametrize("strategy", ["IBT-epoch(2)", "DL(0.5)"])
def test_strategies_produce_batch_losses(task, strategy):
    gt, c = task
    r = run_strategy(c, TrainConfig(strategy=strategy, **FAST), gt=gt)
    names = {row["loss_name"] for row in r.curve_rows()}
    assert {"supervised", "j_dual", "token_accuracy", "mutual_information"} <= names
    if strategy.startswith("DL"):
        assert "dual_reconstruction_batch" in names


def test_exact_dual_ascent_monotone(task):
    gt, c = task
    p, q = TabularModel(gt.src_space, gt.dst_space), TabularModel(gt.dst_space, gt.src_space)
    pairs = (gt.src_space.indices([s for s, _ in c.parallel]), gt.dst_space.indices([t for _, t in c.parallel]))
    hist = exact_dual_ascent(p, q, gt.prior_q, gt.prior_p, pairs=pairs, steps=200)
    assert np.all(np.diff(hist) >= 0)
    assert hist[-1] > hist[0]
    with pytest.raises(TypeError):
        exact_dual_ascent(*_pair_models(), gt.prior_q, gt.prior_p)


def test_exact_dual_ascent_strategy(task):
    gt, c = task
    r = run_strategy(c, TrainConfig(strategy="ExactDualAscent", model="tabular", max_updates=300,
                                    checkpoint_every=100), gt=gt)
    assert isinstance(r.p_theta, TabularModel)
    assert r.final["j_dual"] > run_strategy(c, TrainConfig(**FAST), gt=gt).final["j_dual"]


def test_language_models_and_argument_checks(task):
    gt, c = task
    lx, ly = fit_language_models(c, gt.src_space, gt.dst_space)
    assert lx.shape == (len(gt.src_space),) and np.all(lx < 0)
    with pytest.raises(ValueError):
        run_strategy(c, TrainConfig(**FAST))
    with pytest.raises(ValueError):
        pretrain_supervised(_pair_models(), Corpora([], [], [], [], []), TrainConfig())
