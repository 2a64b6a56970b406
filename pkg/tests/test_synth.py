import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from dualrec.models import TabularModel
from dualrec.space import entropy
from dualrec.synth import (
    PRESETS,
    TaskSpec,
    build_ground_truth,
    channel_mutual_information,
    cipher_task,
    corpus_bleu,
    oracle_eval,
    sample_corpora,
    sample_preset,
    token_accuracy,
)


def small(eps=0.1, **kw):
    return build_ground_truth(cipher_task(n_symbols=3, max_len=2, noise_eps=eps, **kw))


def test_zipf_symbols():
    spec = cipher_task(n_symbols=4)
    w = np.array([1, 1 / 2, 1 / 3, 1 / 4])
    np.testing.assert_allclose(spec.symbols, w / w.sum(), atol=1e-15)
    np.testing.assert_allclose(spec.channel().sum(axis=1), 1.0)


def test_noiseless_channel_is_bijection():
    gt = small(eps=0.0)
    rows = gt.true_conditional.rows
    assert np.all(rows.max(axis=1) == 1.0)
    assert len(set(rows.argmax(axis=1))) == len(gt.src_space)
    assert gt.joint.mutual_information() == pytest.approx(entropy(gt.prior_q), abs=1e-12)
    assert gt.conditional_entropy() == pytest.approx(0.0, abs=1e-12)


def test_uniform_noise_reveals_only_length():
    gt = small(eps=2 / 3, length_dist=[0.3, 0.7])
    h_len = -(0.3 * math.log(0.3) + 0.7 * math.log(0.7))
    assert gt.joint.mutual_information() == pytest.approx(h_len, abs=1e-12)
    assert channel_mutual_information(gt.spec) == pytest.approx(h_len, abs=1e-12)


@settings(max_examples=25)
@given(st.integers(0, 1000), st.floats(0.0, 0.6), st.integers(2, 4), st.integers(1, 3))
def test_closed_form_mi_matches_exact(seed, eps, a, max_len):
    rng = np.random.default_rng(seed)
    spec = cipher_task(n_symbols=a, max_len=max_len, noise_eps=eps,
                       length_dist=rng.dirichlet(np.ones(max_len)), seed=seed)
    gt = build_ground_truth(spec)
    assert channel_mutual_information(spec) == pytest.approx(gt.joint.mutual_information(), abs=1e-10)


def test_parallel_pairs_follow_joint():
    gt = small()
    c = sample_corpora(gt, 20_000, 0, 0, 0, 0, seed=3)
    idx = [gt.src_space.index_of(s) * len(gt.dst_space) + gt.dst_space.index_of(t) for s, t in c.parallel]
    obs = np.bincount(idx, minlength=gt.joint.matrix.size)
    exp = gt.joint.matrix.ravel() * len(idx)
    live = exp > 0
    assert obs[~live].sum() == 0
    assert chisquare(obs[live], exp[live]).pvalue > 1e-3


def test_mono_y_follows_target_marginal():
    gt = small()
    c = sample_corpora(gt, 0, 0, 20_000, 0, 0, seed=4)
    obs = np.bincount([gt.dst_space.index_of(t) for t in c.mono_y], minlength=len(gt.dst_space))
    assert chisquare(obs, gt.prior_p.probs * len(c.mono_y)).pvalue > 1e-3


def test_held_out_sources_unseen_and_deterministic():
    gt = build_ground_truth(cipher_task())
    a = sample_corpora(gt, 100, 50, 50, 40, 60, seed=9)
    b = sample_corpora(gt, 100, 50, 50, 40, 60, seed=9)
    assert a == b
    assert a.sizes() == dict(parallel=100, mono_x=50, mono_y=50, valid=40, test=60)
    train = {s for s, _ in a.parallel}
    valid = [s for s, _ in a.valid]
    test = [s for s, _ in a.test]
    assert not train & set(valid) and not train & set(test) and not set(valid) & set(test)
    assert len(set(test)) == len(test)
    assert a != sample_corpora(gt, 100, 50, 50, 40, 60, seed=10)


def test_too_many_held_out_pairs():
    gt = small()
    with pytest.raises(ValueError):
        sample_corpora(gt, 5, 0, 0, 10, 10)
    with pytest.raises(ValueError):
        sample_corpora(gt, -1, 0, 0, 0, 0)


def test_presets():
    gt, c = sample_preset("low-resource", seed=0)
    assert c.sizes() == {"parallel": 200, "mono_x": 2000, "mono_y": 2000, "valid": 200, "test": 300}
    assert set(PRESETS) == {"low-resource", "high-resource", "cross-domain"}
    gt, c = sample_preset("cross-domain", seed=0, n_parallel=2000, n_mono_x=2000)
    mean_len = lambda xs: np.mean([len(s) for s in xs])
    assert mean_len(c.mono_x) > mean_len([s for s, _ in c.parallel]) + 0.5
    assert gt.shifted is not None


def test_reversed_ground_truth():
    gt = small()
    r = gt.reversed()
    assert r.src_space is gt.dst_space
    np.testing.assert_allclose(r.joint.matrix, gt.joint.matrix.T)
    assert r.joint.mutual_information() == pytest.approx(gt.joint.mutual_information())


def test_spec_validation():
    with pytest.raises(ValueError):
        TaskSpec(("a", "b"), ("A",), (0, 1), 0.1, (1.0,))
    with pytest.raises(ValueError):
        TaskSpec(("a", "b"), ("A", "B"), (0, 0), 0.1, (1.0,))
    with pytest.raises(ValueError):
        build_ground_truth(cipher_task(max_len=2, length_dist=[1.0, 0.0]))


def test_metrics_examples():
    assert token_accuracy([("a", "b")], [("a", "c", "d")]) == pytest.approx(1 / 3)
    assert token_accuracy([], []) == 0.0
    refs = [("a", "b", "c", "d"), ("b", "c")]
    assert corpus_bleu(refs, refs) == pytest.approx(100.0)
    assert corpus_bleu([("x",), ("y",)], refs) < 20.0


def test_oracle_eval_of_true_model():
    gt = small()
    c = sample_corpora(gt, 2, 0, 0, 0, 8, seed=1)
    m = TabularModel.from_table(gt.true_conditional)
    rec = oracle_eval(m, gt, c.test)
    rows = gt.true_conditional.rows[[gt.src_space.index_of(s) for s, _ in c.test]]
    h = -np.sum(np.where(rows > 0, rows * np.log(np.where(rows > 0, rows, 1)), 0), axis=1)
    assert rec["cross_entropy"] == pytest.approx(h.mean(), abs=1e-10)
    assert rec["marginal_kl"] == pytest.approx(0.0, abs=1e-12)
    # the mode of each true row is the noiseless cipher output
    assert rec["token_accuracy"] > 0.6
