import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import softmax

from dualrec.objectives import (
    MIConstraint,
    dual_objective_exact,
    dual_objective_grads,
    dual_upper_bound,
    elbo,
    j1_decomposition,
    j1_from_arrays,
    lm_augmented_reward,
    log_evidence,
    marginal_log_likelihood,
    mi_constraint_check,
    mi_penalty,
    mutual_information_grad,
    supervised_grad,
    supervised_objective,
)
from dualrec.models import TabularModel
from dualrec.space import Categorical, ConditionalTable, DimensionError, enumerate_space, marginal_and_posterior

from conftest import fd_grad, random_categorical, rel_err

seeds = st.integers(0, 2**31 - 1)


@pytest.fixture
def sp4():
    return enumerate_space(tuple("abcd"), 1)


def test_identity_models_attain_zero(sp4):
    u = Categorical.uniform(sp4)
    ident = ConditionalTable(sp4, sp4, np.eye(4))
    rep = dual_objective_exact(ident, ident, u, u)
    assert rep.j1 == 0.0 and rep.j2 == 0.0
    assert rep.j_dual == pytest.approx(dual_upper_bound(u, u, MIConstraint(0.0, math.log(4))), abs=1e-12)


def test_uniform_models(sp4):
    u = Categorical.uniform(sp4)
    flat = ConditionalTable(sp4, sp4, np.full((4, 4), 0.25))
    rep = dual_objective_exact(flat, flat, u, u)
    assert rep.j_dual == pytest.approx(-2 * math.log(4), abs=1e-12)
    i_q, h_p, k = rep.decomposition_1
    assert (i_q, k) == (pytest.approx(0.0, abs=1e-12), pytest.approx(0.0, abs=1e-12))
    assert h_p == pytest.approx(math.log(4))


def test_zero_probability_reconstruction_is_neg_inf(sp4):
    u = Categorical.uniform(sp4)
    ident = ConditionalTable(sp4, sp4, np.eye(4))
    shifted = ConditionalTable(sp4, sp4, np.eye(4)[[1, 2, 3, 0]])
    rep = dual_objective_exact(ident, shifted, u, u)
    assert rep.j_dual == -math.inf
    assert rep.offending_pair is not None


def test_space_mismatch_raises(sp4, space12):
    m = TabularModel(sp4, space12)
    with pytest.raises(DimensionError):
        dual_objective_exact(m, TabularModel(sp4, space12), Categorical.uniform(sp4), Categorical.uniform(space12))


@given(seeds)
def test_decomposition_reproduces_j1(seed):
    rng = np.random.default_rng(seed)
    sx = enumerate_space(("a", "b"), 2)
    sy = enumerate_space(("x", "y", "z"), 1)
    p = TabularModel(sx, sy, init_scale=1.5, random_state=int(rng.integers(1 << 30)))
    q = TabularModel(sy, sx, init_scale=1.5, random_state=int(rng.integers(1 << 30)))
    prior_q, prior_p = random_categorical(sx, rng), random_categorical(sy, rng)
    rep = dual_objective_exact(p, q, prior_q, prior_p)
    i_q, h_p, k = j1_decomposition(p, q, prior_p)
    assert rep.j1 == pytest.approx(i_q - h_p - k, abs=1e-10)
    i_p, h_q, k2 = rep.decomposition_2
    assert rep.j2 == pytest.approx(i_p - h_q - k2, abs=1e-10)


@given(seeds)
def test_j_dual_below_bound(seed):
    rng = np.random.default_rng(seed)
    sp = enumerate_space(("a", "b", "c"), 1)
    p = TabularModel(sp, sp, init_scale=2.0, random_state=seed % 1000)
    q = TabularModel(sp, sp, init_scale=2.0, random_state=seed % 1000 + 1)
    prior_q, prior_p = random_categorical(sp, rng), random_categorical(sp, rng)
    rep = dual_objective_exact(p, q, prior_q, prior_p)
    _, i_q = mi_constraint_check(q, prior_p, MIConstraint(0.0, 10.0))
    _, i_p = mi_constraint_check(p, prior_q, MIConstraint(0.0, 10.0))
    c = MIConstraint(0.0, max(i_p, i_q))
    assert rep.j_dual <= dual_upper_bound(prior_q, prior_p, c) + 1e-10


@given(seeds)
def test_relabeling_invariance(seed):
    rng = np.random.default_rng(seed)
    p_rows = rng.dirichlet(np.ones(5), size=4)
    q_rows = rng.dirichlet(np.ones(4), size=5)
    prior = rng.dirichlet(np.ones(5))
    px, py = rng.permutation(4), rng.permutation(5)
    a, _ = j1_from_arrays(p_rows, q_rows, prior)
    b, _ = j1_from_arrays(p_rows[px][:, py], q_rows[py][:, px], prior[py])
    assert a == pytest.approx(b, abs=1e-12)


@given(seeds)
def test_elbo_bounds_evidence(seed):
    rng = np.random.default_rng(seed)
    sp = enumerate_space(("a", "b"), 2)
    theta = ConditionalTable(sp, sp, rng.dirichlet(np.ones(6), size=6))
    prior = random_categorical(sp, rng)
    psi = ConditionalTable(sp, sp, rng.dirichlet(np.ones(6), size=6))
    y = sp.sentence(int(rng.integers(6)))
    assert elbo(theta, psi, prior, y) <= log_evidence(theta, prior, y) + 1e-12
    _, post = marginal_and_posterior(theta, prior)
    exact = ConditionalTable(sp, sp, post.rows)
    assert elbo(theta, exact, prior, y) == pytest.approx(log_evidence(theta, prior, y), abs=1e-10)


def test_marginal_log_likelihood(sp4):
    u = Categorical.uniform(sp4)
    flat = ConditionalTable(sp4, sp4, np.full((4, 4), 0.25))
    assert marginal_log_likelihood(flat, u, u) == pytest.approx(-math.log(4))
    rows = np.eye(4)[[0, 0, 1, 1]]
    assert marginal_log_likelihood(ConditionalTable(sp4, sp4, rows), u, u) == -math.inf


def test_supervised_objective(space12):
    m = TabularModel(space12, space12)
    pairs = [(("a",), ("b",)), (("c", "a"), ("a", "a"))]
    assert supervised_objective(m, pairs) == pytest.approx(-math.log(12))


def test_lm_reward_forms():
    assert lm_augmented_reward(-2.0, -4.0, 0.0) == -2.0
    assert lm_augmented_reward(-2.0, -4.0, 0.25) == pytest.approx(-2.5)
    assert lm_augmented_reward(-2.0, -4.0, 0.5, form="additive") == pytest.approx(-4.0)
    with pytest.raises(ValueError):
        lm_augmented_reward(-1.0, -1.0, -0.1)


def test_mi_penalty_and_constraint():
    c = MIConstraint(0.5, 1.0)
    assert mi_penalty(0.7, c) == 0.0
    assert mi_penalty(1.5, c) == pytest.approx(0.25)
    assert mi_penalty(0.2, c) == pytest.approx(0.09)
    assert mi_penalty(9.0, None) == 0.0
    with pytest.raises(ValueError):
        MIConstraint(1.0, 0.5)


@pytest.mark.parametrize("case", range(10))
def test_dual_grads_finite_differences(case):
    rng = np.random.default_rng(case)
    nx, ny = 4, 3
    pl, ql = rng.normal(size=(nx, ny)), rng.normal(size=(ny, nx))
    prior_q, prior_p = rng.dirichlet(np.ones(nx)), rng.dirichlet(np.ones(ny))
    val, g_theta, g_phi = dual_objective_grads(pl, ql, prior_q, prior_p)
    f = lambda: dual_objective_grads(pl, ql, prior_q, prior_p)[0]
    assert rel_err(g_theta, fd_grad(f, pl)) < 1e-4
    assert rel_err(g_phi, fd_grad(f, ql)) < 1e-4
    sx = enumerate_space(tuple("abcd"), 1)
    sy = enumerate_space(tuple("xyz"), 1)
    rep = dual_objective_exact(
        ConditionalTable(sx, sy, softmax(pl, axis=1)), ConditionalTable(sy, sx, softmax(ql, axis=1)),
        Categorical(sx, prior_q), Categorical(sy, prior_p),
    )
    assert val == pytest.approx(rep.j_dual, abs=1e-12)


@pytest.mark.parametrize("case", range(5))
def test_mi_and_supervised_grads(case):
    rng = np.random.default_rng(100 + case)
    logits = rng.normal(size=(4, 5))
    prior = rng.dirichlet(np.ones(4))
    _, g = mutual_information_grad(logits, prior)
    assert rel_err(g, fd_grad(lambda: mutual_information_grad(logits, prior)[0], logits)) < 1e-4
    src, dst = rng.integers(4, size=7), rng.integers(5, size=7)
    _, g = supervised_grad(logits, src, dst)
    assert rel_err(g, fd_grad(lambda: supervised_grad(logits, src, dst)[0], logits)) < 1e-4
