import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import softmax

from dualrec.objectives import dual_objective_exact
from dualrec.space import Categorical, ConditionalTable, entropy, enumerate_space, max_mi_bound, mutual_information_rows
from dualrec.theory import (
    InfeasibleError,
    check_lemma1,
    construct_optimum,
    max_mi_coupling_search,
    optimality_residuals,
    verify_optimum,
)


def cat(probs):
    sp = enumerate_space(tuple(f"s{i}" for i in range(len(probs))), 1)
    return Categorical(sp, probs)


@pytest.mark.parametrize("i_max", [0.0, 0.52, 1.04, 1.56, 2.079])
def test_uniform8_bound_attained(i_max):
    u = cat(np.full(8, 1 / 8))
    con = construct_optimum(u, u, i_max)
    rep = verify_optimum(con, u, u, i_max)
    assert rep.passed, rep.as_record()
    assert rep.bound_gap < 1e-6
    assert con.achieved_mi == pytest.approx(i_max, abs=1e-9)


def test_zero_information_is_product():
    q, p = cat([0.5, 0.3, 0.2]), cat([0.1, 0.9])
    con = construct_optimum(q, p, 0.0)
    np.testing.assert_allclose(con.coupling.matrix, np.outer(q.probs, p.probs), atol=1e-15)
    assert verify_optimum(con, q, p, 0.0).passed


def test_full_information_on_permutation():
    u = cat(np.full(4, 0.25))
    con = construct_optimum(u, u, math.log(4))
    rows = con.p_theta_star.rows
    assert np.all((rows < 1e-12) | (rows > 1 - 1e-12))
    assert dual_objective_exact(con.p_theta_star, con.q_phi_star, u, u).j_dual == pytest.approx(0.0, abs=1e-9)


def test_coupling_search_reaches_min_entropy():
    q, p = cat(np.full(4, 0.25)), cat([0.5, 0.5])
    c = max_mi_coupling_search(q, p)
    assert c.mutual_information() == pytest.approx(math.log(2), abs=1e-12)
    np.testing.assert_allclose(c.matrix.sum(1), q.probs, atol=1e-14)
    np.testing.assert_allclose(c.matrix.sum(0), p.probs, atol=1e-14)


def test_infeasible_request():
    q = cat([0.5, 0.5])
    with pytest.raises(InfeasibleError):
        construct_optimum(q, q, math.log(2) + 0.1)
    with pytest.raises(ValueError):
        construct_optimum(q, q, -0.1)


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1), st.integers(2, 5), st.integers(2, 5), st.floats(0.0, 1.0))
def test_random_marginals_construction(seed, nx, ny, frac):
    rng = np.random.default_rng(seed)
    q, p = cat(rng.dirichlet(np.ones(nx))), cat(rng.dirichlet(np.ones(ny)))
    top = max_mi_coupling_search(q, p).mutual_information()
    i_max = frac * top
    rep = verify_optimum(construct_optimum(q, p, i_max), q, p, i_max)
    assert rep.passed, rep.as_record()
    assert top <= max_mi_bound(q, p) + 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_perturbations_stay_below_bound(seed):
    rng = np.random.default_rng(seed)
    u = cat(np.full(6, 1 / 6))
    i_max = 0.9
    con = construct_optimum(u, u, i_max)
    bound = 2 * i_max - 2 * entropy(u)
    with np.errstate(divide="ignore"):
        lp, lq = np.log(con.p_theta_star.rows), np.log(con.q_phi_star.rows)
    for _ in range(20):
        pr = softmax(lp + 0.05 * rng.normal(size=lp.shape), axis=1)
        qr = softmax(lq + 0.05 * rng.normal(size=lq.shape), axis=1)
        if max(mutual_information_rows(pr, u.probs), mutual_information_rows(qr, u.probs)) > i_max:
            continue
        sp = u.space
        j = dual_objective_exact(ConditionalTable(sp, sp, pr), ConditionalTable(sp, sp, qr), u, u).j_dual
        assert j <= bound + 1e-10


def test_residuals_detect_mismatch():
    u = cat(np.full(3, 1 / 3))
    flat = np.full((3, 3), 1 / 3)
    opt, marg = optimality_residuals(flat, np.eye(3), u.probs, u.probs, 0.0)
    assert opt["mi_q_phi"] == pytest.approx(math.log(3))
    assert max(marg.values()) < 1e-15


def test_factorization_sweep():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        p, q = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(4))
        assert check_lemma1(p, p, q, q).conclusion_holds
        c = rng.uniform(0.5, 2.0, size=3)
        pp = p * c / np.sum(p * c)
        r = check_lemma1(p, pp, q, q)
        assert r.passed
        assert not r.premise_holds or np.allclose(pp, p)
