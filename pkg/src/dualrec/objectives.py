"""Exact evaluation of the supervised, marginal, ELBO and dual reconstruction objectives.

Models may be passed either as model objects (anything with
``log_prob_matrix``) or as materialized :class:`ConditionalTable` objects.
Sums are over the full enumerated spaces; ``-inf`` sentinels propagate.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import softmax

from ._validation import check_pairs
from .space import (
    Categorical,
    ConditionalTable,
    DimensionError,
    entropy,
    kl,
    mutual_information_rows,
)


@dataclass(frozen=True)
class MIConstraint:
    i_min: float
    i_max: float

    def __post_init__(self):
        if not 0.0 <= self.i_min <= self.i_max:
            raise ValueError(f"need 0 <= i_min <= i_max, got ({self.i_min}, {self.i_max})")


@dataclass(frozen=True)
class ObjectiveReport:
    j1: float
    j2: float
    j_dual: float
    # (I(q_phi), H(p), KL) and (I(p_theta), H(q), KL)
    decomposition_1: Optional[tuple] = None
    decomposition_2: Optional[tuple] = None
    offending_pair: Optional[tuple] = None


def _as_rows(model) -> np.ndarray:
    """Dense conditional probabilities of a model or table."""
    if isinstance(model, ConditionalTable):
        return model.rows
    return np.exp(model.log_prob_matrix())


def _as_logrows(model) -> np.ndarray:
    if isinstance(model, ConditionalTable):
        with np.errstate(divide="ignore"):
            return np.log(model.rows)
    return model.log_prob_matrix()


def _spaces(model):
    return model.src_space, model.dst_space


def supervised_objective(model, pairs) -> float:
    """Mean log-likelihood per parallel pair."""
    src, dst = check_pairs(pairs, *_spaces(model))
    if isinstance(model, ConditionalTable):
        with np.errstate(divide="ignore"):
            return float(np.mean(np.log(model.rows[src, dst])))
    return float(np.mean(model.log_prob_pairs(src, dst)))


def marginal_log_likelihood(model, prior_q: Categorical, target_p: Categorical) -> float:
    """``E_{y~p} log sum_x p(y|x) q(x)``; ``-inf`` if a supported y has no model mass."""
    src_space, dst_space = _spaces(model)
    if prior_q.space != src_space or target_p.space != dst_space:
        raise DimensionError("priors do not match the model spaces")
    marg = prior_q.probs @ _as_rows(model)
    supp = target_p.probs > 0
    if np.any(marg[supp] <= 0):
        return float("-inf")
    return float(target_p.probs[supp] @ np.log(marg[supp]))


def elbo(model_theta, inference_psi, prior_q: Categorical, y) -> float:
    """``E_{x~psi(.|y)} log p(y|x) - KL(psi(.|y) || q)`` by enumeration."""
    j = model_theta.dst_space.index_of(y)
    if inference_psi.src_space != model_theta.dst_space or inference_psi.dst_space != model_theta.src_space:
        raise DimensionError("inference model must map the target space back to the source space")
    if isinstance(inference_psi, ConditionalTable):
        post = inference_psi.rows[inference_psi.src_space.index_of(y)]
    else:
        post = np.exp(inference_psi.log_prob_matrix([j])[0])
    k = kl(post, prior_q.probs)
    if not np.isfinite(k):
        return float("-inf")
    log_lik = _as_logrows(model_theta)[:, j]
    supp = post > 0
    if np.any(~np.isfinite(log_lik[supp])):
        return float("-inf")
    return float(post[supp] @ log_lik[supp] - k)


def log_evidence(model_theta, prior_q: Categorical, y) -> float:
    """``log p_theta(y)`` under the prior ``q``."""
    j = model_theta.dst_space.index_of(y)
    col = _as_rows(model_theta)[:, j]
    with np.errstate(divide="ignore"):
        return float(np.log(prior_q.probs @ col))


def _expected_log(weights: np.ndarray, logp: np.ndarray):
    """``sum w * logp`` over w > 0, with the first offending index on -inf."""
    supp = weights > 0
    bad = supp & ~np.isfinite(logp)
    if np.any(bad):
        return float("-inf"), tuple(int(i) for i in np.argwhere(bad)[0])
    return float(np.sum(weights[supp] * logp[supp])), None


def j1_from_arrays(p_rows, q_rows, prior_p):
    """J1 = E_{y~p} E_{x~q(.|y)} log p(y|x) with ``p_rows`` (X, Y) and ``q_rows`` (Y, X)."""
    weights = (q_rows * prior_p[:, None]).T  # (X, Y): p(y) q(x|y)
    with np.errstate(divide="ignore"):
        logp = np.log(p_rows)
    return _expected_log(weights, logp)


def j1_decomposition(p_theta, q_phi, prior_p: Categorical):
    """``(I(q_phi), H(p), KL(q_phi(x|y) p(y) || p_theta(y|x) q_phi(x)))``.

    ``I(q_phi) - H(p) - KL`` reproduces J1.
    """
    p_rows, q_rows = _as_rows(p_theta), _as_rows(q_phi)
    if prior_p.space != q_phi.src_space:
        raise DimensionError("prior_p must live on the inference model's source space")
    return _decompose(p_rows, q_rows, prior_p.probs)


def _decompose(p_rows, q_rows, prior_p):
    i_q = mutual_information_rows(q_rows, prior_p)
    h_p = entropy(prior_p)
    a = (q_rows * prior_p[:, None]).T  # (X, Y) joint q(x|y) p(y)
    q_marg = prior_p @ q_rows  # q_phi(x)
    b = p_rows * q_marg[:, None]  # p(y|x) q_phi(x)
    return i_q, h_p, kl(a.ravel(), b.ravel())


def dual_objective_exact(p_theta, q_phi, prior_q: Categorical, prior_p: Categorical) -> ObjectiveReport:
    """Exact J1, J2 and J_dual, with both information decompositions."""
    if prior_q.space != p_theta.src_space or prior_p.space != p_theta.dst_space:
        raise DimensionError("priors do not match the forward model spaces")
    if q_phi.src_space != p_theta.dst_space or q_phi.dst_space != p_theta.src_space:
        raise DimensionError("inference model spaces are not the reverse of the forward model")
    p_rows, q_rows = _as_rows(p_theta), _as_rows(q_phi)
    j1, bad1 = j1_from_arrays(p_rows, q_rows, prior_p.probs)
    j2, bad2 = j1_from_arrays(q_rows, p_rows, prior_q.probs)
    offending = None
    if bad1 is not None:
        offending = ("J1", bad1)
    elif bad2 is not None:
        offending = ("J2", (bad2[1], bad2[0]))
    d1 = _decompose(p_rows, q_rows, prior_p.probs)
    d2 = _decompose(q_rows, p_rows, prior_q.probs)
    return ObjectiveReport(j1, j2, j1 + j2, d1, d2, offending)


def dual_upper_bound(prior_q, prior_p, c: MIConstraint) -> float:
    """``2 I_max - H(q) - H(p)``."""
    return 2.0 * c.i_max - entropy(prior_q) - entropy(prior_p)


def lm_augmented_reward(p_recon_logprob, lm_logprob, alpha_lm, form="convex"):
    """Reconstruction log-prob interpolated with a language-model log-prob.

    ``form="convex"`` gives ``(1 - a) * recon + a * lm``; ``form="additive"``
    gives ``recon + a * lm``.
    """
    if alpha_lm < 0:
        raise ValueError("alpha_lm must be >= 0")
    if form == "convex":
        return (1.0 - alpha_lm) * p_recon_logprob + alpha_lm * lm_logprob
    if form == "additive":
        return p_recon_logprob + alpha_lm * lm_logprob
    raise ValueError(f"unknown reward form {form!r}")


def mi_constraint_check(model, prior: Categorical, c: MIConstraint):
    """``(i_min <= I <= i_max, I)`` for the model's mutual information under ``prior``."""
    if prior.space != model.src_space:
        raise DimensionError("prior does not live on the model's source space")
    mi = mutual_information_rows(_as_rows(model), prior.probs)
    return (c.i_min <= mi <= c.i_max), mi


def mi_penalty(mi: float, c: Optional[MIConstraint]) -> float:
    """Quadratic hinge ``max(0, I - I_max)^2 + max(0, I_min - I)^2``."""
    if c is None:
        return 0.0
    return max(0.0, mi - c.i_max) ** 2 + max(0.0, c.i_min - mi) ** 2


# -- analytic gradients for tabular models --------------------------------------


def _softmax_backprop(rows, g):
    """Chain ``dF/dP`` through a row softmax: ``P * (g - sum(P g))``."""
    return rows * (g - np.sum(rows * g, axis=1, keepdims=True))


def dual_objective_grads(p_logits, q_logits, prior_q, prior_p):
    """Value and logit gradients of J_dual for tabular models.

    Returns ``(j_dual, grad_theta, grad_phi)``; ``p_logits`` is (X, Y) and
    ``q_logits`` is (Y, X).
    """
    from scipy.special import log_softmax

    lp, lq = log_softmax(p_logits, axis=1), log_softmax(q_logits, axis=1)
    p_rows, q_rows = np.exp(lp), np.exp(lq)
    w1 = (q_rows * prior_p[:, None]).T  # (X, Y) weights of J1
    w2 = p_rows * prior_q[:, None]  # (X, Y) weights of J2, indexed (x, y)
    j1 = float(np.sum(w1 * lp))
    j2 = float(np.sum(w2 * lq.T))
    # J1: theta through log p(y|x); phi through the sampling weights
    g_theta = w1 - w1.sum(axis=1, keepdims=True) * p_rows
    g_phi = prior_p[:, None] * _softmax_backprop(q_rows, lp.T)
    # J2: phi through log q(x|y); theta through the sampling weights
    w2t = w2.T  # (Y, X)
    g_phi += w2t - w2t.sum(axis=1, keepdims=True) * q_rows
    g_theta += prior_q[:, None] * _softmax_backprop(p_rows, lq.T)
    return j1 + j2, g_theta, g_phi


def mutual_information_grad(logits, prior):
    """Value and logit gradient of I for a tabular conditional under ``prior``."""
    rows = softmax(logits, axis=1)
    marg = prior @ rows
    with np.errstate(divide="ignore", invalid="ignore"):
        g = prior[:, None] * (np.log(rows) - np.log(marg)[None, :])
    g = np.where(rows > 0, g, 0.0)
    mi = mutual_information_rows(rows, prior)
    return mi, _softmax_backprop(rows, g)


def supervised_grad(logits, src_idx, dst_idx):
    """Value and logit gradient of the mean supervised log-likelihood (tabular)."""
    from scipy.special import log_softmax

    lp = log_softmax(logits, axis=1)
    n = len(src_idx)
    grad = np.zeros_like(logits)
    np.add.at(grad, (src_idx, dst_idx), 1.0 / n)
    row_w = np.bincount(src_idx, minlength=logits.shape[0]) / n
    grad -= row_w[:, None] * np.exp(lp)
    return float(lp[src_idx, dst_idx].mean()), grad
