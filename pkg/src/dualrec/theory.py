"""Constructive checks of the dual reconstruction optimum.

* :func:`max_mi_coupling_search` finds a high-MI coupling with fixed marginals.
* :func:`construct_optimum` builds the optimal pair of conditionals for a
  target mutual information by bisecting between the product coupling and the
  max-MI coupling.
* :func:`verify_optimum` evaluates the bound, the mutual-posterior equations
  and marginal matching on a construction.
* :func:`check_lemma1` checks that a product factorization pins its factors.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .objectives import dual_objective_exact
from .space import (
    Categorical,
    ConditionalTable,
    JointTable,
    entropy,
    joint_mutual_information,
    mutual_information_rows,
    xlogx,
)

DEFAULT_SUPPORT_CAP = 64
CONSTRUCTION_TOL = 1e-6
IDENTITY_TOL = 1e-9
MARGINAL_TOL = 1e-9


class InfeasibleError(ValueError):
    """The requested mutual information exceeds what the coupling search achieved."""

    def __init__(self, requested, achieved):
        super().__init__(f"requested I_max={requested:.12g} exceeds achievable {achieved:.12g}")
        self.requested = requested
        self.achieved = achieved


@dataclass(frozen=True)
class OptimumConstruction:
    coupling: JointTable
    p_theta_star: ConditionalTable
    q_phi_star: ConditionalTable
    achieved_mi: float
    mixing: float = 1.0


@dataclass
class VerificationReport:
    bound_value: float
    achieved_value: float
    optimality_residuals: dict
    marginal_residuals: dict
    tolerances: dict
    passes: dict = field(default_factory=dict)

    @property
    def bound_gap(self) -> float:
        return abs(self.achieved_value - self.bound_value)

    @property
    def passed(self) -> bool:
        return all(self.passes.values())

    def as_record(self) -> dict:
        return {
            "bound_value": self.bound_value,
            "achieved_value": self.achieved_value,
            "bound_gap": self.bound_gap,
            **{f"optimality_{k}": v for k, v in self.optimality_residuals.items()},
            **{f"marginal_{k}": v for k, v in self.marginal_residuals.items()},
            **{f"pass_{k}": v for k, v in self.passes.items()},
            "passed": self.passed,
        }


# -- coupling search -----------------------------------------------------------


def _partition_coupling(coarse, fine, tol=1e-12, budget=200_000):
    """Assign every ``fine`` mass to one ``coarse`` bin so the bins fill exactly.

    Returns a (len(coarse), len(fine)) coupling or None.
    """
    order = np.argsort(-fine, kind="stable")
    remaining = coarse.astype(np.float64).copy()
    assign = np.full(len(fine), -1)
    nodes = 0

    def place(pos):
        nonlocal nodes
        if pos == len(order):
            return bool(np.all(np.abs(remaining) <= tol * len(fine)))
        nodes += 1
        if nodes > budget:
            return False
        j = order[pos]
        tried = set()
        for i in np.argsort(-remaining, kind="stable"):
            key = round(remaining[i], 12)
            if key in tried or remaining[i] < fine[j] - tol:
                continue
            tried.add(key)
            remaining[i] -= fine[j]
            assign[j] = i
            if place(pos + 1):
                return True
            remaining[i] += fine[j]
        return False

    if not place(0):
        return None
    out = np.zeros((len(coarse), len(fine)))
    out[assign, np.arange(len(fine))] = fine
    return out


def _greedy_coupling(q, p):
    q, p = q.astype(np.float64).copy(), p.astype(np.float64).copy()
    out = np.zeros((len(q), len(p)))
    for _ in range(len(q) + len(p)):
        i, j = int(np.argmax(q)), int(np.argmax(p))
        m = min(q[i], p[j])
        if m <= 0:
            break
        out[i, j] += m
        q[i] -= m
        p[j] -= m
    return out


def _cycle_ascent(joint, max_sweeps=50):
    """Move mass around 2x2 cycles to vertex endpoints while MI increases."""
    j = joint.copy()
    n, m = j.shape
    for _ in range(max_sweeps):
        improved = False
        for a in range(n):
            for b in range(a + 1, n):
                ra, rb = j[a], j[b]
                # +d at (a,c),(b,e) and -d at (a,e),(b,c); arrays indexed (c, e)
                up = np.minimum(ra[None, :], rb[:, None])
                down = np.minimum(ra[:, None], rb[None, :])
                base = xlogx(ra)[:, None] + xlogx(rb)[None, :] + xlogx(ra)[None, :] + xlogx(rb)[:, None]
                best_gain, best = 1e-14, None
                for d in (up, -down):
                    ac = ra[:, None] + d
                    be = rb[None, :] + d
                    ae = ra[None, :] - d
                    bc = rb[:, None] - d
                    gain = xlogx(np.clip(ac, 0, None)) + xlogx(np.clip(be, 0, None)) + xlogx(
                        np.clip(ae, 0, None)
                    ) + xlogx(np.clip(bc, 0, None)) - base
                    np.fill_diagonal(gain, -np.inf)
                    idx = np.unravel_index(np.argmax(gain), gain.shape)
                    if gain[idx] > best_gain:
                        best_gain, best = gain[idx], (idx, d[idx])
                if best is not None:
                    (c, e), d = best
                    j[a, c] += d
                    j[b, e] += d
                    j[a, e] -= d
                    j[b, c] -= d
                    np.clip(j, 0.0, None, out=j)
                    improved = True
        if not improved:
            break
    return j


def max_mi_coupling_search(q: Categorical, p: Categorical, cap=DEFAULT_SUPPORT_CAP) -> JointTable:
    """A coupling of ``q`` and ``p`` with (locally) maximal mutual information.

    Exact partition couplings are tried first, so when one marginal's masses
    partition the other's the result attains ``min(H(q), H(p))``. Otherwise a
    greedy mass-matching coupling is refined by cycle ascent.
    """
    qv, pv = q.probs, p.probs
    qi, pj = np.flatnonzero(qv > 0), np.flatnonzero(pv > 0)
    if len(qi) > cap or len(pj) > cap:
        raise ValueError(f"support sizes {len(qi)}x{len(pj)} exceed the cap of {cap}")
    qs, ps = qv[qi], pv[pj]
    candidates = []
    if len(qi) <= len(pj):
        c = _partition_coupling(qs, ps)
        if c is not None:
            candidates.append(c)
    if len(pj) <= len(qi):
        c = _partition_coupling(ps, qs)
        if c is not None:
            candidates.append(c.T)
    if not candidates:
        candidates.append(_cycle_ascent(_greedy_coupling(qs, ps)))
    best = max(candidates, key=joint_mutual_information)
    # restore exact marginals after clipping
    best = _fix_marginals(best, qs, ps)
    full = np.zeros((len(qv), len(pv)))
    full[np.ix_(qi, pj)] = best
    return JointTable(q.space, p.space, full / full.sum())


def _fix_marginals(j, qs, ps, iters=50):
    j = j.copy()
    for _ in range(iters):
        rs = j.sum(axis=1)
        j *= np.divide(qs, rs, out=np.ones_like(rs), where=rs > 0)[:, None]
        cs = j.sum(axis=0)
        j *= np.divide(ps, cs, out=np.ones_like(cs), where=cs > 0)[None, :]
        if max(np.abs(j.sum(1) - qs).max(), np.abs(j.sum(0) - ps).max()) < 1e-15:
            break
    return j


# -- construction ----------------------------------------------------------------


def _conditionals(joint, q, p):
    with np.errstate(divide="ignore", invalid="ignore"):
        fwd = np.where(q[:, None] > 0, joint / q[:, None], p[None, :])
        bwd = np.where(p[:, None] > 0, joint.T / p[:, None], q[None, :])
    fwd /= fwd.sum(axis=1, keepdims=True)
    bwd /= bwd.sum(axis=1, keepdims=True)
    return fwd, bwd


def construct_optimum(q: Categorical, p: Categorical, i_max: float, *, coupling=None, tol=1e-13) -> OptimumConstruction:
    """Optimal conditionals whose joint has mutual information ``i_max``.

    Bisects ``lam * C + (1 - lam) * q (x) p`` where C is the max-MI coupling;
    MI is convex along the segment and zero at ``lam = 0``, hence nondecreasing.
    """
    if i_max < 0:
        raise ValueError("i_max must be >= 0")
    if coupling is None:
        coupling = max_mi_coupling_search(q, p)
    cmax = coupling.matrix
    prod = np.outer(q.probs, p.probs)
    top = joint_mutual_information(cmax)
    if i_max > top + 1e-12:
        raise InfeasibleError(i_max, top)

    def mi_at(lam):
        return joint_mutual_information(lam * cmax + (1.0 - lam) * prod)

    if i_max <= 0.0:
        lam = 0.0
    elif i_max >= top:
        lam = 1.0
    else:
        lo, hi = 0.0, 1.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            val = mi_at(mid)
            if abs(val - i_max) <= tol:
                lo = hi = mid
                break
            if val < i_max:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-17:
                break
        lam = 0.5 * (lo + hi)
    joint = lam * cmax + (1.0 - lam) * prod
    joint /= joint.sum()
    fwd, bwd = _conditionals(joint, q.probs, p.probs)
    return OptimumConstruction(
        coupling=JointTable(q.space, p.space, joint),
        p_theta_star=ConditionalTable(q.space, p.space, fwd),
        q_phi_star=ConditionalTable(p.space, q.space, bwd),
        achieved_mi=joint_mutual_information(joint),
        mixing=lam,
    )


def optimality_residuals(p_rows, q_rows, q, p, i_max):
    """The four mutual-optimality equations and the two marginal-matching gaps."""
    p_theta_y = q @ p_rows
    q_phi_x = p @ q_rows
    i_p = mutual_information_rows(p_rows, q)
    i_q = mutual_information_rows(q_rows, p)
    live_x = q_phi_x > 0
    live_y = p_theta_y > 0
    # p(y|x) = q(x|y) p(y) / q_phi(x)
    post_p = q_rows.T[live_x] * p[None, :] / q_phi_x[live_x, None]
    # q(x|y) = p(y|x) q(x) / p_theta(y)
    post_q = p_rows.T[live_y] * q[None, :] / p_theta_y[live_y, None]
    opt = {
        "mi_q_phi": abs(i_q - i_max),
        "mi_p_theta": abs(i_p - i_max),
        "p_theta_posterior": float(np.max(np.abs(p_rows[live_x] - post_p), initial=0.0)),
        "q_phi_posterior": float(np.max(np.abs(q_rows[live_y] - post_q), initial=0.0)),
    }
    marg = {
        "q_phi_x": float(np.max(np.abs(q_phi_x - q))),
        "p_theta_y": float(np.max(np.abs(p_theta_y - p))),
    }
    return opt, marg


def verify_optimum(
    construction: OptimumConstruction,
    q: Categorical,
    p: Categorical,
    i_max: float,
    tol: float = CONSTRUCTION_TOL,
    identity_tol: float = IDENTITY_TOL,
    marginal_tol: float = MARGINAL_TOL,
) -> VerificationReport:
    """Bound attainment, optimality residuals and marginal matching of a construction."""
    rep = dual_objective_exact(construction.p_theta_star, construction.q_phi_star, q, p)
    bound = 2.0 * i_max - entropy(q) - entropy(p)
    opt, marg = optimality_residuals(
        construction.p_theta_star.rows, construction.q_phi_star.rows, q.probs, p.probs, i_max
    )
    report = VerificationReport(
        bound_value=bound,
        achieved_value=rep.j_dual,
        optimality_residuals=opt,
        marginal_residuals=marg,
        tolerances={"bound": tol, "identity": identity_tol, "marginal": marginal_tol},
    )
    report.passes = {
        "bound": report.bound_gap < tol,
        "optimality": max(opt.values()) < identity_tol,
        "marginals": max(marg.values()) < marginal_tol,
    }
    return report


@dataclass(frozen=True)
class Lemma1Result:
    premise_holds: bool
    conclusion_holds: bool
    premise_residual: float
    conclusion_residual: float

    @property
    def passed(self) -> bool:
        return (not self.premise_holds) or self.conclusion_holds


def check_lemma1(p, p_prime, q, q_prime, premise_tol=1e-12, conclusion_tol=1e-10) -> Lemma1Result:
    """If ``p'(x) q'(y) = p(x) q(y)`` everywhere, then ``p' = p`` and ``q' = q``."""
    p, p_prime = np.asarray(getattr(p, "probs", p)), np.asarray(getattr(p_prime, "probs", p_prime))
    q, q_prime = np.asarray(getattr(q, "probs", q)), np.asarray(getattr(q_prime, "probs", q_prime))
    premise = float(np.max(np.abs(np.outer(p_prime, q_prime) - np.outer(p, q))))
    conclusion = float(max(np.max(np.abs(p_prime - p)), np.max(np.abs(q_prime - q))))
    holds = premise <= premise_tol
    return Lemma1Result(holds, holds and conclusion <= conclusion_tol, premise, conclusion)
