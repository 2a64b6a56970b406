"""Training strategies: supervised pretraining, back-translation, iterative
back-translation (epoch and batch level), dual learning, and exact dual ascent."""
from __future__ import annotations

import math
import re
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from ._validation import check_positive, check_probability, check_rng
from .models import AutoregressiveModel, BigramLanguageModel, TabularModel
from .objectives import (
    MIConstraint,
    dual_objective_grads,
    lm_augmented_reward,
    mi_penalty,
    mutual_information_grad,
    supervised_grad,
)
from .space import Categorical, kl, mutual_information_rows

MODEL_TYPES = {"autoregressive": AutoregressiveModel, "tabular": TabularModel}


class TrainingDivergedError(RuntimeError):
    """Non-finite loss or gradient; ``checkpoint`` holds the last finite models."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


# -- strategy labels -------------------------------------------------------------

_LABELS = [
    (re.compile(r"^(supervised|baseline)$", re.I), "supervised"),
    (re.compile(r"^BT$", re.I), "BT"),
    (re.compile(r"^IBT[-_]?batch$", re.I), "IBT-batch"),
    (re.compile(r"^IBT[-_]?epoch(?:\((\d+)\)|[-_](\d+))?$", re.I), "IBT-epoch"),
    (re.compile(r"^(?:DualLearning|DL)(?:\(([0-9.eE+-]+)\)|[-_]([0-9.eE+-]+))?$", re.I), "DualLearning"),
    (re.compile(r"^ExactDualAscent$", re.I), "ExactDualAscent"),
]


def parse_strategy(label: str):
    """``(kind, argument)`` for labels like ``IBT-epoch(2)``, ``IBT-epoch-2`` or ``DL(0.1)``."""
    label = str(label).strip()
    for rx, kind in _LABELS:
        m = rx.match(label)
        if not m:
            continue
        arg = next((g for g in m.groups() if g), None) if m.groups() else None
        if kind == "IBT-epoch":
            k = int(arg) if arg else 1
            if k < 1:
                raise ValueError("IBT-epoch needs at least one iteration")
            return kind, k
        if kind == "DualLearning":
            alpha = float(arg) if arg else 0.0
            check_probability(alpha, "alpha_lm", closed_right=True)
            return kind, alpha
        return kind, None
    raise ValueError(f"unknown strategy {label!r}")


def strategy_label(kind: str, arg=None) -> str:
    if kind == "IBT-epoch":
        return f"IBT-epoch({arg})"
    if kind == "DualLearning":
        return f"DualLearning({arg:g})"
    return kind


# -- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "supervised"
    model: str = "autoregressive"
    batch_size: int = 32
    checkpoint_every: int = 250
    lr_pretrain: float = 1e-2
    lr_finetune: float = 2e-3
    lr_decay: float = 0.3
    patience_checkpoints: int = 3
    max_decays: int = 5
    max_updates: int = 20_000
    inference_beam: int = 2
    eval_beam: int = 5
    sample_mode: str = "sample"
    mi_penalty_weight: float = 0.0
    mi_constraint: Optional[tuple] = None
    logprob_floor: float = -30.0
    mix_ratio: float = 1.0
    lm_smoothing: float = 0.1
    init_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        parse_strategy(self.strategy)
        if self.model not in MODEL_TYPES:
            raise ValueError(f"model must be one of {sorted(MODEL_TYPES)}")
        for name in ("lr_pretrain", "lr_finetune", "lm_smoothing"):
            check_positive(getattr(self, name), name)
        if not 0.0 < self.lr_decay < 1.0:
            raise ValueError("lr_decay must lie in (0, 1)")
        for name in ("batch_size", "checkpoint_every", "patience_checkpoints", "max_updates",
                     "inference_beam", "eval_beam"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_decays < 0:
            raise ValueError("max_decays must be >= 0")
        if self.sample_mode not in ("sample", "beam"):
            raise ValueError("sample_mode must be 'sample' or 'beam'")
        if self.mi_penalty_weight < 0 or self.mix_ratio < 0:
            raise ValueError("mi_penalty_weight and mix_ratio must be >= 0")
        if self.mi_constraint is not None:
            object.__setattr__(self, "mi_constraint", tuple(float(v) for v in self.mi_constraint))
            MIConstraint(*self.mi_constraint)

    @property
    def kind(self) -> str:
        return parse_strategy(self.strategy)[0]

    @property
    def argument(self):
        return parse_strategy(self.strategy)[1]

    @property
    def label(self) -> str:
        return strategy_label(*parse_strategy(self.strategy))

    def as_dict(self) -> dict:
        d = asdict(self)
        if d["mi_constraint"] is not None:
            d["mi_constraint"] = list(d["mi_constraint"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


# Small schedule that keeps a 5-seed strategy grid on the low-resource preset
# within desk budgets.
DESK_CONFIG = dict(checkpoint_every=200, patience_checkpoints=2, max_decays=2, max_updates=3000)


# -- optimizer and schedule ---------------------------------------------------------


class Adam:
    """Adam for gradient *ascent* on a single parameter array."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = float(lr), beta1, beta2, eps
        self.reset()

    def reset(self):
        self.m = self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        if self.m is None:
            self.m, self.v = np.zeros_like(params), np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        params += self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class PlateauSchedule:
    """Decay the rate after ``patience`` checkpoints without improvement; stop after ``max_decays``."""

    def __init__(self, lr, decay, patience, max_decays):
        self.lr, self.decay, self.patience, self.max_decays = lr, decay, patience, max_decays
        self.best = -np.inf
        self.bad = 0
        self.decays = 0

    def update(self, score: float) -> str:
        if score > self.best:
            self.best, self.bad = score, 0
            return "improved"
        self.bad += 1
        if self.bad < self.patience:
            return "wait"
        self.bad = 0
        if self.decays >= self.max_decays:
            return "stop"
        self.decays += 1
        self.lr *= 1.0 - self.decay
        return "decay"


# -- results -------------------------------------------------------------------------

# curve field -> (direction, loss_name) in the long CSV format
CURVE_FIELDS = {
    "dual_rec_xyx": ("x->y->x", "dual_reconstruction_batch"),
    "dual_rec_yxy": ("y->x->y", "dual_reconstruction_batch"),
    "exact_rec_xyx": ("x->y->x", "dual_reconstruction"),
    "exact_rec_yxy": ("y->x->y", "dual_reconstruction"),
    "j_dual": ("both", "j_dual"),
    "sup_loss_xy": ("x->y", "supervised"),
    "sup_loss_yx": ("y->x", "supervised"),
    "mi_xy": ("x->y", "mutual_information"),
    "mi_yx": ("y->x", "mutual_information"),
    "token_acc_xy": ("x->y", "token_accuracy"),
    "token_acc_yx": ("y->x", "token_accuracy"),
    "marginal_kl_xy": ("x->y", "marginal_kl"),
    "marginal_kl_yx": ("y->x", "marginal_kl"),
    "lr": ("both", "learning_rate"),
}


@dataclass
class CurveRecord:
    step: int
    seed: int
    strategy: str
    phase: str
    values: dict = field(default_factory=dict)

    def rows(self):
        for key, (direction, name) in CURVE_FIELDS.items():
            v = self.values.get(key)
            if v is not None and np.isfinite(v):
                yield {"step": self.step, "direction": direction, "loss_name": name, "value": float(v),
                       "seed": self.seed, "strategy": self.strategy}


@dataclass
class RunResult:
    curves: list
    p_theta: object
    q_phi: object
    wall_seconds: float
    config: dict
    final: dict = field(default_factory=dict)

    def curve_rows(self) -> list:
        return [r for rec in self.curves for r in rec.rows()]

    def last(self, key):
        for rec in reversed(self.curves):
            if key in rec.values and np.isfinite(rec.values[key]):
                return rec.values[key]
        return float("nan")


# -- shared helpers ------------------------------------------------------------------


def _indices(space, batch) -> np.ndarray:
    if isinstance(batch, np.ndarray) and batch.dtype.kind in "iu":
        return batch.astype(np.int64)
    return space.indices(batch) if len(batch) else np.zeros(0, dtype=np.int64)


def _streams(seed: int, n: int):
    return [np.random.default_rng([int(seed), i]) for i in range(n)]


def make_models(src_space, dst_space, config: TrainConfig):
    """Fresh forward and backward models of the configured type."""
    cls = MODEL_TYPES[config.model]
    rng = np.random.default_rng([int(config.seed), 99])
    p = cls(src_space, dst_space, init_scale=config.init_scale, random_state=rng)
    q = cls(dst_space, src_space, init_scale=config.init_scale, random_state=rng)
    return p, q


def _check_finite(losses, grads, models):
    ok = all(np.isfinite(v) for v in losses) and all(np.all(np.isfinite(g)) for g in grads)
    if not ok:
        raise TrainingDivergedError("non-finite loss or gradient", checkpoint=tuple(m.copy() for m in models))


def _mean_grad(model, src, dst, weights=None):
    if len(src) == 0:
        return np.zeros_like(model.logits)
    return model.grad_pairs(src, dst, weights) / len(src)


class _Evaluator:
    """Checkpoint metrics: validation losses, exact objectives, and test accuracy."""

    def __init__(self, corpora, gt, config, space_x, space_y):
        self.config = config
        self.gt = gt
        valid = corpora.valid or corpora.parallel
        self.vx = _indices(space_x, [s for s, _ in valid])
        self.vy = _indices(space_y, [t for _, t in valid])
        self.tx = _indices(space_x, [s for s, _ in corpora.test])
        self.ty = _indices(space_y, [t for _, t in corpora.test])
        if gt is not None:
            self.prior_q, self.prior_p = gt.prior_q.probs, gt.prior_p.probs
        else:
            self.prior_q = _empirical(space_x, corpora.mono_x)
            self.prior_p = _empirical(space_y, corpora.mono_y)

    def valid_score(self, p, q) -> float:
        return -sum(self.sup_losses(p, q))

    def sup_losses(self, p, q):
        return (-float(np.mean(p.log_prob_pairs(self.vx, self.vy))),
                -float(np.mean(q.log_prob_pairs(self.vy, self.vx))))

    def metrics(self, p, q) -> dict:
        sxy, syx = self.sup_losses(p, q)
        out = {"sup_loss_xy": sxy, "sup_loss_yx": syx}
        if self.prior_q is not None and self.prior_p is not None:
            lp, lq = p.log_prob_matrix(), q.log_prob_matrix()
            pr, qr = np.exp(lp), np.exp(lq)
            j1 = float(np.sum(self.prior_p[:, None] * qr * lp.T))
            j2 = float(np.sum(self.prior_q[:, None] * pr * lq.T))
            out.update(exact_rec_yxy=-j1, exact_rec_xyx=-j2, j_dual=j1 + j2,
                       mi_xy=mutual_information_rows(pr, self.prior_q),
                       mi_yx=mutual_information_rows(qr, self.prior_p),
                       marginal_kl_xy=kl(self.prior_q @ pr, self.prior_p),
                       marginal_kl_yx=kl(self.prior_p @ qr, self.prior_q))
        if len(self.tx):
            out["token_acc_xy"] = _token_acc(p, self.tx, self.ty, self.config.eval_beam)
            out["token_acc_yx"] = _token_acc(q, self.ty, self.tx, self.config.eval_beam)
        return out


def _empirical(space, sentences):
    if not len(sentences):
        return None
    return np.bincount(space.indices(sentences), minlength=len(space)) / len(sentences)


def _token_acc(model, src, ref, beam) -> float:
    from .synth import token_accuracy

    hyp = model.decode_indices(src, "beam", beam_size=beam)[0]
    ds = model.dst_space
    return token_accuracy([ds.sentence(i) for i in hyp], [ds.sentence(i) for i in ref])


def _fit_loop(p, q, grad_fn, lr, config, evaluator, curves, phase, step0=0):
    """Adam ascent with checkpointed plateau decay, best-checkpoint reload and early stop.

    ``grad_fn()`` returns ``(g_theta, g_phi, batch_losses)`` where
    ``batch_losses`` maps curve keys to batch values. Returns the final step.
    """
    opt_p, opt_q = Adam(lr), Adam(lr)
    sched = PlateauSchedule(lr, config.lr_decay, config.patience_checkpoints, config.max_decays)
    best = (p.logits.copy(), q.logits.copy())
    acc: dict = {}
    step = step0
    for u in range(1, config.max_updates + 1):
        g_p, g_q, losses = grad_fn()
        _check_finite(list(losses.values()), (g_p, g_q), (p, q))
        opt_p.step(p.logits, g_p)
        opt_q.step(q.logits, g_q)
        for k, v in losses.items():
            acc.setdefault(k, []).append(v)
        step += 1
        if u % config.checkpoint_every and u != config.max_updates:
            continue
        values = {k: float(np.mean(v)) for k, v in acc.items()}
        acc = {}
        score = evaluator.valid_score(p, q)
        if not np.isfinite(score):
            raise TrainingDivergedError("non-finite validation loss", checkpoint=(p.copy(), q.copy()))
        values.update(evaluator.metrics(p, q))
        values["lr"] = sched.lr
        curves.append(CurveRecord(step, config.seed, config.label, phase, values))
        action = sched.update(score)
        if action == "improved":
            best = (p.logits.copy(), q.logits.copy())
        elif action in ("decay", "stop"):
            p.logits[...] = best[0]
            q.logits[...] = best[1]
            if action == "stop":
                break
            opt_p, opt_q = Adam(sched.lr), Adam(sched.lr)
    p.logits[...] = best[0]
    q.logits[...] = best[1]
    return step


def _sup_batch(px, py, b, rng):
    if len(px) == 0:
        return px, py
    i = rng.integers(0, len(px), size=b)
    return px[i], py[i]


def _combine(parts):
    """Count-weighted average of ``(mean_grad, count)`` parts."""
    total = sum(n for _, n in parts)
    if total == 0:
        return parts[0][0] * 0.0
    return sum(g * (n / total) for g, n in parts)


# -- supervised pretraining ----------------------------------------------------------


def pretrain_supervised(models, corpora, config: TrainConfig, gt=None) -> RunResult:
    """Fit both directions on the parallel pairs (in place) and return the curves."""
    if not corpora.parallel:
        raise ValueError("pretraining needs a non-empty parallel corpus")
    t0 = time.perf_counter()
    p, q = models
    px = _indices(p.src_space, [s for s, _ in corpora.parallel])
    py = _indices(p.dst_space, [t for _, t in corpora.parallel])
    (rng,) = _streams(config.seed, 1)
    evaluator = _Evaluator(corpora, gt, config, p.src_space, p.dst_space)

    def grad_fn():
        bx, by = _sup_batch(px, py, config.batch_size, rng)
        lp = p.log_prob_pairs(bx, by)
        lq = q.log_prob_pairs(by, bx)
        return _mean_grad(p, bx, by), _mean_grad(q, by, bx), {"sup_batch": -float(lp.mean() + lq.mean())}

    curves: list = []
    _fit_loop(p, q, grad_fn, config.lr_pretrain, config, evaluator, curves, "pretrain")
    final = evaluator.metrics(p, q)
    return RunResult(curves, p, q, time.perf_counter() - t0, config.as_dict(), final)


# -- back-translation ------------------------------------------------------------


def back_translate(inference_model, mono, beam: int = 2) -> list:
    """Pair each monolingual sentence with its beam decode: ``[(decode, sentence), ...]``."""
    if len(mono) == 0:
        return []
    idx = inference_model.src_space.indices(mono)
    out = inference_model.decode_indices(idx, "beam", beam_size=beam)[0]
    ds = inference_model.dst_space
    return [(ds.sentence(j), tuple(s)) for j, s in zip(out, mono)]


def _bt_indices(model, mono_idx, beam):
    if len(mono_idx) == 0:
        return mono_idx
    return model.decode_indices(mono_idx, "beam", beam_size=beam)[0]


# -- batch-level updates ---------------------------------------------------------------


@dataclass
class BatchStep:
    g_theta: np.ndarray
    g_phi: np.ndarray
    loss_yxy: float
    loss_xyx: float
    n_y: int
    n_x: int


def _floored_mean_loss(lp, floor):
    if len(lp) == 0:
        return float("nan")
    return -float(np.mean(np.maximum(lp, floor)))


def ibt_batch_gradients(p_theta, q_phi, batch_y, batch_x, config: TrainConfig, rng=None,
                        decode_mode: str = "beam") -> BatchStep:
    """Stop-gradient back-translation gradients for one monolingual batch pair.

    ``x~ = decode(q_phi, y)`` trains ``p_theta`` on ``(x~, y)``; ``y~ = decode(p_theta, x)``
    trains ``q_phi`` on ``(y~, x)``. Both decodes use the parameters before the update.
    """
    rng = check_rng(rng)
    y = _indices(p_theta.dst_space, batch_y)
    x = _indices(p_theta.src_space, batch_x)
    xt = q_phi.decode_indices(y, decode_mode, beam_size=config.inference_beam, rng=rng)[0] if len(y) else y
    yt = p_theta.decode_indices(x, decode_mode, beam_size=config.inference_beam, rng=rng)[0] if len(x) else x
    g_t = _mean_grad(p_theta, xt, y)
    g_f = _mean_grad(q_phi, yt, x)
    loss1 = _floored_mean_loss(p_theta.log_prob_pairs(xt, y), config.logprob_floor) if len(y) else float("nan")
    loss2 = _floored_mean_loss(q_phi.log_prob_pairs(yt, x), config.logprob_floor) if len(x) else float("nan")
    return BatchStep(g_t, g_f, loss1, loss2, len(y), len(x))


def _apply(p_theta, q_phi, step: BatchStep, sup_pairs, config, opt_theta, opt_phi):
    opt_theta = opt_theta or Adam(config.lr_finetune)
    opt_phi = opt_phi or Adam(config.lr_finetune)
    g_t, g_f = step.g_theta, step.g_phi
    if sup_pairs is not None and len(sup_pairs):
        sx = _indices(p_theta.src_space, [s for s, _ in sup_pairs])
        sy = _indices(p_theta.dst_space, [t for _, t in sup_pairs])
        g_t = _combine([(g_t, step.n_y), (_mean_grad(p_theta, sx, sy), len(sx))])
        g_f = _combine([(g_f, step.n_x), (_mean_grad(q_phi, sy, sx), len(sx))])
    # J1 half-step touches theta only; J2 half-step touches phi only
    if step.n_y or sup_pairs:
        opt_theta.step(p_theta.logits, g_t)
    if step.n_x or sup_pairs:
        opt_phi.step(q_phi.logits, g_f)
    return step.loss_yxy, step.loss_xyx


def ibt_batch_update(p_theta, q_phi, batch_y, batch_x, config: TrainConfig, *, sup_pairs=None,
                     opt_theta=None, opt_phi=None, rng=None, decode_mode="beam"):
    """One batch-level IBT update in place; returns the two batch reconstruction losses."""
    step = ibt_batch_gradients(p_theta, q_phi, batch_y, batch_x, config, rng, decode_mode)
    return _apply(p_theta, q_phi, step, sup_pairs, config, opt_theta, opt_phi)


def _lm_scores(lm, space):
    if lm is None:
        return np.zeros(len(space))
    if isinstance(lm, BigramLanguageModel):
        return lm.log_prob_space(space)
    return np.asarray(lm, dtype=np.float64)


def _policy_half(forward, inference, mono, lm_scores, alpha, config, rng, zero_inference):
    """One direction of dual learning.

    ``inference`` proposes a hidden sentence ``h`` for each ``mono`` sentence,
    ``forward`` reconstructs ``mono`` from ``h``. Returns the gradient for
    ``forward``, the policy gradient for ``inference``, the loss and the count.
    """
    n = len(mono)
    if n == 0:
        return np.zeros_like(forward.logits), np.zeros_like(inference.logits), float("nan")
    if config.sample_mode == "sample":
        src = mono
        hid = inference.sample_indices(mono, rng=rng)
        w = np.ones(n)
    else:
        k = min(config.inference_beam, len(inference.dst_space))
        lp = inference.log_prob_matrix(mono)
        top = np.argsort(-lp, axis=1, kind="stable")[:, :k]
        lw = np.take_along_axis(lp, top, axis=1)
        w = np.exp(lw - logsumexp(lw, axis=1, keepdims=True)).ravel()
        src = np.repeat(mono, k)
        hid = top.ravel()
    rec = forward.log_prob_pairs(hid, src)
    reward = lm_augmented_reward(np.maximum(rec, config.logprob_floor), lm_scores[hid], alpha)
    baseline = float(np.sum(w * reward) / n)
    g_fwd = forward.grad_pairs(hid, src, w) / n
    if zero_inference:
        g_inf = np.zeros_like(inference.logits)
    else:
        g_inf = inference.grad_pairs(src, hid, w * (reward - baseline)) / n
    loss = -float(np.sum(w * np.maximum(rec, config.logprob_floor)) / n)
    return g_fwd, g_inf, loss


def dual_learning_gradients(p_theta, q_phi, batch_y, batch_x, lms, config: TrainConfig, rng=None,
                            alpha_lm=None, zero_inference=False) -> BatchStep:
    """Policy-gradient dual learning gradients for one monolingual batch pair.

    ``lms`` is ``(lm_x, lm_y)``: fitted language models, precomputed
    log-probability vectors over the spaces, or ``None`` when ``alpha_lm`` is 0.
    """
    rng = check_rng(rng)
    alpha = config.argument if alpha_lm is None else alpha_lm
    alpha = 0.0 if alpha is None else float(alpha)
    lm_x, lm_y = lms if lms is not None else (None, None)
    if alpha > 0 and (lm_x is None or lm_y is None):
        raise ValueError("dual learning with alpha_lm > 0 needs both language models")
    y = _indices(p_theta.dst_space, batch_y)
    x = _indices(p_theta.src_space, batch_x)
    sx = _lm_scores(lm_x, p_theta.src_space)
    sy = _lm_scores(lm_y, p_theta.dst_space)
    # y -> x~ -> y: theta reconstructs, phi is the policy
    g_t1, g_f1, loss1 = _policy_half(p_theta, q_phi, y, sx, alpha, config, rng, zero_inference)
    # x -> y~ -> x: phi reconstructs, theta is the policy
    g_f2, g_t2, loss2 = _policy_half(q_phi, p_theta, x, sy, alpha, config, rng, zero_inference)
    return BatchStep(g_t1 + g_t2, g_f1 + g_f2, loss1, loss2, len(y), len(x))


def dual_learning_update(p_theta, q_phi, batch_y, batch_x, lms, config: TrainConfig, *, sup_pairs=None,
                         opt_theta=None, opt_phi=None, rng=None):
    """One dual learning update in place; returns the two batch reconstruction losses."""
    step = dual_learning_gradients(p_theta, q_phi, batch_y, batch_x, lms, config, rng)
    return _apply(p_theta, q_phi, step, sup_pairs, config, opt_theta, opt_phi)


# -- exact dual ascent ---------------------------------------------------------------


def exact_dual_objective(p_logits, q_logits, prior_q, prior_p, pairs=None, constraint=None, weight=0.0):
    """Value and gradients of ``J_dual + J_s(theta) + J_s(phi) - w * penalty`` (tabular)."""
    val, g_t, g_f = dual_objective_grads(p_logits, q_logits, prior_q, prior_p)
    if pairs is not None and len(pairs[0]):
        sx, sy = pairs
        v1, h1 = supervised_grad(p_logits, sx, sy)
        v2, h2 = supervised_grad(q_logits, sy, sx)
        val += v1 + v2
        g_t, g_f = g_t + h1, g_f + h2
    if constraint is not None and weight > 0:
        for logits, prior, g in ((p_logits, prior_q, g_t), (q_logits, prior_p, g_f)):
            mi, gm = mutual_information_grad(logits, prior)
            val -= weight * mi_penalty(mi, constraint)
            coef = 2.0 * (max(0.0, mi - constraint.i_max) - max(0.0, constraint.i_min - mi))
            g -= weight * coef * gm
    return val, g_t, g_f


def exact_dual_ascent(p_theta, q_phi, prior_q, prior_p, *, pairs=None, constraint=None, weight=0.0,
                      steps=5000, step_size=1.0, grow=1.5, tol=1e-12, callback=None):
    """Monotone gradient ascent on the exact objective of tabular models (in place).

    A step that lowers the objective is retried at half the size; accepted
    steps grow the size by ``grow``. Returns the per-step objective values.
    """
    if not isinstance(p_theta, TabularModel) or not isinstance(q_phi, TabularModel):
        raise TypeError("exact dual ascent needs tabular models")
    pq = prior_q.probs if isinstance(prior_q, Categorical) else np.asarray(prior_q)
    pp = prior_p.probs if isinstance(prior_p, Categorical) else np.asarray(prior_p)

    def f(a, b):
        return exact_dual_objective(a, b, pq, pp, pairs, constraint, weight)

    val, g_t, g_f = f(p_theta.logits, q_phi.logits)
    history = [val]
    eta = step_size
    for it in range(steps):
        gn = math.sqrt(float(np.sum(g_t * g_t) + np.sum(g_f * g_f)))
        if gn < tol:
            break
        while True:
            a, b = p_theta.logits + eta * g_t, q_phi.logits + eta * g_f
            new, n_t, n_f = f(a, b)
            if new >= val or eta < 1e-14:
                break
            eta *= 0.5
        if new < val:
            break
        p_theta.logits, q_phi.logits = a, b
        val, g_t, g_f = new, n_t, n_f
        eta *= grow
        history.append(val)
        if callback is not None:
            callback(it + 1, p_theta, q_phi, val)
    return history


# -- strategy dispatch -----------------------------------------------------------------


def _finetune(p, q, corpora, config, gt, evaluator, curves, step0, kind, arg, lms):
    px = _indices(p.src_space, [s for s, _ in corpora.parallel])
    py = _indices(p.dst_space, [t for _, t in corpora.parallel])
    mx = _indices(p.src_space, corpora.mono_x)
    my = _indices(p.dst_space, corpora.mono_y)
    rng_sup, rng_mono, rng_dec = _streams(config.seed, 3)
    b = config.batch_size
    nm = int(round(config.mix_ratio * b))

    if kind == "supervised" or (len(mx) == 0 and len(my) == 0):
        def grad_fn():
            bx, by = _sup_batch(px, py, b, rng_sup)
            return _mean_grad(p, bx, by), _mean_grad(q, by, bx), {}

        return _fit_loop(p, q, grad_fn, config.lr_finetune, config, evaluator, curves, "finetune", step0)

    if kind in ("BT", "IBT-epoch"):
        iterations = 1 if kind == "BT" else arg
        step = step0
        for it in range(iterations):
            # both corpora are back-translated by the models of the previous iteration
            xt = _bt_indices(q, my, config.inference_beam)
            yt = _bt_indices(p, mx, config.inference_beam)

            def grad_fn(xt=xt, yt=yt):
                bx, by = _sup_batch(px, py, b, rng_sup)
                parts_t = [(_mean_grad(p, bx, by), len(bx))]
                parts_f = [(_mean_grad(q, by, bx), len(bx))]
                if len(my):
                    i = rng_mono.integers(0, len(my), size=nm)
                    parts_t.append((_mean_grad(p, xt[i], my[i]), nm))
                if len(mx):
                    i = rng_mono.integers(0, len(mx), size=nm)
                    parts_f.append((_mean_grad(q, yt[i], mx[i]), nm))
                return _combine(parts_t), _combine(parts_f), {}

            step = _fit_loop(p, q, grad_fn, config.lr_finetune, config, evaluator, curves, f"iteration-{it + 1}", step)
        return step

    if kind in ("IBT-batch", "DualLearning"):
        def grad_fn():
            bx, by = _sup_batch(px, py, b, rng_sup)
            y = my[rng_mono.integers(0, len(my), size=nm)] if len(my) else my
            x = mx[rng_mono.integers(0, len(mx), size=nm)] if len(mx) else mx
            if kind == "IBT-batch":
                st = ibt_batch_gradients(p, q, y, x, config, rng_dec)
            else:
                st = dual_learning_gradients(p, q, y, x, lms, config, rng_dec, alpha_lm=arg)
            g_t = _combine([(st.g_theta, st.n_y), (_mean_grad(p, bx, by), len(bx))])
            g_f = _combine([(st.g_phi, st.n_x), (_mean_grad(q, by, bx), len(bx))])
            losses = {}
            if st.n_y:
                losses["dual_rec_yxy"] = st.loss_yxy
            if st.n_x:
                losses["dual_rec_xyx"] = st.loss_xyx
            return g_t, g_f, losses

        return _fit_loop(p, q, grad_fn, config.lr_finetune, config, evaluator, curves, "finetune", step0)
    raise ValueError(f"unknown strategy {kind!r}")


def fit_language_models(corpora, space_x, space_y, smoothing=0.1):
    """Bigram LMs on each monolingual side, returned as log-probability vectors over the spaces."""
    lm_x = BigramLanguageModel(space_x.alphabet, smoothing).fit(corpora.mono_x)
    lm_y = BigramLanguageModel(space_y.alphabet, smoothing).fit(corpora.mono_y)
    return lm_x.log_prob_space(space_x), lm_y.log_prob_space(space_y)


def run_strategy(corpora, config: TrainConfig, *, gt=None, spaces=None, pretrained=None) -> RunResult:
    """Train with ``config.strategy`` and return curves and final models.

    ``pretrained`` is an optional ``RunResult`` (or model pair) from
    :func:`pretrain_supervised`; it is copied, never modified. Without it the
    models are pretrained first. ``spaces`` defaults to the ground truth's.
    """
    t0 = time.perf_counter()
    kind, arg = parse_strategy(config.strategy)
    if spaces is None:
        if gt is None:
            raise ValueError("pass either gt or spaces=(src_space, dst_space)")
        spaces = (gt.src_space, gt.dst_space)
    space_x, space_y = spaces
    evaluator = _Evaluator(corpora, gt, config, space_x, space_y)
    curves: list = []

    if kind == "ExactDualAscent":
        if evaluator.prior_q is None or evaluator.prior_p is None:
            raise ValueError("exact dual ascent needs priors (ground truth or monolingual data)")
        p = TabularModel(space_x, space_y)
        q = TabularModel(space_y, space_x)
        pairs = None
        if corpora.parallel:
            pairs = (_indices(space_x, [s for s, _ in corpora.parallel]),
                     _indices(space_y, [t for _, t in corpora.parallel]))
        c = MIConstraint(*config.mi_constraint) if config.mi_constraint else None

        def cb(it, pm, qm, val):
            if it % config.checkpoint_every == 0:
                values = evaluator.metrics(pm, qm)
                values["objective"] = val
                curves.append(CurveRecord(it, config.seed, config.label, "exact", values))

        exact_dual_ascent(p, q, evaluator.prior_q, evaluator.prior_p, pairs=pairs, constraint=c,
                          weight=config.mi_penalty_weight, steps=config.max_updates, callback=cb)
        last = curves[-1].step if curves else 0
        values = evaluator.metrics(p, q)
        curves.append(CurveRecord(last + 1, config.seed, config.label, "exact", values))
        return RunResult(curves, p, q, time.perf_counter() - t0, config.as_dict(), values)

    if pretrained is None:
        p, q = make_models(space_x, space_y, config)
        pre = pretrain_supervised((p, q), corpora, config, gt)
        curves.extend(replace(r, strategy=config.label) for r in pre.curves)
    else:
        src = pretrained if isinstance(pretrained, tuple) else (pretrained.p_theta, pretrained.q_phi)
        p, q = src[0].copy(), src[1].copy()
        if isinstance(pretrained, RunResult):
            curves.extend(replace(r, strategy=config.label, values=dict(r.values)) for r in pretrained.curves)
    step0 = curves[-1].step if curves else 0

    lms = None
    if kind == "DualLearning" and arg and arg > 0:
        lms = fit_language_models(corpora, space_x, space_y, config.lm_smoothing)
    _finetune(p, q, corpora, config, gt, evaluator, curves, step0, kind, arg, lms)
    final = evaluator.metrics(p, q)
    return RunResult(curves, p, q, time.perf_counter() - t0, config.as_dict(), final)
