"""Monte Carlo mutual information of a translation model, with corpus smoothing by perturbation.

The estimator uses ``I = E_{x~q} KL(p(.|x) || p) - KL(p_model || p)``, which holds
for any reference ``p`` with full support on the model's outputs. The two
terms are estimated from independent sample sets.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_probability, check_rng
from .space import Categorical


@dataclass(frozen=True)
class PerturbationParams:
    variants_per_source: int = 20
    drop_prob: float = 0.1
    max_permute_distance: int = 3
    seed: int = 0

    def __post_init__(self):
        check_probability(self.drop_prob, "drop_prob")
        if self.max_permute_distance < 0:
            raise ValueError("max_permute_distance must be >= 0")
        if self.variants_per_source < 1:
            raise ValueError("variants_per_source must be >= 1")


@dataclass(frozen=True)
class MIEstimate:
    i_hat: float
    normalized: float
    range_low: float
    range_high: float
    n_samples: int
    corpus_size: int
    perturbed_size: int
    floor: float
    floor_rate: float
    term_conditional: float
    term_marginal: float
    mode: str
    seed: int

    @property
    def in_range(self) -> bool:
        return self.range_low <= self.normalized <= self.range_high

    def as_record(self) -> dict:
        return asdict(self)


def _perturb_one(sentence, params, rng):
    s = [c for c in sentence if rng.random() >= params.drop_prob]
    d = params.max_permute_distance
    n = len(s)
    if d > 0:
        for i in range(n):
            j = int(rng.integers(max(0, i - d), min(n - 1, i + d) + 1))
            s[i], s[j] = s[j], s[i]
    return tuple(s) if s else tuple(sentence)


def perturb_corpus(sources, params: PerturbationParams = PerturbationParams()) -> list:
    """``variants_per_source`` noisy copies of each source, in source order.

    Symbols are dropped independently, then each position (left to right)
    swaps with a uniformly chosen position within ``max_permute_distance``.
    """
    if len(sources) == 0:
        raise ValueError("cannot perturb an empty corpus")
    rng = np.random.default_rng(params.seed)
    return [_perturb_one(tuple(s), params, rng) for s in sources for _ in range(params.variants_per_source)]


class CorpusPerturber(TransformerMixin, BaseEstimator):
    """Transformer form of :func:`perturb_corpus`."""

    def __init__(self, variants_per_source=20, drop_prob=0.1, max_permute_distance=3, seed=0):
        self.variants_per_source = variants_per_source
        self.drop_prob = drop_prob
        self.max_permute_distance = max_permute_distance
        self.seed = seed

    def fit(self, X, y=None):
        self.params_ = PerturbationParams(
            self.variants_per_source, self.drop_prob, self.max_permute_distance, self.seed
        )
        return self

    def transform(self, X):
        if getattr(self, "params_", None) is None:
            self.fit(X)
        return perturb_corpus(X, self.params_)


def _as_distribution(d, space, name):
    """Probability vector on ``space`` plus the corpus size it came from."""
    if isinstance(d, Categorical):
        if d.space != space:
            raise ValueError(f"{name} lives on a different space than the model")
        return d.probs, None
    idx = space.indices(d) if len(d) else None
    if idx is None:
        raise ValueError(f"{name} must be non-empty")
    return np.bincount(idx, minlength=len(space)) / len(idx), len(idx)


def _draw(probs, n, rng):
    cdf = np.cumsum(probs)
    return np.minimum(np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right"), len(cdf) - 1)


def estimate_mi(
    model,
    q_samples,
    p_dist,
    n_samples: int = 100_000,
    seed=0,
    *,
    mode: str = "sample",
    beam_size: int = 5,
    corpus_size=None,
    perturbed_size=None,
    floor=None,
) -> MIEstimate:
    """Monte Carlo MI of ``model`` with sources drawn from ``q_samples``.

    ``q_samples`` and ``p_dist`` are sentence lists (empirical distributions)
    or :class:`Categorical` objects. ``mode="beam"`` replaces ancestral
    sampling of ``y`` by the beam-``beam_size`` decode. Targets with zero
    reference probability get ``floor`` (default ``1 / (10 |p corpus|)``) and are
    counted in ``floor_rate``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if mode not in ("sample", "beam"):
        raise ValueError(f"mode must be 'sample' or 'beam', got {mode!r}")
    rng = check_rng(seed)
    q, n_q = _as_distribution(q_samples, model.src_space, "q_samples")
    p, n_p = _as_distribution(p_dist, model.dst_space, "p_dist")
    corpus_size = corpus_size or n_q or int(np.count_nonzero(q))
    perturbed_size = perturbed_size or n_p or int(np.count_nonzero(p))
    if floor is None:
        floor = 1.0 / (10.0 * perturbed_size)
    with np.errstate(divide="ignore"):
        log_p = np.log(np.where(p > 0, p, floor))
    floored = p <= 0

    def pairs(n):
        xs = _draw(q, n, rng)
        if mode == "sample":
            ys = model.sample_indices(xs, rng=rng)
        else:
            ux, inv = np.unique(xs, return_inverse=True)
            ys = model.decode_indices(ux, "beam", beam_size=beam_size)[0][inv.ravel()]
        return xs, ys

    # term 1: E_x KL(p(.|x) || p), pointwise log-ratio on (x, y) samples
    xs, ys = pairs(n_samples)
    t1 = float(np.mean(model.log_prob_pairs(xs, ys) - log_p[ys]))
    # term 2 on an independent draw; the model marginal is a Monte Carlo
    # average over the first draw's sources
    ux, counts = np.unique(xs, return_counts=True)
    logw = np.log(counts / counts.sum())
    xs2, ys2 = pairs(n_samples)
    uy, inv = np.unique(ys2, return_inverse=True)
    log_marg = logsumexp(model.log_prob_matrix(ux)[:, uy] + logw[:, None], axis=0)
    t2 = float(np.mean(log_marg[inv.ravel()] - log_p[ys2]))
    floor_rate = float((floored[ys].sum() + floored[ys2].sum()) / (2 * n_samples))

    i_hat = t1 - t2
    log_d = math.log(corpus_size)
    return MIEstimate(
        i_hat=i_hat,
        normalized=i_hat - log_d,
        range_low=-log_d,
        range_high=math.log(perturbed_size / corpus_size),
        n_samples=int(n_samples),
        corpus_size=int(corpus_size),
        perturbed_size=int(perturbed_size),
        floor=float(floor),
        floor_rate=floor_rate,
        term_conditional=t1,
        term_marginal=t2,
        mode=mode,
        seed=int(seed) if not isinstance(seed, np.random.Generator) else -1,
    )
