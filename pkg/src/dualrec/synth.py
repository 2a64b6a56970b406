"""Noisy substitution-cipher translation tasks with exactly known distributions."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ._validation import check_probability, check_rng
from .models import model_marginal
from .space import (
    DEFAULT_SPACE_CAP,
    Categorical,
    ConditionalTable,
    JointTable,
    SentenceSpace,
    enumerate_space,
    kl,
    marginal_and_posterior,
)


@dataclass(frozen=True)
class TaskSpec:
    """A length-preserving noisy cipher between two equal-size alphabets.

    Each source symbol ``a`` maps to ``dst_alphabet[permutation[a]]`` with
    probability ``1 - noise_eps`` and to each other target symbol with
    probability ``noise_eps / (|A| - 1)``. Source sentences draw a length from
    ``length_dist`` and i.i.d. symbols from ``symbol_probs``.
    """

    src_alphabet: tuple
    dst_alphabet: tuple
    permutation: tuple
    noise_eps: float
    length_dist: tuple
    symbol_probs: Optional[tuple] = None
    shifted_length_dist: Optional[tuple] = None
    seed: int = 0

    def __post_init__(self):
        a = len(self.src_alphabet)
        if len(self.dst_alphabet) != a:
            raise ValueError("source and target alphabets must have equal size")
        if sorted(self.permutation) != list(range(a)):
            raise ValueError("permutation must be a bijection of alphabet positions")
        check_probability(self.noise_eps, "noise_eps")
        for name in ("length_dist", "shifted_length_dist", "symbol_probs"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v, dtype=np.float64)
            if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-12:
                raise ValueError(f"{name} must be a probability vector")
        if self.symbol_probs is not None and len(self.symbol_probs) != a:
            raise ValueError("symbol_probs must have one entry per source symbol")
        if self.shifted_length_dist is not None and len(self.shifted_length_dist) != len(self.length_dist):
            raise ValueError("shifted_length_dist must cover the same lengths as length_dist")

    @property
    def max_len(self) -> int:
        return len(self.length_dist)

    @property
    def symbols(self) -> np.ndarray:
        a = len(self.src_alphabet)
        return np.full(a, 1.0 / a) if self.symbol_probs is None else np.asarray(self.symbol_probs)

    def channel(self) -> np.ndarray:
        """Per-symbol channel matrix ``C[a, b] = p(dst b | src a)``."""
        a = len(self.src_alphabet)
        off = self.noise_eps / (a - 1) if a > 1 else 0.0
        c = np.full((a, a), off)
        c[np.arange(a), list(self.permutation)] = 1.0 - self.noise_eps if a > 1 else 1.0
        return c


def cipher_task(
    n_symbols=6,
    max_len=4,
    noise_eps=0.1,
    length_dist=None,
    symbol_probs="zipf",
    shifted_length_dist=None,
    seed=0,
) -> TaskSpec:
    """Task with lowercase source and uppercase target letters and a seeded permutation."""
    rng = np.random.default_rng(seed)
    src = tuple("abcdefghijklmnopqrstuvwxyz"[:n_symbols])
    dst = tuple(s.upper() for s in src)
    perm = tuple(int(i) for i in rng.permutation(n_symbols))
    if length_dist is None:
        length_dist = np.full(max_len, 1.0 / max_len)
    if isinstance(symbol_probs, str):
        if symbol_probs != "zipf":
            raise ValueError(f"unknown symbol distribution {symbol_probs!r}")
        w = 1.0 / np.arange(1, n_symbols + 1)
        symbol_probs = w / w.sum()
    norm = lambda v: None if v is None else tuple(float(x) for x in np.asarray(v) / np.sum(v))
    return TaskSpec(
        src, dst, perm, float(noise_eps), norm(length_dist), norm(symbol_probs), norm(shifted_length_dist), seed
    )


PRESETS = {
    # parallel, mono per side, valid, test
    "low-resource": dict(n_parallel=200, n_mono_x=2000, n_mono_y=2000, n_valid=200, n_test=300),
    "high-resource": dict(n_parallel=2000, n_mono_x=2000, n_mono_y=2000, n_valid=200, n_test=300),
    "cross-domain": dict(n_parallel=2000, n_mono_x=1000, n_mono_y=1000, n_valid=200, n_test=300),
}


def preset_task(name: str, seed: int = 0) -> TaskSpec:
    """Desk-scale task for one of the named data regimes."""
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    if name == "cross-domain":
        return cipher_task(
            length_dist=[0.4, 0.3, 0.2, 0.1], shifted_length_dist=[0.1, 0.2, 0.3, 0.4], seed=seed
        )
    return cipher_task(seed=seed)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    spec: TaskSpec
    src_space: SentenceSpace
    dst_space: SentenceSpace
    joint: JointTable
    true_conditional: ConditionalTable
    true_inverse: ConditionalTable
    prior_q: Categorical
    prior_p: Categorical
    shifted: Optional["GroundTruth"] = field(default=None, repr=False)

    def reversed(self) -> "GroundTruth":
        """The same task seen from the target side."""
        joint = JointTable(self.dst_space, self.src_space, self.joint.matrix.T)
        return GroundTruth(
            self.spec,
            self.dst_space,
            self.src_space,
            joint,
            self.true_inverse,
            self.true_conditional,
            self.prior_p,
            self.prior_q,
            None if self.shifted is None else self.shifted.reversed(),
        )

    def conditional_entropy(self) -> float:
        """``H(Y | X)`` of the channel under ``prior_q``."""
        rows = self.true_conditional.rows
        with np.errstate(divide="ignore", invalid="ignore"):
            h = -np.where(rows > 0, rows * np.log(rows), 0.0).sum(axis=1)
        return float(self.prior_q.probs @ h)


def _source_prior(spec: TaskSpec, space: SentenceSpace, length_dist) -> np.ndarray:
    lengths = space.lengths
    sym = np.append(spec.symbols, 1.0)  # pad contributes factor 1
    probs = np.prod(sym[space.codes], axis=1) * np.asarray(length_dist)[lengths - 1]
    return probs / probs.sum()


def _channel_table(spec: TaskSpec, src_space, dst_space) -> np.ndarray:
    c = spec.channel()
    n_src, n_dst = len(src_space), len(dst_space)
    table = np.zeros((n_src, n_dst))
    for length in range(1, spec.max_len + 1):
        xs = np.flatnonzero(src_space.lengths == length)
        ys = np.flatnonzero(dst_space.lengths == length)
        block = np.ones((1, 1))
        for _ in range(length):
            block = np.kron(block, c)
        table[np.ix_(xs, ys)] = block
    return table


def build_ground_truth(spec: TaskSpec, cap: int = DEFAULT_SPACE_CAP) -> GroundTruth:
    """Exact joint, channel, posterior and priors of a cipher task."""
    src_space = enumerate_space(spec.src_alphabet, spec.max_len, cap=cap)
    dst_space = enumerate_space(spec.dst_alphabet, spec.max_len, cap=cap)
    table = _channel_table(spec, src_space, dst_space)
    cond = ConditionalTable(src_space, dst_space, table)

    def assemble(length_dist):
        q = Categorical(src_space, _source_prior(spec, src_space, length_dist))
        p, inverse = marginal_and_posterior(cond, q)
        joint = JointTable(src_space, dst_space, table * q.probs[:, None])
        return q, p, inverse, joint

    q, p, inverse, joint = assemble(spec.length_dist)
    if not inverse.defined.all():
        raise ValueError("target sentences with zero probability; use a full-support length distribution")
    shifted = None
    if spec.shifted_length_dist is not None:
        qs, ps, inv_s, joint_s = assemble(spec.shifted_length_dist)
        shifted = GroundTruth(spec, src_space, dst_space, joint_s, cond, inv_s, qs, ps)
    return GroundTruth(spec, src_space, dst_space, joint, cond, inverse, q, p, shifted)


def channel_mutual_information(spec: TaskSpec) -> float:
    """Closed-form ``I(X; Y) = H(L) + E[L] * I_symbol`` for the cipher channel."""
    c = spec.channel()
    u = spec.symbols
    out = u @ c
    h_out = -np.sum(out[out > 0] * np.log(out[out > 0]))
    h_cond = -np.sum(u[:, None] * np.where(c > 0, c * np.log(np.where(c > 0, c, 1.0)), 0.0))
    ld = np.asarray(spec.length_dist)
    h_len = -np.sum(ld[ld > 0] * np.log(ld[ld > 0]))
    mean_len = float(ld @ np.arange(1, len(ld) + 1))
    return float(h_len + mean_len * (h_out - h_cond))


@dataclass(frozen=True)
class Corpora:
    parallel: list
    mono_x: list
    mono_y: list
    valid: list
    test: list

    def sizes(self) -> dict:
        return {k: len(getattr(self, k)) for k in ("parallel", "mono_x", "mono_y", "valid", "test")}


def _sample_sources(spec, gt_q, n, rng) -> np.ndarray:
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    cdf = np.cumsum(gt_q.probs)
    return np.minimum(np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right"), len(cdf) - 1)


def _apply_channel(spec, gt, src_idx, rng) -> np.ndarray:
    """Per-symbol noisy substitution of each source sentence; returns target indices."""
    codes = gt.src_space.codes[src_idx]
    lengths = gt.src_space.lengths[src_idx]
    a = len(spec.src_alphabet)
    cdf = np.cumsum(spec.channel(), axis=1)
    safe = np.minimum(codes, a - 1)
    u = rng.random(codes.shape)
    out = (cdf[safe] < u[..., None]).sum(axis=-1)
    out = np.minimum(out, a - 1)
    steps = np.arange(codes.shape[1])[None, :]
    out = np.where(steps < lengths[:, None], out, a)
    return _codes_to_index(out, lengths, a)


def _codes_to_index(codes, lengths, a) -> np.ndarray:
    off = np.zeros(codes.shape[1] + 2, dtype=np.int64)
    for length in range(1, codes.shape[1] + 1):
        off[length + 1] = off[length] + a**length
    key = np.zeros(len(codes), dtype=np.int64)
    for t in range(codes.shape[1]):
        live = t < lengths
        key = np.where(live, key * a + codes[:, t], key)
    return off[lengths] + key


def sample_corpora(
    gt: GroundTruth,
    n_parallel: int,
    n_mono_x: int,
    n_mono_y: int,
    n_valid: int,
    n_test: int,
    seed: int = 0,
) -> Corpora:
    """Parallel pairs from the joint, unaligned monolingual sets, and held-out pairs.

    Validation and test pairs have source sentences that appear in no earlier
    split. With a shifted (cross-domain) ground truth, monolingual data and the
    held-out splits come from the shifted distribution.
    """
    for name, v in [("n_parallel", n_parallel), ("n_mono_x", n_mono_x), ("n_mono_y", n_mono_y),
                    ("n_valid", n_valid), ("n_test", n_test)]:
        if v < 0:
            raise ValueError(f"{name} must be >= 0")
    rng = np.random.default_rng(seed)
    spec = gt.spec
    target = gt.shifted if gt.shifted is not None else gt
    src_sent, dst_sent = gt.src_space.sentences, gt.dst_space.sentences

    xs = _sample_sources(spec, gt.prior_q, n_parallel, rng)
    ys = _apply_channel(spec, gt, xs, rng)
    parallel = [(src_sent[i], dst_sent[j]) for i, j in zip(xs, ys)]

    mono_x = [src_sent[i] for i in _sample_sources(spec, target.prior_q, n_mono_x, rng)]
    # M_Y from p(y) through an independent pass of the channel
    ys_m = _apply_channel(spec, gt, _sample_sources(spec, target.prior_q, n_mono_y, rng), rng)
    mono_y = [dst_sent[j] for j in ys_m]

    used = set(int(i) for i in xs)
    splits = []
    for n in (n_valid, n_test):
        chosen = []
        tries = 0
        while len(chosen) < n:
            tries += 1
            if tries > 1000:
                raise ValueError("cannot draw enough held-out pairs with unseen sources")
            cand = _sample_sources(spec, target.prior_q, 4 * (n - len(chosen)) + 8, rng)
            for i in cand:
                if int(i) not in used and len(chosen) < n:
                    used.add(int(i))
                    chosen.append(int(i))
        src = np.array(chosen, dtype=np.int64)
        dst = _apply_channel(spec, gt, src, rng) if n else src
        splits.append([(src_sent[i], dst_sent[j]) for i, j in zip(src, dst)])
    return Corpora(parallel, mono_x, mono_y, splits[0], splits[1])


def sample_preset(name: str, seed: int = 0, task_seed: int = 0, **overrides):
    """Ground truth and corpora for a named preset."""
    sizes = dict(PRESETS[name])
    sizes.update(overrides)
    gt = build_ground_truth(preset_task(name, seed=task_seed))
    return gt, sample_corpora(gt, seed=seed, **sizes)


# -- evaluation --------------------------------------------------------------------


def token_accuracy(hyps, refs) -> float:
    """Position-wise matches over the longer of each hypothesis/reference pair."""
    hits = total = 0
    for h, r in zip(hyps, refs):
        hits += sum(a == b for a, b in zip(h, r))
        total += max(len(h), len(r))
    return hits / total if total else 0.0


def corpus_bleu(hyps, refs, max_order=4) -> float:
    """Corpus n-gram overlap (geometric mean of add-one smoothed precisions, brevity penalty)."""
    matches = np.zeros(max_order)
    totals = np.zeros(max_order)
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_order + 1):
            hc = Counter(tuple(h[i : i + n]) for i in range(len(h) - n + 1))
            rc = Counter(tuple(r[i : i + n]) for i in range(len(r) - n + 1))
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0:
        return 0.0
    log_prec = np.log((matches + 1.0) / (totals + 1.0)).mean()
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return float(100.0 * bp * math.exp(log_prec))


def oracle_eval(model, gt: GroundTruth, test_pairs, eval_beam: int = 5, marginal_kl: bool = True) -> dict:
    """Translation metrics of ``model`` against the task's exact ground truth.

    Returns token accuracy of beam decodes, mean cross-entropy to the true
    conditional rows of the test sources, the exact KL of the model's marginal
    (under ``gt.prior_q``) from ``gt.prior_p``, and a BLEU-like score.
    """
    src = np.array([model.src_space.index_of(s) for s, _ in test_pairs], dtype=np.int64)
    refs = [tuple(t) for _, t in test_pairs]
    out, _ = model.decode_indices(src, "beam", beam_size=eval_beam)
    hyps = [model.dst_space.sentence(j) for j in out]
    logp = model.log_prob_matrix(src)
    true_rows = gt.true_conditional.rows[src]
    with np.errstate(invalid="ignore"):
        ce = -np.sum(np.where(true_rows > 0, true_rows * logp, 0.0), axis=1)
    record = {
        "token_accuracy": token_accuracy(hyps, refs),
        "cross_entropy": float(ce.mean()),
        "bleu": corpus_bleu(hyps, refs),
    }
    if marginal_kl:
        record["marginal_kl"] = kl(model_marginal(model, gt.prior_q), gt.prior_p)
    return record
