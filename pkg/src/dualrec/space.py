"""Exact probability machinery over finite, enumerated sentence spaces.

Every distribution here is a dense vector indexed by a :class:`SentenceSpace`,
so entropies, divergences, marginals, posteriors and mutual information are
computed by direct summation. All information quantities are in nats.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Sequence

import numpy as np

DEFAULT_SPACE_CAP = 100_000
NORMALIZATION_TOL = 1e-12

Sentence = tuple


class SpaceSizeError(ValueError):
    """Raised when an enumeration would exceed the configured size cap."""


class DimensionError(ValueError):
    """Raised when two objects live on incompatible sentence spaces."""


@dataclass(frozen=True, eq=False)
class SentenceSpace:
    """All sequences of length 1..max_len over ``alphabet``.

    Sentences are ordered length-major, then lexicographically by alphabet
    position. ``codes`` holds the integer-coded sentences padded with
    ``len(alphabet)``.
    """

    alphabet: tuple
    max_len: int
    sentences: tuple = field(repr=False)
    index: dict = field(repr=False)
    codes: np.ndarray = field(repr=False)
    lengths: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.sentences)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SentenceSpace):
            return NotImplemented
        return self.alphabet == other.alphabet and self.max_len == other.max_len

    def __hash__(self) -> int:
        return hash((self.alphabet, self.max_len))

    @property
    def pad(self) -> int:
        return len(self.alphabet)

    def index_of(self, sentence: Sequence) -> int:
        key = tuple(sentence)
        try:
            return self.index[key]
        except KeyError:
            raise ValueError(f"sentence {key!r} is not in the space") from None

    def indices(self, sentences) -> np.ndarray:
        return np.array([self.index_of(s) for s in sentences], dtype=np.int64)

    def sentence(self, i: int) -> Sentence:
        return self.sentences[int(i)]

    def __contains__(self, sentence) -> bool:
        return tuple(sentence) in self.index


def enumerate_space(alphabet: Sequence, max_len: int, cap: int = DEFAULT_SPACE_CAP) -> SentenceSpace:
    """Enumerate every sentence of length 1..max_len over ``alphabet``."""
    alphabet = tuple(alphabet)
    if not alphabet:
        raise ValueError("alphabet must be non-empty")
    if len(set(alphabet)) != len(alphabet):
        raise ValueError("alphabet contains duplicate symbols")
    if int(max_len) < 1:
        raise ValueError("max_len must be >= 1")
    max_len = int(max_len)
    top = len(alphabet) ** max_len
    if top > cap:
        raise SpaceSizeError(
            f"|alphabet|^max_len = {top} exceeds the enumeration cap of {cap}"
        )
    sentences = []
    for length in range(1, max_len + 1):
        sentences.extend(product(alphabet, repeat=length))
    pad = len(alphabet)
    sym = {s: i for i, s in enumerate(alphabet)}
    codes = np.full((len(sentences), max_len), pad, dtype=np.int64)
    lengths = np.empty(len(sentences), dtype=np.int64)
    for n, s in enumerate(sentences):
        codes[n, : len(s)] = [sym[c] for c in s]
        lengths[n] = len(s)
    codes.flags.writeable = False
    lengths.flags.writeable = False
    index = {s: i for i, s in enumerate(sentences)}
    return SentenceSpace(alphabet, max_len, tuple(sentences), index, codes, lengths)


def _check_vector(probs: np.ndarray, what: str) -> None:
    if np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise ValueError(f"{what} has negative or non-finite entries")
    total = probs.sum()
    if abs(total - 1.0) > NORMALIZATION_TOL * max(1.0, np.sqrt(probs.size)):
        raise ValueError(f"{what} sums to {total!r}, not 1")


@dataclass(frozen=True, eq=False)
class Categorical:
    """A probability vector over a sentence space."""

    space: SentenceSpace
    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        if probs.shape != (len(self.space),):
            raise DimensionError(
                f"probability vector of shape {probs.shape} does not match a space of size {len(self.space)}"
            )
        _check_vector(probs, "Categorical")
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, space: SentenceSpace) -> "Categorical":
        return cls(space, np.full(len(space), 1.0 / len(space)))

    @classmethod
    def point_mass(cls, space: SentenceSpace, sentence) -> "Categorical":
        probs = np.zeros(len(space))
        probs[space.index_of(sentence)] = 1.0
        return cls(space, probs)

    @classmethod
    def empirical(cls, space: SentenceSpace, sentences) -> "Categorical":
        """Empirical distribution of a corpus (duplicates counted)."""
        idx = space.indices(sentences)
        if idx.size == 0:
            raise ValueError("cannot build an empirical distribution from an empty corpus")
        counts = np.bincount(idx, minlength=len(space)).astype(np.float64)
        return cls(space, counts / counts.sum())

    def prob(self, sentence) -> float:
        return float(self.probs[self.space.index_of(sentence)])


@dataclass(frozen=True, eq=False)
class ConditionalTable:
    """Row-stochastic matrix ``rows[i, j] = p(dst_j | src_i)``.

    ``defined`` marks rows that carry a distribution; undefined rows (a Bayes
    posterior at zero evidence) are filled with NaN and must not be consumed.
    """

    src_space: SentenceSpace
    dst_space: SentenceSpace
    rows: np.ndarray
    defined: np.ndarray = None

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64)
        if rows.shape != (len(self.src_space), len(self.dst_space)):
            raise DimensionError(
                f"table of shape {rows.shape} does not match spaces "
                f"{len(self.src_space)}x{len(self.dst_space)}"
            )
        if self.defined is None:
            defined = np.ones(rows.shape[0], dtype=bool)
        else:
            defined = np.array(self.defined, dtype=bool)
        ok = rows[defined]
        if np.any(ok < 0) or not np.all(np.isfinite(ok)):
            raise ValueError("conditional table has negative or non-finite entries")
        sums = ok.sum(axis=1)
        if sums.size and np.max(np.abs(sums - 1.0)) > NORMALIZATION_TOL * max(1.0, np.sqrt(rows.shape[1])):
            raise ValueError("conditional table rows do not sum to 1")
        rows.flags.writeable = False
        defined.flags.writeable = False
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "defined", defined)

    def row(self, src) -> Categorical:
        i = self.src_space.index_of(src)
        if not self.defined[i]:
            raise ValueError(f"row for {tuple(src)!r} is undefined")
        return Categorical(self.dst_space, self.rows[i])


@dataclass(frozen=True, eq=False)
class JointTable:
    """Joint distribution ``matrix[i, j] = p(src_i, dst_j)``."""

    src_space: SentenceSpace
    dst_space: SentenceSpace
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (len(self.src_space), len(self.dst_space)):
            raise DimensionError("joint table shape does not match its spaces")
        _check_vector(m.ravel(), "JointTable")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    def src_marginal(self) -> Categorical:
        return Categorical(self.src_space, _renorm(self.matrix.sum(axis=1)))

    def dst_marginal(self) -> Categorical:
        return Categorical(self.dst_space, _renorm(self.matrix.sum(axis=0)))

    def mutual_information(self) -> float:
        return joint_mutual_information(self.matrix)


def _renorm(v: np.ndarray) -> np.ndarray:
    v = np.clip(v, 0.0, None)
    return v / v.sum()


def _probs(d) -> np.ndarray:
    return np.asarray(getattr(d, "probs", d), dtype=np.float64)


def xlogx(p: np.ndarray) -> np.ndarray:
    """Elementwise ``p log p`` with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * np.log(p[pos])
    return out


def entropy(d) -> float:
    """Shannon entropy in nats."""
    return float(-xlogx(_probs(d)).sum())


def kl(p, q) -> float:
    """KL(p || q) in nats; ``inf`` when p puts mass where q has none."""
    if isinstance(p, Categorical) and isinstance(q, Categorical) and p.space != q.space:
        raise DimensionError("KL between distributions on different spaces")
    pv, qv = _probs(p), _probs(q)
    if pv.shape != qv.shape:
        raise DimensionError(f"KL between vectors of shapes {pv.shape} and {qv.shape}")
    supp = pv > 0
    if np.any(qv[supp] <= 0):
        return float("inf")
    val = float(np.sum(pv[supp] * (np.log(pv[supp]) - np.log(qv[supp]))))
    return max(val, 0.0)


def _rows(cond) -> np.ndarray:
    return np.asarray(getattr(cond, "rows", cond), dtype=np.float64)


def marginal_and_posterior(cond: ConditionalTable, prior: Categorical):
    """Mixture marginal ``sum_x p(y|x) q(x)`` and Bayes posterior ``q(x|y)``.

    The posterior is a dst->src table; columns of zero marginal mass give
    undefined rows.
    """
    if prior.space != cond.src_space:
        raise DimensionError("prior does not live on the conditional's source space")
    rows = cond.rows
    q = prior.probs
    joint = rows * q[:, None]
    marg = joint.sum(axis=0)
    defined = marg > 0
    post = np.full((rows.shape[1], rows.shape[0]), np.nan)
    post[defined] = (joint[:, defined] / marg[defined]).T
    # exact renormalization of each defined row against rounding
    post[defined] /= post[defined].sum(axis=1, keepdims=True)
    marginal = Categorical(cond.dst_space, _renorm(marg))
    return marginal, ConditionalTable(cond.dst_space, cond.src_space, post, defined)


def mutual_information_rows(rows: np.ndarray, prior: np.ndarray) -> float:
    """``E_{x~prior} KL(rows[x] || marginal)`` on raw arrays."""
    rows = np.asarray(rows, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    marg = prior @ rows
    live = prior > 0
    r = rows[live]
    pos = r > 0
    logratio = np.zeros_like(r)
    logratio[pos] = np.log(r[pos]) - np.log(np.broadcast_to(marg, r.shape)[pos])
    per_row = np.sum(r * logratio, axis=1)
    return max(float(prior[live] @ per_row), 0.0)


def mutual_information_exact(cond: ConditionalTable, prior: Categorical) -> float:
    """Mutual information of the joint ``cond(y|x) prior(x)``."""
    if prior.space != cond.src_space:
        raise DimensionError("prior does not live on the conditional's source space")
    return mutual_information_rows(cond.rows, prior.probs)


def joint_mutual_information(matrix: np.ndarray) -> float:
    """MI of a joint matrix via ``H(rows) + H(cols) - H(joint)``."""
    m = np.asarray(matrix, dtype=np.float64)
    h_joint = -xlogx(m).sum()
    h_r = -xlogx(m.sum(axis=1)).sum()
    h_c = -xlogx(m.sum(axis=0)).sum()
    return max(float(h_r + h_c - h_joint), 0.0)


def max_mi_bound(q, p) -> float:
    """Largest MI of any coupling with marginals q and p, ``min(H(q), H(p))``."""
    return min(entropy(q), entropy(p))
