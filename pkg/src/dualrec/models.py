"""Differentiable translation models, a bigram language model, and decoding.

Two conditional families share one duck-typed surface:

* :class:`TabularModel` -- one free logit per (source, target) pair.
* :class:`AutoregressiveModel` -- per-step softmax over the target alphabet
  plus EOS, conditioned on (position, previous target symbol, source symbol at
  the same position or PAD). Mass on the empty sentence and on sentences
  longer than ``max_len`` is renormalized away.

Both expose ``log_prob_matrix``, ``log_prob_pairs``, ``grad_pairs``,
``decode_indices``, ``sample_indices`` and ``conditional``.
"""
from __future__ import annotations

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax
from sklearn.base import BaseEstimator

from ._validation import NotFittedError, check_positive, check_rng
from .space import Categorical, ConditionalTable, SentenceSpace

DECODE_MODES = ("greedy", "beam", "sample")
_CHUNK = 2_000_000


def length_offsets(space: SentenceSpace) -> np.ndarray:
    """``offsets[L]`` = number of sentences shorter than L (index of the first length-L sentence)."""
    a = len(space.alphabet)
    off = np.zeros(space.max_len + 2, dtype=np.int64)
    for length in range(1, space.max_len + 1):
        off[length + 1] = off[length] + a**length
    return off


class TabularModel:
    """Full-capacity conditional: ``p(dst | src) = softmax(logits[src])``."""

    def __init__(self, src_space, dst_space, logits=None, *, init_scale=0.0, random_state=None):
        self.src_space = src_space
        self.dst_space = dst_space
        shape = (len(src_space), len(dst_space))
        if logits is None:
            logits = np.zeros(shape)
            if init_scale:
                logits = check_rng(random_state).normal(0.0, init_scale, size=shape)
        logits = np.array(logits, dtype=np.float64)
        if logits.shape != shape:
            raise ValueError(f"logits shape {logits.shape} != {shape}")
        self.logits = logits

    @classmethod
    def from_table(cls, table: ConditionalTable, floor=None) -> "TabularModel":
        """Logits equal to log-probabilities of ``table`` (zeros map to ``floor`` or -inf)."""
        with np.errstate(divide="ignore"):
            logits = np.log(table.rows)
        if floor is not None:
            logits = np.maximum(logits, floor)
        return cls(table.src_space, table.dst_space, logits)

    @property
    def n_params(self) -> int:
        return self.logits.size

    def copy(self) -> "TabularModel":
        return TabularModel(self.src_space, self.dst_space, self.logits.copy())

    def log_prob_matrix(self, src_idx=None) -> np.ndarray:
        lg = self.logits if src_idx is None else self.logits[np.asarray(src_idx)]
        return log_softmax(lg, axis=1)

    def conditional(self) -> ConditionalTable:
        return ConditionalTable(self.src_space, self.dst_space, softmax(self.logits, axis=1))

    def log_prob_pairs(self, src_idx, dst_idx) -> np.ndarray:
        src_idx, dst_idx = np.asarray(src_idx), np.asarray(dst_idx)
        rows, inv = np.unique(src_idx, return_inverse=True)
        norm = logsumexp(self.logits[rows], axis=1)
        return self.logits[src_idx, dst_idx] - norm[inv.ravel()]

    def grad_pairs(self, src_idx, dst_idx, weights=None) -> np.ndarray:
        """``sum_b w_b * grad log p(dst_b | src_b)`` with respect to ``logits``."""
        src_idx, dst_idx = np.asarray(src_idx), np.asarray(dst_idx)
        w = np.ones(len(src_idx)) if weights is None else np.asarray(weights, dtype=np.float64)
        grad = np.zeros_like(self.logits)
        np.add.at(grad, (src_idx, dst_idx), w)
        rows, inv = np.unique(src_idx, return_inverse=True)
        row_w = np.bincount(inv.ravel(), weights=w, minlength=len(rows))
        grad[rows] -= row_w[:, None] * softmax(self.logits[rows], axis=1)
        return grad

    def decode_indices(self, src_idx, mode="beam", beam_size=1, rng=None):
        src_idx = np.asarray(src_idx)
        # work on distinct sources; batches can be far larger than the space
        rows, inv = np.unique(src_idx, return_inverse=True)
        inv = inv.ravel()
        lp = self.log_prob_matrix(rows)
        if mode == "sample":
            cdf = np.cumsum(np.exp(lp), axis=1)
            u = check_rng(rng).random(len(src_idx)) * cdf[inv, -1]
            out = np.empty(len(src_idx), dtype=np.int64)
            for k in range(len(rows)):
                sel = inv == k
                out[sel] = np.searchsorted(cdf[k], u[sel], side="left")
            out = np.minimum(out, lp.shape[1] - 1)
        elif mode in ("greedy", "beam"):
            out = np.argmax(lp, axis=1)[inv]
        else:
            raise ValueError(f"unknown decode mode {mode!r}")
        return out, lp[inv, out]

    def sample_indices(self, src_idx, rng=None) -> np.ndarray:
        return self.decode_indices(src_idx, "sample", rng=rng)[0]


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs)) * cdf[:, -1]
    out = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(out, probs.shape[1] - 1)


class AutoregressiveModel:
    """Position-aligned autoregressive conditional with truncation renormalization.

    ``logits[t, prev, src, out]``: ``t`` in 0..T (T = target max_len), ``prev``
    is a target symbol or BOS (= A), ``src`` is the source symbol at position
    ``t`` or PAD, ``out`` is a target symbol or EOS (= A).
    """

    def __init__(self, src_space, dst_space, logits=None, *, init_scale=0.0, random_state=None):
        self.src_space = src_space
        self.dst_space = dst_space
        a, s, t = len(dst_space.alphabet), len(src_space.alphabet), dst_space.max_len
        self.n_symbols, self.n_src_symbols, self.max_len = a, s, t
        shape = (t + 1, a + 1, s + 1, a + 1)
        if logits is None:
            logits = np.zeros(shape)
            if init_scale:
                logits = check_rng(random_state).normal(0.0, init_scale, size=shape)
        logits = np.array(logits, dtype=np.float64)
        if logits.shape != shape:
            raise ValueError(f"logits shape {logits.shape} != {shape}")
        self.logits = logits
        self._build_tables()

    def _build_tables(self):
        a, t = self.n_symbols, self.max_len
        codes, lengths = self.dst_space.codes, self.dst_space.lengths
        n = len(codes)
        steps = np.arange(t + 1)
        self._mask = steps[None, :] <= lengths[:, None]
        prev = np.full((n, t + 1), a, dtype=np.int64)
        prev[:, 1:] = np.where(steps[None, 1:] <= lengths[:, None], codes[:, :t], 0)
        out = np.zeros((n, t + 1), dtype=np.int64)
        out[:, :t] = np.where(steps[None, :t] < lengths[:, None], codes, 0)
        out[np.arange(n), lengths] = a
        prev[~self._mask] = 0
        out[~self._mask] = 0
        self._prev, self._out = prev, out
        # source symbol seen at each target step, PAD past the end
        s_codes = self.src_space.codes
        ctx = np.full((len(s_codes), t + 1), self.n_src_symbols, dtype=np.int64)
        w = min(t + 1, s_codes.shape[1])
        ctx[:, :w] = s_codes[:, :w]
        self._src_ctx = ctx
        self._offsets = length_offsets(self.dst_space)

    @property
    def n_params(self) -> int:
        return self.logits.size

    def copy(self) -> "AutoregressiveModel":
        m = AutoregressiveModel.__new__(AutoregressiveModel)
        m.__dict__.update(self.__dict__)
        m.logits = self.logits.copy()
        return m

    # -- per-batch step distributions and the in-space normalizer ----------

    def _step_log_probs(self, src_idx) -> np.ndarray:
        """(B, T+1, prev, out) log step probabilities for each source."""
        s = self._src_ctx[np.asarray(src_idx)]
        ls = log_softmax(self.logits, axis=-1)
        return ls[np.arange(self.max_len + 1)[None, :], :, s, :]

    def _forward_backward(self, steps: np.ndarray):
        """Prefix mass alpha, completion mass beta and Z for step probs (B, T+1, A+1, A+1)."""
        b, a, t = steps.shape[0], self.n_symbols, self.max_len
        alpha = np.zeros((b, t + 1, a + 1))
        alpha[:, 0, a] = 1.0
        for i in range(t):
            alpha[:, i + 1, :a] = np.einsum("bp,bpo->bo", alpha[:, i], steps[:, i, :, :a])
        beta = np.zeros((b, t + 1, a + 1))
        beta[:, t] = steps[:, t, :, a]
        for i in range(t - 1, -1, -1):
            cont = np.einsum("bpo,bo->bp", steps[:, i, :, :a], beta[:, i + 1, :a])
            beta[:, i] = cont + (steps[:, i, :, a] if i >= 1 else 0.0)
        z = beta[:, 0, a]
        return alpha, beta, z

    def log_normalizer(self, src_idx) -> np.ndarray:
        """log of the raw in-space mass for each source (<= 0)."""
        steps = np.exp(self._step_log_probs(src_idx))
        return np.log(self._forward_backward(steps)[2])

    def excluded_mass(self, src_idx) -> np.ndarray:
        """Raw mass on the empty sentence plus sentences longer than max_len."""
        steps = np.exp(self._step_log_probs(src_idx))
        return 1.0 - self._forward_backward(steps)[2]

    # -- likelihoods ------------------------------------------------------

    def raw_log_prob_matrix(self, src_idx=None) -> np.ndarray:
        """Unnormalized log-probabilities of every space sentence, (B, |dst|)."""
        src_idx = np.arange(len(self.src_space)) if src_idx is None else np.asarray(src_idx)
        ls = log_softmax(self.logits, axis=-1)
        n = len(self.dst_space)
        out = np.empty((len(src_idx), n))
        chunk = max(1, _CHUNK // (n * (self.max_len + 1)))
        for lo in range(0, len(src_idx), chunk):
            s = self._src_ctx[src_idx[lo : lo + chunk]]
            acc = np.zeros((len(s), n))
            for t in range(self.max_len + 1):
                g = ls[t][self._prev[None, :, t], s[:, t][:, None], self._out[None, :, t]]
                acc += np.where(self._mask[None, :, t], g, 0.0)
            out[lo : lo + chunk] = acc
        return out

    def log_prob_matrix(self, src_idx=None) -> np.ndarray:
        raw = self.raw_log_prob_matrix(src_idx)
        return raw - logsumexp(raw, axis=1, keepdims=True)

    def conditional(self) -> ConditionalTable:
        return ConditionalTable(self.src_space, self.dst_space, np.exp(self.log_prob_matrix()))

    def _raw_pairs(self, steps_log, dst_idx) -> np.ndarray:
        b = np.arange(len(dst_idx))[:, None]
        t = np.arange(self.max_len + 1)[None, :]
        prev, out, mask = self._prev[dst_idx], self._out[dst_idx], self._mask[dst_idx]
        g = steps_log[b, t, prev, out]
        return np.where(mask, g, 0.0).sum(axis=1)

    def log_prob_pairs(self, src_idx, dst_idx) -> np.ndarray:
        src_idx, dst_idx = np.asarray(src_idx), np.asarray(dst_idx)
        steps_log = self._step_log_probs(src_idx)
        z = self._forward_backward(np.exp(steps_log))[2]
        return self._raw_pairs(steps_log, dst_idx) - np.log(z)

    def grad_pairs(self, src_idx, dst_idx, weights=None) -> np.ndarray:
        """``sum_b w_b * grad log p(dst_b | src_b)`` with respect to ``logits``."""
        src_idx, dst_idx = np.asarray(src_idx), np.asarray(dst_idx)
        nb = len(src_idx)
        w = np.ones(nb) if weights is None else np.asarray(weights, dtype=np.float64)
        a, s_n, t_n = self.n_symbols, self.n_src_symbols, self.max_len
        shape = self.logits.shape
        s = self._src_ctx[src_idx]
        steps = np.exp(self._step_log_probs(src_idx))
        alpha, beta, z = self._forward_backward(steps)

        # expected emissions under the renormalized in-space distribution
        emit = np.zeros((nb, t_n + 1, a + 1, a + 1))
        emit[:, :t_n, :, :a] = alpha[:, :t_n, :, None] * steps[:, :t_n, :, :a] * beta[:, 1:, None, :a]
        emit[:, 1:, :, a] = alpha[:, 1:, :] * steps[:, 1:, :, a]
        emit /= z[:, None, None, None]
        visits = emit.sum(axis=-1)

        t_ix = np.arange(t_n + 1)
        ctx_base = (t_ix[None, :] * (a + 1)) * (s_n + 1)  # (1, T+1)
        # observed emissions
        prev, out, mask = self._prev[dst_idx], self._out[dst_idx], self._mask[dst_idx]
        ctx_obs = ctx_base + prev * (s_n + 1) + s
        wm = np.where(mask, w[:, None], 0.0)
        n_ctx = shape[0] * shape[1] * shape[2]
        counts = np.bincount((ctx_obs * (a + 1) + out).ravel(), weights=wm.ravel(), minlength=self.logits.size)
        ctx_w = np.bincount(ctx_obs.ravel(), weights=wm.ravel(), minlength=n_ctx)
        # expected emissions, subtracted
        p_ix = np.arange(a + 1)
        ctx_exp = ctx_base[:, :, None] + p_ix[None, None, :] * (s_n + 1) + s[:, :, None]  # (B, T+1, prev)
        flat = ctx_exp[..., None] * (a + 1) + p_ix[None, None, None, :]
        counts -= np.bincount(flat.ravel(), weights=(emit * w[:, None, None, None]).ravel(), minlength=self.logits.size)
        ctx_w -= np.bincount(ctx_exp.ravel(), weights=(visits * w[:, None, None]).ravel(), minlength=n_ctx)
        probs = softmax(self.logits, axis=-1)
        grad = counts.reshape(shape) - ctx_w.reshape(shape[:3])[..., None] * probs
        return grad

    # -- decoding -----------------------------------------------------------

    def _index_of(self, key, length):
        return self._offsets[length] + key

    def decode_indices(self, src_idx, mode="beam", beam_size=1, rng=None):
        src_idx = np.asarray(src_idx)
        if len(src_idx) == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        steps_log = self._step_log_probs(src_idx)
        if mode == "sample":
            out = self._sample(np.exp(steps_log), check_rng(rng))
        elif mode == "greedy":
            out = self._greedy(steps_log)
        elif mode == "beam":
            out = self._beam(steps_log, int(beam_size))
        else:
            raise ValueError(f"unknown decode mode {mode!r}")
        z = self._forward_backward(np.exp(steps_log))[2]
        return out, self._raw_pairs(steps_log, out) - np.log(z)

    def sample_indices(self, src_idx, rng=None) -> np.ndarray:
        return self.decode_indices(src_idx, "sample", rng=rng)[0]

    def _greedy(self, steps_log):
        nb, a, t_n = len(steps_log), self.n_symbols, self.max_len
        prev = np.full(nb, a)
        key = np.zeros(nb, dtype=np.int64)
        done = np.full(nb, -1, dtype=np.int64)
        rows = np.arange(nb)
        for t in range(t_n + 1):
            lp = steps_log[rows, t, prev]
            live = done < 0
            if t == t_n:
                choice = np.full(nb, a)
            else:
                # EOS first so that ties favour the shorter (lower-index) sentence
                order = np.concatenate(([a], np.arange(a)))
                cand = lp[:, order]
                if t == 0:
                    cand[:, 0] = -np.inf
                choice = order[np.argmax(cand, axis=1)]
            ending = live & (choice == a)
            done[ending] = self._index_of(key[ending], t)
            cont = live & (choice != a)
            key[cont] = key[cont] * a + choice[cont]
            prev = np.where(cont, choice, prev)
        return done

    def _beam(self, steps_log, k):
        if k < 1:
            raise ValueError("beam size must be >= 1")
        nb, a, t_n = len(steps_log), self.n_symbols, self.max_len
        rows = np.arange(nb)[:, None]
        logp = np.full((nb, k), -np.inf)
        logp[:, 0] = 0.0
        prev = np.full((nb, k), a)
        key = np.zeros((nb, k), dtype=np.int64)
        best = np.full(nb, -np.inf)
        best_idx = np.full(nb, -1, dtype=np.int64)
        for t in range(t_n + 1):
            cand = logp[..., None] + steps_log[rows, t, prev]  # (B, k, A+1)
            if t >= 1:
                fin = cand[..., a]
                fidx = self._index_of(key, t)
                order = np.lexsort((fidx, -fin), axis=-1)[:, 0]
                f_s = fin[np.arange(nb), order]
                f_i = fidx[np.arange(nb), order]
                better = (f_s > best) | ((f_s == best) & (f_i < best_idx))
                best = np.where(better, f_s, best)
                best_idx = np.where(better, f_i, best_idx)
            if t == t_n:
                break
            sym = cand[..., :a].reshape(nb, k * a)
            keys = (key[..., None] * a + np.arange(a)).reshape(nb, k * a)
            order = np.lexsort((keys, -sym), axis=-1)[:, :k]
            kk = order.shape[1]
            logp = np.full((nb, k), -np.inf)
            logp[:, :kk] = np.take_along_axis(sym, order, axis=1)
            new_prev = np.full((nb, k), a)
            new_prev[:, :kk] = order % a
            new_key = np.zeros((nb, k), dtype=np.int64)
            new_key[:, :kk] = np.take_along_axis(keys, order, axis=1)
            prev, key = new_prev, new_key
        return best_idx

    def _sample(self, steps, rng):
        """Exact ancestral sampling from the renormalized in-space distribution."""
        nb, a, t_n = len(steps), self.n_symbols, self.max_len
        _, beta, _ = self._forward_backward(steps)
        rows = np.arange(nb)
        prev = np.full(nb, a)
        key = np.zeros(nb, dtype=np.int64)
        done = np.full(nb, -1, dtype=np.int64)
        for t in range(t_n + 1):
            live = done < 0
            p = steps[rows, t, prev]
            w = np.zeros((nb, a + 1))
            if t < t_n:
                w[:, :a] = p[:, :a] * beta[rows, t + 1, :a]
            if t >= 1:
                w[:, a] = p[:, a]
            choice = _sample_rows(w, rng)
            ending = live & (choice == a)
            done[ending] = self._index_of(key[ending], t)
            cont = live & (choice != a)
            key[cont] = key[cont] * a + choice[cont]
            prev = np.where(cont, choice, prev)
        return done


# -- functional surface ------------------------------------------------------


def log_prob(model, src, dst) -> float:
    """Exact log p(dst | src) in nats."""
    i = model.src_space.index_of(src)
    j = model.dst_space.index_of(dst)
    return float(model.log_prob_pairs([i], [j])[0])


def grad_log_prob(model, src, dst) -> np.ndarray:
    """Gradient of log p(dst | src) with respect to ``model.logits``."""
    i = model.src_space.index_of(src)
    j = model.dst_space.index_of(dst)
    return model.grad_pairs([i], [j])


def decode(model, src, mode="greedy", beam_size=1, rng=None):
    """Decode one sentence; returns ``(sentence, exact log-prob)``."""
    if mode not in DECODE_MODES:
        raise ValueError(f"mode must be one of {DECODE_MODES}, got {mode!r}")
    i = model.src_space.index_of(src)
    out, score = model.decode_indices([i], mode, beam_size=beam_size, rng=rng)
    return model.dst_space.sentence(out[0]), float(score[0])


def model_marginal(model, prior: Categorical) -> Categorical:
    table = np.exp(model.log_prob_matrix())
    m = prior.probs @ table
    return Categorical(model.dst_space, m / m.sum())


# -- language model ----------------------------------------------------------


class BigramLanguageModel(BaseEstimator):
    """Additively smoothed bigram model with BOS/EOS boundary symbols.

    ``P(w | v) = (c(v, w) + smoothing) / (c(v) + smoothing * (|A| + 1))`` for
    ``w`` in the alphabet plus EOS.
    """

    def __init__(self, alphabet=None, smoothing=0.1):
        self.alphabet = alphabet
        self.smoothing = smoothing

    def fit(self, corpus, y=None):
        check_positive(self.smoothing, "smoothing")
        corpus = [tuple(s) for s in corpus]
        if not corpus:
            raise ValueError("cannot fit a language model on an empty corpus")
        alphabet = self.alphabet
        if alphabet is None:
            alphabet = sorted({c for s in corpus for c in s})
        self.alphabet_ = tuple(alphabet)
        sym = {c: i for i, c in enumerate(self.alphabet_)}
        a = len(self.alphabet_)
        counts = np.zeros((a + 1, a + 1))
        for s in corpus:
            prev = a
            for c in s:
                if c not in sym:
                    raise ValueError(f"symbol {c!r} is not in the LM alphabet")
                counts[prev, sym[c]] += 1
                prev = sym[c]
            counts[prev, a] += 1
        self.counts_ = counts
        lam = float(self.smoothing)
        self.log_probs_ = np.log((counts + lam) / (counts.sum(axis=1, keepdims=True) + lam * (a + 1)))
        self._sym = sym
        return self

    def _check(self):
        if getattr(self, "log_probs_", None) is None:
            raise NotFittedError("BigramLanguageModel is not fitted")

    def next_symbol_probs(self, prev=None) -> np.ndarray:
        """Distribution over alphabet + EOS after ``prev`` (None = BOS)."""
        self._check()
        row = len(self.alphabet_) if prev is None else self._sym[prev]
        return np.exp(self.log_probs_[row])

    def log_prob(self, sentence) -> float:
        self._check()
        a = len(self.alphabet_)
        prev, total = a, 0.0
        for c in sentence:
            j = self._sym[c]
            total += self.log_probs_[prev, j]
            prev = j
        return float(total + self.log_probs_[prev, a])

    def log_prob_space(self, space: SentenceSpace) -> np.ndarray:
        """Log-probability of every sentence of ``space`` (vectorized)."""
        self._check()
        if tuple(space.alphabet) != self.alphabet_:
            raise ValueError("space alphabet differs from the LM alphabet")
        a = len(self.alphabet_)
        codes, lengths = space.codes, space.lengths
        n, t = codes.shape
        prev = np.full((n, t + 1), a)
        prev[:, 1:] = codes
        nxt = np.full((n, t + 1), a)
        nxt[:, :t] = codes
        steps = np.arange(t + 1)[None, :]
        lp = self.log_probs_[np.minimum(prev, a), np.minimum(nxt, a)]
        return np.where(steps <= lengths[:, None], lp, 0.0).sum(axis=1)

    def score(self, corpus, y=None) -> float:
        """Mean log-likelihood per sentence."""
        return float(np.mean([self.log_prob(s) for s in corpus]))


def fit_lm(corpus, smoothing=0.1, alphabet=None) -> BigramLanguageModel:
    """Fit an additively smoothed bigram language model."""
    return BigramLanguageModel(alphabet=alphabet, smoothing=smoothing).fit(corpus)
