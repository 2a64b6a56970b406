"""Scikit-learn style wrapper around the training strategies."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_is_fitted
from .space import enumerate_space
from .synth import Corpora, token_accuracy
from .trainers import RunResult, TrainConfig, run_strategy


class DualTranslator(BaseEstimator):
    """A forward/backward translation model pair trained with one strategy.

    ``fit(X, y)`` takes parallel source and target sentences; monolingual
    corpora go through ``mono_x`` / ``mono_y``. ``predict`` translates sources,
    ``inverse_predict`` translates targets back. Extra keyword arguments
    of :class:`TrainConfig` are accepted through ``train_params``.
    """

    def __init__(
        self,
        strategy="supervised",
        model="autoregressive",
        src_alphabet=None,
        dst_alphabet=None,
        max_len=None,
        eval_beam=5,
        train_params=None,
        random_state=0,
    ):
        self.strategy = strategy
        self.model = model
        self.src_alphabet = src_alphabet
        self.dst_alphabet = dst_alphabet
        self.max_len = max_len
        self.eval_beam = eval_beam
        self.train_params = train_params
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        extra = dict(self.train_params or {})
        return TrainConfig(strategy=self.strategy, model=self.model, eval_beam=self.eval_beam,
                           seed=int(self.random_state), **extra)

    def fit(self, X, y, mono_x=(), mono_y=(), valid=None, gt=None):
        X = [tuple(s) for s in X]
        y = [tuple(t) for t in y]
        if len(X) != len(y):
            raise ValueError(f"X and y have different lengths ({len(X)} != {len(y)})")
        if not X:
            raise ValueError("fit needs at least one parallel pair")
        mono_x = [tuple(s) for s in mono_x]
        mono_y = [tuple(t) for t in mono_y]
        config = self._config()
        if gt is not None:
            spaces = (gt.src_space, gt.dst_space)
        else:
            every_x = X + mono_x
            every_y = y + mono_y
            a_x = self.src_alphabet or sorted({c for s in every_x for c in s})
            a_y = self.dst_alphabet or sorted({c for s in every_y for c in s})
            n = self.max_len or max(len(s) for s in every_x + every_y)
            spaces = (enumerate_space(tuple(a_x), n), enumerate_space(tuple(a_y), n))
        pairs = list(zip(X, y))
        corpora = Corpora(pairs, mono_x, mono_y, list(valid) if valid else pairs, [])
        result: RunResult = run_strategy(corpora, config, gt=gt, spaces=spaces)
        self.result_ = result
        self.forward_ = result.p_theta
        self.backward_ = result.q_phi
        self.curves_ = result.curves
        return self

    def _translate(self, model, X):
        idx = model.src_space.indices([tuple(s) for s in X])
        out = model.decode_indices(idx, "beam", beam_size=self.eval_beam)[0]
        return [model.dst_space.sentence(j) for j in out]

    def predict(self, X):
        check_is_fitted(self, "forward_")
        return self._translate(self.forward_, X)

    def inverse_predict(self, y):
        check_is_fitted(self, "backward_")
        return self._translate(self.backward_, y)

    def predict_log_proba(self, X):
        """Log-probabilities over the whole target space, one row per source."""
        check_is_fitted(self, "forward_")
        return self.forward_.log_prob_matrix(self.forward_.src_space.indices([tuple(s) for s in X]))

    def score(self, X, y):
        """Token accuracy of the forward translations."""
        return token_accuracy(self.predict(X), [tuple(t) for t in y])

    def transform(self, X):
        return self.predict(X)

    def log_likelihood(self, X, y) -> float:
        """Mean forward log-likelihood of parallel pairs."""
        check_is_fitted(self, "forward_")
        m = self.forward_
        src = m.src_space.indices([tuple(s) for s in X])
        dst = m.dst_space.indices([tuple(t) for t in y])
        return float(np.mean(m.log_prob_pairs(src, dst)))
