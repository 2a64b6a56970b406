"""Input validation helpers shared by the estimators and functional API."""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.exceptions import NotFittedError as _SkNotFitted


class NotFittedError(_SkNotFitted):
    """Raised when an estimator is used before ``fit``."""


def check_rng(seed) -> np.random.Generator:
    """Turn None, an int, or a Generator into a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (numbers.Integral, np.integer)):
        return np.random.default_rng(seed)
    raise ValueError(f"{seed!r} cannot be used to seed a numpy Generator")


def check_probability(value, name, *, closed_right=False) -> float:
    value = float(value)
    ok = 0.0 <= value <= 1.0 if closed_right else 0.0 <= value < 1.0
    if not ok:
        bound = "[0, 1]" if closed_right else "[0, 1)"
        raise ValueError(f"{name}={value} must lie in {bound}")
    return value


def check_positive(value, name) -> float:
    value = float(value)
    if not value > 0:
        raise ValueError(f"{name}={value} must be > 0")
    return value


def check_sentences(sentences, space, name="sentences") -> np.ndarray:
    """Encode a list of sentences as space indices, rejecting out-of-space ones."""
    out = np.empty(len(sentences), dtype=np.int64)
    for i, s in enumerate(sentences):
        key = tuple(s)
        j = space.index.get(key)
        if j is None:
            raise ValueError(f"{name}[{i}] = {key!r} is not in the sentence space")
        out[i] = j
    return out


def check_pairs(pairs, src_space, dst_space, name="pairs"):
    if len(pairs) == 0:
        raise ValueError(f"{name} must be non-empty")
    src = check_sentences([p[0] for p in pairs], src_space, f"{name} sources")
    dst = check_sentences([p[1] for p in pairs], dst_space, f"{name} targets")
    return src, dst


def check_is_fitted(estimator, attributes):
    if isinstance(attributes, str):
        attributes = [attributes]
    if not all(getattr(estimator, a, None) is not None for a in attributes):
        raise NotFittedError(
            f"This {type(estimator).__name__} instance is not fitted yet; call 'fit' first."
        )
