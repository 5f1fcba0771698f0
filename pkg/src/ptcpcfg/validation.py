"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

from typing import Sequence

import numpy as np


def check_sentences(X, name: str = "X") -> list[list[str]]:
    """A list of token lists; a bare string is rejected rather than split into characters."""
    if isinstance(X, (str, bytes)):
        raise TypeError(f"{name} must be a sequence of token lists, not a string")
    out = []
    for k, sent in enumerate(X):
        if isinstance(sent, (str, bytes)):
            raise TypeError(f"{name}[{k}] is a string; pass a list of tokens")
        tokens = list(sent)
        if not all(isinstance(t, str) for t in tokens):
            raise TypeError(f"{name}[{k}] contains non-string tokens")
        out.append(tokens)
    if not out:
        raise ValueError(f"{name} is empty")
    return out


def check_token_ids(tokens, vocab_size: int) -> np.ndarray:
    ids = np.asarray(tokens)
    if ids.ndim != 1 or not np.issubdtype(ids.dtype, np.integer):
        raise ValueError("token ids must be a 1-d integer sequence")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise ValueError(f"token id outside [0, {vocab_size})")
    return ids.astype(np.int64)


def check_videos(videos, n: int, model: str) -> Sequence | None:
    if model == "cpcfg":
        return None
    if videos is None:
        raise ValueError(f"model {model!r} needs one video per sentence")
    if len(videos) != n:
        raise ValueError(f"got {len(videos)} videos for {n} sentences")
    return videos


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
