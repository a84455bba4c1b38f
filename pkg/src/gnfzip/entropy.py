"""The interface every entropy model presents to the codec.

A model hands out one *session* per coded group.  A session is seeded with
the group's initial fragment, asked for next-token distributions, and told
which token actually occurred.  ``predict`` takes a list of sessions so
models that batch (the neural one) can serve all groups at the same
relative position in one call; per-row results never depend on the batch.
"""
from __future__ import annotations

import hashlib
import json

import numpy as np


class Session:
    def advance(self, token: int):
        raise NotImplementedError


class EntropyModel:
    kind = "abstract"
    ngram = 1

    @property
    def vocab(self) -> int:
        return 4 ** self.ngram

    def descriptor(self) -> dict:
        return {"kind": self.kind, "ngram": self.ngram}

    def fingerprint(self) -> bytes:
        blob = json.dumps(self.descriptor(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()

    def new_session(self, fragment: np.ndarray) -> Session:
        raise NotImplementedError

    def predict(self, sessions: list) -> list:
        """Rows of next-token probabilities, one per session (lists or arrays)."""
        raise NotImplementedError

    def with_ngram(self, ngram: int) -> "EntropyModel":
        """The same model family coding ``ngram``-base tokens (baselines only)."""
        raise NotImplementedError(f"{self.kind} model has a fixed token size")
