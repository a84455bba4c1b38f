"""Non-neural entropy models: static uniform and adaptive order-k counts.

Both act as correctness oracles for the codec and as reference rows in
benchmarks.  They code the same n-gram tokens as the neural model by
chaining per-base predictions.
"""
from __future__ import annotations

import numpy as np

from .entropy import EntropyModel, Session
from .errors import ConfigError, ShortContext

MAX_ORDER = 8


class UniformSession(Session):
    __slots__ = ("row",)

    def __init__(self, row):
        self.row = row

    def advance(self, token: int):
        pass


class UniformModel(EntropyModel):
    kind = "uniform"

    def __init__(self, ngram: int = 1):
        self.ngram = ngram
        self._row = [1.0 / self.vocab] * self.vocab

    def new_session(self, fragment=None):
        return UniformSession(self._row)

    def predict(self, sessions):
        return [self._row for _ in sessions]

    def with_ngram(self, ngram):
        return UniformModel(ngram)


class OrderKModel:
    """Counts of each base after every k-base context, Laplace-initialised."""

    def __init__(self, k: int = 4):
        if not 0 <= k <= MAX_ORDER:
            raise ConfigError(f"order must be in 0..{MAX_ORDER}")
        self.k = k
        self.nctx = 4 ** k
        self.counts = [1] * (self.nctx * 4)

    def context_index(self, context) -> int:
        if len(context) < self.k:
            raise ShortContext(f"order-{self.k} model needs {self.k} bases of context")
        idx = 0
        for b in list(context)[len(context) - self.k:]:
            idx = idx * 4 + int(b)
        return idx

    def dist(self, ctx: int) -> list:
        c = self.counts[4 * ctx:4 * ctx + 4]
        s = c[0] + c[1] + c[2] + c[3]
        return [c[0] / s, c[1] / s, c[2] / s, c[3] / s]

    def predict(self, context) -> list:
        return self.dist(self.context_index(context))

    def update(self, context, symbol: int):
        self.counts[4 * self.context_index(context) + int(symbol)] += 1


def predict(model: OrderKModel, context) -> list:
    return model.predict(context)


def update(model: OrderKModel, context, symbol: int):
    model.update(context, symbol)


class OrderKSession(Session):
    __slots__ = ("table", "ctx", "ngram")

    def __init__(self, k: int, ngram: int, fragment):
        self.table = OrderKModel(k)
        self.ngram = ngram
        ctx = 0
        for b in fragment[max(0, len(fragment) - k):]:
            ctx = ctx * 4 + int(b)
        self.ctx = ctx

    def token_dist(self) -> list:
        t = self.table
        if self.ngram == 1:
            return t.dist(self.ctx)
        # chain rule over the bases of the token, most significant first
        probs = [1.0]
        ctxs = [self.ctx]
        for _ in range(self.ngram):
            nprobs, nctxs = [], []
            for p, c in zip(probs, ctxs):
                d = t.dist(c)
                base = (c * 4) % t.nctx
                for b in range(4):
                    nprobs.append(p * d[b])
                    nctxs.append(base + b)
            probs, ctxs = nprobs, nctxs
        return probs

    def advance(self, token: int):
        t = self.table
        counts = t.counts
        ctx = self.ctx
        for j in range(self.ngram - 1, -1, -1):
            b = (token >> (2 * j)) & 3
            counts[4 * ctx + b] += 1
            ctx = (ctx * 4 + b) % t.nctx
        self.ctx = ctx


class OrderKEntropyModel(EntropyModel):
    kind = "order-k"

    def __init__(self, k: int = 4, ngram: int = 1):
        if not 0 <= k <= MAX_ORDER:
            raise ConfigError(f"order must be in 0..{MAX_ORDER}")
        self.k = k
        self.ngram = ngram

    def descriptor(self):
        return {"kind": self.kind, "k": self.k, "ngram": self.ngram}

    def new_session(self, fragment):
        return OrderKSession(self.k, self.ngram, np.asarray(fragment).tolist())

    def predict(self, sessions):
        return [s.token_dist() for s in sessions]

    def with_ngram(self, ngram):
        return OrderKEntropyModel(self.k, ngram)
