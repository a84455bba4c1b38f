"""Multi-level grouping: N removal, fixed-length groups, n-gram tokens, byte-grouping."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AllN, ConfigError, LengthNotMultiple, TokenOutOfRange, TooShort
from .sequence_io import N, BaseSeq

DEFAULT_GROUP_LEN = 213_000
DEFAULT_CONTEXT = 64


@dataclass(frozen=True)
class GroupingConfig:
    group_len: int = DEFAULT_GROUP_LEN
    context_len: int = DEFAULT_CONTEXT
    ngram: int = 2
    byte_group: int = 4

    def __post_init__(self):
        if self.ngram < 1 or self.byte_group < 1:
            raise ConfigError("ngram and byte_group must be positive")
        if self.context_len % (self.ngram * self.byte_group):
            raise ConfigError(
                f"context_len {self.context_len} must be a multiple of "
                f"ngram*byte_group = {self.ngram * self.byte_group}")
        if self.group_len <= self.context_len:
            raise ConfigError("group_len must exceed context_len")

    @property
    def vocab(self) -> int:
        return 4 ** self.ngram

    def check_width(self, d_model: int):
        if d_model % self.byte_group:
            raise ConfigError(f"d_model {d_model} not divisible by byte_group {self.byte_group}")

    @classmethod
    def fitted(cls, ngram: int, byte_group: int, target_context: int = DEFAULT_CONTEXT,
               group_len: int = DEFAULT_GROUP_LEN) -> "GroupingConfig":
        """Largest context not above ``target_context`` that tokenizes evenly."""
        return cls(group_len, fit_context(ngram, byte_group, target_context), ngram, byte_group)


def fit_context(ngram: int, byte_group: int, target: int = DEFAULT_CONTEXT) -> int:
    unit = ngram * byte_group
    ctx = (target // unit) * unit
    if ctx == 0:
        raise ConfigError(f"context {target} too short for ngram={ngram}, byte_group={byte_group}")
    return ctx


# -- N side channel -----------------------------------------------------------

@dataclass
class NSideChannel:
    runs: list = field(default_factory=list)  # (start, length) in original coordinates

    @property
    def count(self) -> int:
        return sum(r for _, r in self.runs)


def n_runs(bases: np.ndarray) -> list[tuple[int, int]]:
    isn = np.concatenate(([False], np.asarray(bases) == N, [False]))
    edges = np.flatnonzero(isn[1:] != isn[:-1])
    return [(int(s), int(e - s)) for s, e in zip(edges[::2], edges[1::2])]


def strip_n(bases: np.ndarray) -> tuple[np.ndarray, NSideChannel]:
    """Like :func:`extract_n` on raw codes, but an all-N input is allowed."""
    bases = np.asarray(bases, dtype=np.uint8)
    return bases[bases != N], NSideChannel(n_runs(bases))


def extract_n(seq: BaseSeq) -> tuple[BaseSeq, NSideChannel]:
    pure, side = strip_n(seq.bases)
    if pure.size == 0:
        raise AllN(f"sequence {seq.id!r} contains only N")
    return BaseSeq(seq.id, pure), side


def reinsert_n(pure, side: NSideChannel) -> np.ndarray:
    pure = pure.bases if isinstance(pure, BaseSeq) else np.asarray(pure, dtype=np.uint8)
    total = pure.size + side.count
    out = np.full(total, N, dtype=np.uint8)
    mask = np.ones(total, dtype=bool)
    for start, run in side.runs:
        mask[start:start + run] = False
    out[mask] = pure
    return out


# -- fixed-length grouping ----------------------------------------------------

@dataclass
class FixedGroup:
    index: int
    start: int  # offset in the grouped stream
    initial_fragment: np.ndarray = field(repr=False)
    body: np.ndarray = field(repr=False)

    @property
    def length(self) -> int:
        return int(self.initial_fragment.size + self.body.size)


def group_count(length: int, group_len: int) -> int:
    return math.ceil(length / group_len) if length else 0


def group_spans(length: int, cfg: GroupingConfig) -> list[tuple[int, int, int]]:
    """(start, fragment_len, body_len) for every group of a stream of ``length`` bases.

    A tail group no longer than the context is stored entirely as its fragment.
    """
    spans = []
    for g in range(group_count(length, cfg.group_len)):
        start = g * cfg.group_len
        size = min(cfg.group_len, length - start)
        frag = min(cfg.context_len, size)
        spans.append((start, frag, size - frag))
    return spans


def split_fixed(pure_seq, cfg: GroupingConfig) -> list[FixedGroup]:
    bases = pure_seq.bases if isinstance(pure_seq, BaseSeq) else np.asarray(pure_seq, dtype=np.uint8)
    if bases.size <= cfg.context_len:
        raise TooShort(f"{bases.size} bases, need more than the {cfg.context_len}-base context")
    return _split(bases, cfg)


def _split(bases: np.ndarray, cfg: GroupingConfig) -> list[FixedGroup]:
    return [FixedGroup(i, s, bases[s:s + f], bases[s + f:s + f + b])
            for i, (s, f, b) in enumerate(group_spans(bases.size, cfg))]


def ungroup(groups: list[FixedGroup]) -> np.ndarray:
    parts = []
    for grp in groups:
        parts += [grp.initial_fragment, grp.body]
    return np.concatenate(parts).astype(np.uint8) if parts else np.zeros(0, np.uint8)


# -- n-gram tokens ------------------------------------------------------------

@dataclass
class TokenSeq:
    tokens: np.ndarray
    ngram: int

    def __post_init__(self):
        if self.tokens.size and int(self.tokens.max()) >= 4 ** self.ngram:
            raise TokenOutOfRange("token outside the 4^ngram vocabulary")


def ngram_tokenize(bases, ngram: int) -> TokenSeq:
    """Big-endian base-4 packing of each run of ``ngram`` bases into one token."""
    codes = bases.bases if isinstance(bases, BaseSeq) else np.asarray(bases)
    return TokenSeq(tokenize_array(codes, ngram), ngram)


def tokenize_array(codes: np.ndarray, ngram: int) -> np.ndarray:
    """Tokenize the last axis of ``codes`` (works on batches of contexts)."""
    codes = np.asarray(codes)
    if codes.shape[-1] % ngram:
        raise LengthNotMultiple(f"length {codes.shape[-1]} is not a multiple of {ngram}")
    if codes.size and int(codes.max()) > 3:
        raise ValueError("cannot tokenize N")
    weights = 4 ** np.arange(ngram - 1, -1, -1, dtype=np.int64)
    shaped = codes.reshape(*codes.shape[:-1], codes.shape[-1] // ngram, ngram).astype(np.int64)
    return shaped @ weights


def detokenize(tokens, ngram: int) -> np.ndarray:
    toks = tokens.tokens if isinstance(tokens, TokenSeq) else np.asarray(tokens, dtype=np.int64)
    shifts = 2 * np.arange(ngram - 1, -1, -1)
    return ((toks[..., None] >> shifts) & 3).reshape(*toks.shape[:-1], -1).astype(np.uint8)


# -- byte-grouping ------------------------------------------------------------

def byte_group_reshape(embeddings, g: int):
    """[..., L, d] -> [..., L/g, g*d]: concatenate each run of g rows."""
    shape = embeddings.shape
    if shape[-2] % g:
        raise LengthNotMultiple(f"length {shape[-2]} is not a multiple of byte group {g}")
    return embeddings.reshape(*shape[:-2], shape[-2] // g, g * shape[-1])


def byte_ungroup(grouped, g: int):
    shape = grouped.shape
    if shape[-1] % g:
        raise LengthNotMultiple(f"width {shape[-1]} is not a multiple of byte group {g}")
    return grouped.reshape(*shape[:-2], shape[-2] * g, shape[-1] // g)
