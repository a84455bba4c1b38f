"""Training the neural entropy model on sliding windows.

Every token position at or past ``context_len`` in a sequence is one
example: the preceding ``context_len`` bases and the next ``ngram``-base
token.  Models without a latent array see the examples shuffled.  Models
with one are trained on ``batch_size`` parallel streams that walk
contiguous examples in sequence order, carrying the detached encoder output
from step to step and resetting it at sequence starts, so each window sees
the same kind of memory it will see when coding.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, NonFinite, TooShort
from .geneformer import GeneformerEntropyModel, GeneformerModel, load_checkpoint, save_checkpoint
from .grouping import strip_n, tokenize_array
from .sequence_io import BaseSeq, FastaRecord

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-3
    epochs: int = 100
    seed: int = 0
    eval_every: int = 1
    max_examples: int | None = None
    max_seconds: float | None = None
    rho: float = 0.9
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr >= 0:
            raise ConfigError("lr must be non-negative")
        if self.epochs < 0 or self.eval_every < 1:
            raise ConfigError("epochs must be >= 0 and eval_every >= 1")

    @classmethod
    def hybrid(cls, **kw) -> "TrainConfig":
        kw.setdefault("lr", 2e-3)
        return cls(**kw)


def _bases(item) -> np.ndarray:
    if isinstance(item, FastaRecord):
        item = item.seq
    if isinstance(item, BaseSeq):
        item = item.bases
    return strip_n(np.asarray(item, dtype=np.uint8))[0]


class ExampleSet:
    """All (context, next token) windows of a set of N-stripped sequences."""

    def __init__(self, seqs, context_len: int, ngram: int):
        self.context_len, self.ngram = context_len, ngram
        flats, positions, seq_ranges = [], [], []
        offset = count = 0
        for item in seqs:
            b = _bases(item)
            n = (b.size - context_len) // ngram if b.size > context_len else 0
            if n <= 0:
                log.warning("skipping sequence of %d bases: %s", b.size,
                            TooShort(f"needs more than {context_len + ngram - 1} bases"))
                continue
            pos = offset + context_len + ngram * np.arange(n)
            seq_ranges.append((count, n))
            count += n
            positions.append(pos)
            flats.append(b)
            offset += b.size
        self.flat = np.concatenate(flats) if flats else np.zeros(0, np.uint8)
        self.positions = np.concatenate(positions) if positions else np.zeros(0, np.int64)
        self.seq_ranges = seq_ranges  # (first example index, count) per sequence
        self.windows = (np.lib.stride_tricks.sliding_window_view(self.flat, context_len)
                        if self.flat.size >= context_len else None)

    def __len__(self) -> int:
        return int(self.positions.size)

    @property
    def n_sequences(self) -> int:
        return len(self.seq_ranges)

    def batch(self, idx):
        pos = self.positions[idx]
        ctx = self.windows[pos - self.context_len]
        nxt = self.flat[pos[:, None] + np.arange(self.ngram)]
        return np.ascontiguousarray(ctx), tokenize_array(nxt, self.ngram)[:, 0]

    def order(self, epoch: int, seed: int, streams: bool, max_examples=None) -> np.ndarray:
        rng = np.random.default_rng([seed, epoch])
        if not streams:
            idx = rng.permutation(len(self))
        else:
            seq_order = rng.permutation(self.n_sequences)
            idx = np.concatenate([np.arange(s, s + n) for s, n in (self.seq_ranges[i] for i in seq_order)])
        return idx[:max_examples] if max_examples else idx

    def seq_starts(self) -> np.ndarray:
        starts = np.zeros(len(self), dtype=bool)
        for s, _ in self.seq_ranges:
            starts[s] = True
        return starts


def make_examples(seqs, context_len: int = 64, ngram: int = 1, seed: int = 0, epoch: int = 0):
    """Examples of one epoch as ``(contexts [n, context_len], targets [n])`` in shuffled order."""
    ex = ExampleSet(seqs, context_len, ngram)
    if not len(ex):
        return np.zeros((0, context_len), np.uint8), np.zeros(0, np.int64)
    return ex.batch(ex.order(epoch, seed, streams=False))


class _Feed:
    """Per-epoch batch schedule for one dataset; streams keep their memory rows."""

    def __init__(self, ex: ExampleSet, model: GeneformerModel, cfg: TrainConfig):
        self.ex, self.model, self.cfg = ex, model, cfg
        self.streams = model.config.latent_array
        self.starts = ex.seq_starts()
        self.memory = None

    def schedule(self, epoch: int) -> list:
        idx = self.ex.order(epoch, self.cfg.seed, self.streams, self.cfg.max_examples)
        B = self.cfg.batch_size
        if not self.streams:
            return [idx[i:i + B] for i in range(0, idx.size, B)]
        chunks = np.array_split(idx, min(B, max(1, idx.size)))
        steps = max((c.size for c in chunks), default=0)
        self.memory = None
        return [np.array([c[t] for c in chunks if c.size > t]) for t in range(steps)]

    def inputs(self, rows: np.ndarray, t: int):
        ctx, tgt = self.ex.batch(rows)
        if not self.streams:
            return ctx, tgt, None
        m = self.model
        if self.memory is None:
            mem = m.initial_memory(rows.size)
        else:
            mem = self.memory[:rows.size].copy()
            mem[self.starts[rows]] = 0.0
        return ctx, tgt, mem

    def keep(self, memory, h_t, n: int):
        if self.streams:
            self.memory = self.model.next_memory(memory, h_t)


def train_step(model: GeneformerModel, opt: nx.RMSProp, ctx, tgt, memory, step: int):
    params = model.parameters()
    nx.zero_grad(params)
    with nx.Tape() as tape:
        logits, h_t = model.forward(ctx, memory, train=True, step=step)
        loss, bits = nx.cross_entropy(logits, tgt)
    grads = tape.backward(loss, params)
    opt.step(grads)
    return float(loss.data), bits, h_t.data


@dataclass
class TrainResult:
    best_blob: bytes
    best_bpb: float
    best_epoch: int
    history: list

    @property
    def model(self) -> GeneformerModel:
        return load_checkpoint(self.best_blob)


def _train(datasets: list, val_sets: list, model: GeneformerModel, cfg: TrainConfig,
           history_path=None, on_epoch=None) -> TrainResult:
    c = model.config
    feeds = [_Feed(ExampleSet(d, c.context_len, c.ngram), model, cfg) for d in datasets]
    for f in feeds:
        if not len(f.ex):
            raise TooShort("training set has no examples")
    opt = nx.RMSProp(model.parameters(), lr=cfg.lr, rho=cfg.rho, eps=cfg.eps)
    history, best = [], (math.inf, -1, save_checkpoint(model))
    t0 = time.perf_counter()
    step = 0
    out = open(history_path, "w") if history_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            plans = [f.schedule(epoch) for f in feeds]
            n_steps = max(len(p) for p in plans)
            losses, stopped = [], False
            for t in range(n_steps):
                parts = []
                for f, plan in zip(feeds, plans):
                    rows = plan[t % len(plan)]
                    if t >= len(plan) and t % len(plan) == 0:
                        f.memory = None  # shorter dataset wraps around
                    parts.append((f, rows) + f.inputs(rows, t))
                ctx = np.concatenate([p[2] for p in parts])
                tgt = np.concatenate([p[3] for p in parts])
                mem = None if parts[0][4] is None else np.concatenate([p[4] for p in parts])
                try:
                    loss, _, h_t = train_step(model, opt, ctx, tgt, mem, step)
                except NonFinite as e:
                    raise NonFinite(f"epoch {epoch} step {t}: {e}") from None
                if not math.isfinite(loss):
                    raise NonFinite(f"epoch {epoch} step {t}: loss is {loss}")
                off = 0
                for f, rows, *_ in parts:
                    n = rows.size
                    f.keep(None if mem is None else mem[off:off + n], h_t[off:off + n], n)
                    off += n
                losses.append(loss)
                step += 1
                if cfg.max_seconds and time.perf_counter() - t0 > cfg.max_seconds:
                    stopped = True
                    break
            rec = {"epoch": epoch, "steps": len(losses), "train_loss": float(np.mean(losses))}
            if epoch % cfg.eval_every == 0 or stopped or epoch == cfg.epochs:
                vals = [evaluate_bpb(model, v) for v in val_sets]
                rec["val_bpb"] = vals[0] if len(vals) == 1 else vals
                score = float(np.mean(vals))
                if score < best[0]:
                    best = (score, epoch, save_checkpoint(model))
            rec["seconds"] = round(time.perf_counter() - t0, 3)
            history.append(rec)
            log.info("epoch %d: %s", epoch, rec)
            if out:
                out.write(json.dumps(rec) + "\n")
                out.flush()
            if on_epoch:
                on_epoch(rec)
            if stopped:
                break
    finally:
        if out:
            out.close()
    return TrainResult(best[2], best[0], best[1], history)


def train(dataset, model: GeneformerModel, cfg: TrainConfig, val=None, history_path=None,
          on_epoch=None) -> TrainResult:
    """Fit ``model`` in place; returns the best-validation checkpoint and the history.

    ``dataset`` is a list of sequences/records, or a ``(train, val, test)``
    split; ``val`` defaults to the training set when no split is given.
    """
    if isinstance(dataset, tuple):
        dataset, val = dataset[0], dataset[1] if val is None else val
    val = val if val else dataset
    return _train([dataset], [val], model, cfg, history_path, on_epoch)


def hybrid_train(dataset_a, dataset_b, model: GeneformerModel, cfg: TrainConfig | None = None,
                 val_a=None, val_b=None, history_path=None) -> TrainResult:
    """Each step concatenates a batch from each dataset (batch dimension doubles)."""
    cfg = cfg or TrainConfig.hybrid()
    if not dataset_a or not dataset_b:
        raise ConfigError("hybrid training needs two non-empty datasets")
    return _train([dataset_a, dataset_b], [val_a or dataset_a, val_b or dataset_b], model, cfg,
                  history_path)


class _Scorer:
    def __init__(self, index, tokens):
        self.index = index
        self.tokens = tokens
        self.n_tokens = len(tokens)
        self.t = 0
        self.bits = 0.0
        self.session = None

    def step(self, row):
        tok = self.tokens[self.t]
        self.bits -= math.log2(float(row[tok]))
        self.session.advance(tok)
        self.t += 1


def evaluate_bpb(model, seqs, context_len: int | None = None, lanes: int | None = None) -> float:
    """Mean -log2 P(token) per predicted base, each sequence coded as one stream.

    ``model`` is an entropy model or a bare :class:`GeneformerModel`.  The
    first ``context_len`` bases of each sequence only seed the context.
    """
    from .pipeline import run_lanes

    if isinstance(model, GeneformerModel):
        model = GeneformerEntropyModel(model)
    if context_len is None:
        context_len = getattr(model, "context_len", 64)
    ngram = model.ngram
    jobs, frags = [], []
    for item in seqs:
        b = _bases(item)
        n = (b.size - context_len) // ngram if b.size > context_len else 0
        if n <= 0:
            continue
        toks = tokenize_array(b[context_len:context_len + n * ngram], ngram).tolist()
        frags.append(b[:context_len])
        jobs.append(_Scorer(len(jobs), toks))
    run_lanes(model, jobs, frags, lanes)
    n_bases = sum(j.n_tokens for j in jobs) * ngram
    return sum(j.bits for j in jobs) / n_bases if n_bases else 0.0


def write_history(history: list, path):
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
