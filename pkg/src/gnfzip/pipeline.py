"""End-to-end codec: grouping, model-driven range coding and the .gnf container.

Archive layout (little-endian, varints are unsigned LEB128)::

    "GNF1" | u16 version | u8 flags | u8 order | 32-byte model fingerprint
    varint group_len, context_len, ngram, byte_group
    varint sequence count | u32 crc32 of all base codes, records in order
    varint len + zlib(record headers joined by '\\n')
    per sequence: varint length | varint run count | runs as (gap, length) varints
    per group:    2-bit packed initial fragment | varint payload bytes
    u32 crc32 of everything above
    payloads, concatenated in group order

flags bit 0 is the N mode (0: N stripped into the side channel, 1: N coded
in-stream through an escape symbol), bits 1-3 the model kind.  Group count
and fragment sizes follow from the lengths and the grouping config, so they
are not stored.
"""
from __future__ import annotations

import struct
import time
import zlib
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .baselines import OrderKEntropyModel, UniformModel
from .coder import RangeDecoder, RangeEncoder, quantize_probs, uniform_table
from .entropy import EntropyModel
from .errors import BadArchive, ConfigError, CrcMismatch, Mismatch, ModelMismatch
from .grouping import (GroupingConfig, NSideChannel, group_spans, n_runs, reinsert_n, strip_n,
                       tokenize_array)
from .sequence_io import N, BaseSeq, FastaRecord, pack_2bit, unpack_2bit

MAGIC = b"GNF1"
VERSION = 1
N_SIDE, N_STREAM = "side-channel", "in-stream"
MODEL_KINDS = {"uniform": 0, "order-k": 1, "geneformer": 2}
KIND_NAMES = {v: k for k, v in MODEL_KINDS.items()}


# -- varints -------------------------------------------------------------------

def put_varint(out: bytearray, value: int):
    if value < 0:
        raise ValueError("varints are unsigned")
    while value >= 0x80:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    out.append(value)


def get_varint(data: bytes, pos: int) -> tuple[int, int]:
    value = shift = 0
    while True:
        if pos >= len(data):
            raise BadArchive("truncated varint")
        b = data[pos]
        pos += 1
        value |= (b & 0x7F) << shift
        if b < 0x80:
            return value, pos
        shift += 7


# -- container ------------------------------------------------------------------

@dataclass
class SequenceEntry:
    header: str
    length: int
    side: NSideChannel

    def stream_length(self, n_mode: str) -> int:
        """Bases that go through grouping (N runs removed in side-channel mode)."""
        return self.length - self.side.count if n_mode == N_SIDE else self.length


@dataclass
class ArchiveHeader:
    n_mode: str
    model_kind: str
    order: int
    fingerprint: bytes
    grouping: GroupingConfig
    sequences: list = field(default_factory=list)
    crc: int = 0
    fragments: list = field(default_factory=list)  # packed bytes per group
    payload_sizes: list = field(default_factory=list)

    def spans(self):
        """(sequence index, start, fragment len, body len) for every group, in order."""
        out = []
        for i, s in enumerate(self.sequences):
            for start, frag, body in group_spans(s.stream_length(self.n_mode), self.grouping):
                out.append((i, start, frag, body))
        return out

    @property
    def n_bases(self) -> int:
        return sum(s.length for s in self.sequences)

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        flags = (1 if self.n_mode == N_STREAM else 0) | (MODEL_KINDS[self.model_kind] << 1)
        out += struct.pack("<HBB", VERSION, flags, self.order)
        if len(self.fingerprint) != 32:
            raise ValueError("fingerprint must be 32 bytes")
        out += self.fingerprint
        g = self.grouping
        for v in (g.group_len, g.context_len, g.ngram, g.byte_group, len(self.sequences)):
            put_varint(out, v)
        out += struct.pack("<I", self.crc)
        names = zlib.compress("\n".join(s.header for s in self.sequences).encode(), 9)
        put_varint(out, len(names))
        out += names
        for s in self.sequences:
            put_varint(out, s.length)
            put_varint(out, len(s.side.runs))
            prev = 0
            for start, run in s.side.runs:
                put_varint(out, start - prev)
                put_varint(out, run)
                prev = start + run
        if len(self.fragments) != len(self.payload_sizes):
            raise ValueError("one payload size per fragment")
        for frag, size in zip(self.fragments, self.payload_sizes):
            out += frag
            put_varint(out, size)
        out += struct.pack("<I", zlib.crc32(out))
        return bytes(out)

    @classmethod
    def parse(cls, data: bytes) -> tuple["ArchiveHeader", int]:
        if data[:4] != MAGIC:
            raise BadArchive("not a GNF archive (bad magic)")
        if len(data) < 40:
            raise BadArchive("truncated archive")
        version, flags, order = struct.unpack_from("<HBB", data, 4)
        if version != VERSION:
            raise BadArchive(f"unsupported archive version {version}")
        kind = KIND_NAMES.get(flags >> 1)
        if kind is None:
            raise BadArchive(f"unknown model kind code {flags >> 1}")
        fp = bytes(data[8:40])
        pos = 40
        vals = []
        for _ in range(5):
            v, pos = get_varint(data, pos)
            vals.append(v)
        try:
            grouping = GroupingConfig(*vals[:4])
        except ConfigError as e:
            raise BadArchive(f"invalid grouping config: {e}") from None
        nseq = vals[4]
        if pos + 4 > len(data):
            raise BadArchive("truncated archive")
        (content_crc,) = struct.unpack_from("<I", data, pos)
        pos += 4
        nlen, pos = get_varint(data, pos)
        try:
            names = zlib.decompress(data[pos:pos + nlen]).decode().split("\n")
        except (zlib.error, UnicodeDecodeError):
            raise BadArchive("corrupt record-name block") from None
        pos += nlen
        if len(names) != max(nseq, 1):
            raise BadArchive("record-name count disagrees with sequence count")
        seqs = []
        for i in range(nseq):
            length, pos = get_varint(data, pos)
            nruns, pos = get_varint(data, pos)
            runs, prev = [], 0
            for _ in range(nruns):
                gap, pos = get_varint(data, pos)
                run, pos = get_varint(data, pos)
                runs.append((prev + gap, run))
                prev += gap + run
            if prev > length:
                raise BadArchive("N runs extend past the sequence")
            seqs.append(SequenceEntry(names[i], length, NSideChannel(runs)))
        hdr = cls(N_STREAM if flags & 1 else N_SIDE, kind, order, fp, grouping, seqs, content_crc)
        for _, _, frag, _ in hdr.spans():
            nbytes = (frag + 3) // 4
            hdr.fragments.append(bytes(data[pos:pos + nbytes]))
            pos += nbytes
            size, pos = get_varint(data, pos)
            hdr.payload_sizes.append(size)
        if pos + 4 > len(data):
            raise BadArchive("truncated archive header")
        (crc,) = struct.unpack_from("<I", data, pos)
        if zlib.crc32(data[:pos]) != crc:
            raise CrcMismatch("archive header checksum mismatch")
        return hdr, pos + 4


@dataclass
class ArchiveStats:
    n_bases: int
    total_bytes: int
    header_bits: int
    fragment_bits: int
    payload_bits: int
    group_sizes: list
    encode_seconds: float = 0.0

    @property
    def total_bits(self) -> int:
        return self.total_bytes * 8

    @property
    def bpb(self) -> float:
        return self.total_bits / self.n_bases if self.n_bases else 0.0

    @property
    def fragment_bpb(self) -> float:
        return self.fragment_bits / self.n_bases if self.n_bases else 0.0

    def as_dict(self) -> dict:
        return {"bases": self.n_bases, "bytes": self.total_bytes, "bpb": self.bpb,
                "header_bits": self.header_bits, "fragment_bits": self.fragment_bits,
                "payload_bits": self.payload_bits, "groups": len(self.group_sizes),
                "seconds": self.encode_seconds}


@dataclass
class Archive:
    header: ArchiveHeader
    payloads: list

    def to_bytes(self) -> bytes:
        return self.header.to_bytes() + b"".join(self.payloads)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Archive":
        data = bytes(data)
        hdr, pos = ArchiveHeader.parse(data)
        if pos + sum(hdr.payload_sizes) != len(data):
            raise BadArchive("payload sizes do not add up to the archive size")
        payloads = []
        for size in hdr.payload_sizes:
            payloads.append(data[pos:pos + size])
            pos += size
        return cls(hdr, payloads)

    def stats(self, seconds: float = 0.0) -> ArchiveStats:
        frag_bytes = sum(len(f) for f in self.header.fragments)
        payload_bytes = sum(len(p) for p in self.payloads)
        total = len(self.header.to_bytes()) + payload_bytes
        return ArchiveStats(self.header.n_bases, total, (total - frag_bytes - payload_bytes) * 8,
                            frag_bytes * 8, payload_bytes * 8, [len(p) for p in self.payloads], seconds)


# -- per-group coding -------------------------------------------------------------

def _escape_table(row, esc: int, seen: int):
    # adaptive escape mass (KT estimate), the model keeps the rest
    eps = (esc + 0.5) / (seen + 1)
    keep = 1.0 - eps
    return quantize_probs([float(p) * keep for p in row] + [eps])


class _GroupJob:
    """Coding state of one group: session, coder and escape statistics."""

    def __init__(self, index, n_tokens, stream_mode):
        self.index = index
        self.n_tokens = n_tokens
        self.t = 0
        self.session = None
        self.stream = stream_mode
        self.esc = 0
        self.table_log = None
        self.table_log_limit = 0

    def table(self, row):
        if self.stream:
            tab = _escape_table(row, self.esc, self.t)
        else:
            tab = quantize_probs(row)
        if self.table_log is not None and len(self.table_log) < self.table_log_limit:
            self.table_log.append((self.index, self.t, tab.freqs))
        return tab


class _EncodeJob(_GroupJob):
    def __init__(self, index, body, ngram, stream_mode):
        super().__init__(index, body.size // ngram, stream_mode)
        self.body = body
        self.ngram = ngram
        cut = self.n_tokens * ngram
        clean = np.where(body[:cut] == N, 0, body[:cut])
        self.tokens = tokenize_array(clean, ngram).tolist()
        self.has_n = (body[:cut] == N).reshape(-1, ngram).any(axis=1).tolist() if stream_mode else None
        self.enc = RangeEncoder()

    def step(self, row):
        t, tab = self.t, self.table(row)
        tok = self.tokens[t]
        if self.stream and self.has_n[t]:
            self.enc.encode_symbol(tab, tab.nsym - 1)
            u5 = uniform_table(5)
            for b in self.body[t * self.ngram:(t + 1) * self.ngram]:
                self.enc.encode_symbol(u5, int(b))
            self.esc += 1
        else:
            self.enc.encode_symbol(tab, tok)
        self.session.advance(tok)
        self.t = t + 1

    def finish(self) -> bytes:
        tail = self.body[self.n_tokens * self.ngram:]
        tab = uniform_table(5 if self.stream else 4)
        for b in tail:
            self.enc.encode_symbol(tab, int(b))
        return self.enc.finalize()


class _DecodeJob(_GroupJob):
    def __init__(self, index, payload, body_len, ngram, stream_mode):
        super().__init__(index, body_len // ngram, stream_mode)
        self.dec = RangeDecoder(payload)
        self.ngram = ngram
        self.body_len = body_len
        self.out = []
        self.shifts = [2 * j for j in range(ngram - 1, -1, -1)]

    def step(self, row):
        tab = self.table(row)
        sym = self.dec.decode_symbol(tab)
        if self.stream and sym == tab.nsym - 1:
            u5 = uniform_table(5)
            bases = [self.dec.decode_symbol(u5) for _ in range(self.ngram)]
            self.out += bases
            tok = 0
            for b in bases:
                tok = tok * 4 + (0 if b == N else b)
            self.esc += 1
        else:
            tok = sym
            self.out += [(tok >> s) & 3 for s in self.shifts]
        self.session.advance(tok)
        self.t += 1

    def finish(self) -> np.ndarray:
        tab = uniform_table(5 if self.stream else 4)
        for _ in range(self.body_len - len(self.out)):
            self.out.append(self.dec.decode_symbol(tab))
        return np.array(self.out, dtype=np.uint8)


def run_lanes(model: EntropyModel, jobs: list, fragments: list, lanes: int | None = None):
    """Step groups through the model in lockstep batches of at most ``lanes``.

    Groups occupying the lanes at the same time are served by a single
    ``predict`` call per token position; a finished group hands its lane to
    the next waiting one.  The model guarantees per-row results independent
    of batch composition, so the coded bits do not depend on ``lanes``.
    """
    waiting = deque(j for j in jobs if j.n_tokens > 0)
    lanes = len(waiting) if not lanes else max(1, lanes)
    running = []
    while waiting or running:
        while waiting and len(running) < lanes:
            job = waiting.popleft()
            job.session = model.new_session(fragments[job.index])
            running.append(job)
        rows = model.predict([j.session for j in running])
        for job, row in zip(running, rows):
            job.step(row)
        running = [j for j in running if j.t < j.n_tokens]
    for job in jobs:
        job.session = None


# -- public API ---------------------------------------------------------------------

def _as_records(data) -> list[FastaRecord]:
    if isinstance(data, BaseSeq):
        return [FastaRecord(data.id, data)]
    if isinstance(data, FastaRecord):
        return [data]
    return list(data)


def _model_bases(frag: np.ndarray) -> np.ndarray:
    return np.where(frag == N, 0, frag).astype(np.uint8)


def check_model(model: EntropyModel, grouping: GroupingConfig):
    if model.vocab != grouping.vocab or model.ngram != grouping.ngram:
        raise ModelMismatch(f"model codes {model.ngram}-base tokens (vocab {model.vocab}), "
                            f"grouping expects ngram={grouping.ngram}")
    cfg = getattr(model, "config", None)
    if cfg is not None:
        if cfg.context_len != grouping.context_len or cfg.byte_group != grouping.byte_group:
            raise ModelMismatch("model context/byte-group differ from the grouping config")


def compress(data, model: EntropyModel, cfg: GroupingConfig, n_mode: str = N_SIDE,
             workers: int | None = None, table_log: list | None = None, table_log_limit: int = 1000) -> Archive:
    """Compress one sequence or a list of FASTA records into an :class:`Archive`."""
    if n_mode not in (N_SIDE, N_STREAM):
        raise ConfigError(f"unknown N mode {n_mode!r}")
    check_model(model, cfg)
    stream = n_mode == N_STREAM
    records = _as_records(data)
    entries, fragments, jobs = [], [], []
    crc = 0
    for rec in records:
        bases = rec.seq.bases
        crc = zlib.crc32(np.ascontiguousarray(bases, dtype=np.uint8).tobytes(), crc)
        if stream:
            coded = bases
            side = NSideChannel()
        else:
            coded, side = strip_n(bases)
        frag_runs = []
        for start, frag, body in group_spans(coded.size, cfg):
            fr = coded[start:start + frag]
            if stream:
                frag_runs += [(start + s, r) for s, r in n_runs(fr)]
            fragments.append(_model_bases(fr))
            job = _EncodeJob(len(jobs), coded[start + frag:start + frag + body], cfg.ngram, stream)
            job.table_log, job.table_log_limit = table_log, table_log_limit
            jobs.append(job)
        if stream:
            side = NSideChannel(frag_runs)
        entries.append(SequenceEntry(rec.header, int(bases.size), side))
    run_lanes(model, jobs, fragments, workers)
    payloads = [j.finish() for j in jobs]
    header = ArchiveHeader(n_mode, model.kind, getattr(model, "k", 0), model.fingerprint(), cfg,
                           entries, crc, [pack_2bit(f) for f in fragments], [len(p) for p in payloads])
    return Archive(header, payloads)


def model_from_header(header: ArchiveHeader) -> EntropyModel:
    """Rebuild a baseline model from the archive alone (neural models need a checkpoint)."""
    if header.model_kind == "uniform":
        return UniformModel(header.grouping.ngram)
    if header.model_kind == "order-k":
        return OrderKEntropyModel(header.order, header.grouping.ngram)
    raise ModelMismatch("archive was coded with a neural model; a checkpoint is required")


def decompress(archive, model: EntropyModel | None = None, workers: int | None = None,
               table_log: list | None = None, table_log_limit: int = 1000) -> list[FastaRecord]:
    if not isinstance(archive, Archive):
        archive = Archive.from_bytes(archive)
    hdr = archive.header
    if model is None:
        model = model_from_header(hdr)
    if model.kind != hdr.model_kind or model.fingerprint() != hdr.fingerprint:
        raise ModelMismatch("model fingerprint does not match the archive")
    check_model(model, hdr.grouping)
    stream = hdr.n_mode == N_STREAM
    spans = hdr.spans()
    fragments, jobs = [], []
    for gi, (si, start, frag, body) in enumerate(spans):
        fr = unpack_2bit(hdr.fragments[gi], frag).bases
        fragments.append(fr)
        job = _DecodeJob(gi, archive.payloads[gi], body, hdr.grouping.ngram, stream)
        job.table_log, job.table_log_limit = table_log, table_log_limit
        jobs.append(job)
    run_lanes(model, jobs, fragments, workers)
    bodies = [j.finish() for j in jobs]
    records = []
    crc = gi = 0
    for si, entry in enumerate(hdr.sequences):
        parts = []
        while gi < len(spans) and spans[gi][0] == si:
            parts += [fragments[gi], bodies[gi]]
            gi += 1
        coded = np.concatenate(parts).astype(np.uint8) if parts else np.zeros(0, np.uint8)
        if stream:
            bases = coded.copy()
            for start, run in entry.side.runs:
                bases[start:start + run] = N
        else:
            bases = reinsert_n(coded, entry.side)
        if bases.size != entry.length:
            raise CrcMismatch(f"sequence {entry.header!r} decoded to the wrong length")
        crc = zlib.crc32(bases.tobytes(), crc)
        records.append(FastaRecord(entry.header, BaseSeq(entry.header.split()[0] if entry.header else "", bases)))
    if crc != hdr.crc:
        raise CrcMismatch("decoded bases fail the content checksum")
    return records


def decompress_one(archive, model=None, workers=None) -> BaseSeq:
    recs = decompress(archive, model, workers)
    if len(recs) != 1:
        raise BadArchive(f"archive holds {len(recs)} sequences, expected one")
    return recs[0].seq


def first_difference(a: np.ndarray, b: np.ndarray) -> int | None:
    n = min(a.size, b.size)
    diff = np.flatnonzero(a[:n] != b[:n])
    if diff.size:
        return int(diff[0])
    return None if a.size == b.size else n


def verify(original, archive, model: EntropyModel | None = None, workers=None) -> dict:
    """Decode ``archive`` and compare against the original records."""
    if not isinstance(archive, Archive):
        archive = Archive.from_bytes(archive)
    t0 = time.perf_counter()
    decoded = decompress(archive, model, workers)
    seconds = time.perf_counter() - t0
    originals = _as_records(original)
    if len(decoded) != len(originals):
        raise Mismatch(0, f"{len(decoded)} records decoded, {len(originals)} expected")
    offset = 0
    for orig, dec in zip(originals, decoded):
        pos = first_difference(orig.seq.bases, dec.seq.bases)
        if pos is not None:
            raise Mismatch(offset + pos, f"record {orig.header!r}, base {pos}")
        if orig.header != dec.header:
            raise Mismatch(offset, f"header {dec.header!r} != {orig.header!r}")
        offset += orig.seq.length
    st = archive.stats()
    return {"ok": True, "bpb": st.bpb, "bases": st.n_bases, "bytes": st.total_bytes,
            "group_sizes": st.group_sizes, "seconds": seconds}
