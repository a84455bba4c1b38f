"""FASTA parsing/writing, base codes and 2-bit packing.

Bases are held as ``uint8`` numpy arrays using the fixed mapping
A=0, C=1, G=2, T=3, N=4.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ContainsN, EmptyFile, InputError, LengthMismatch, UnknownBase

A, C, G, T, N = 0, 1, 2, 3, 4
ALPHABET = "ACGTN"
LINE_WIDTH = 70

_LUT = np.full(256, 255, dtype=np.uint8)
for _code, _ch in enumerate(ALPHABET):
    _LUT[ord(_ch)] = _code
    _LUT[ord(_ch.lower())] = _code
_WS = np.zeros(256, dtype=bool)
for _ch in b" \t\r\n\v\f":
    _WS[_ch] = True
_CHARS = np.frombuffer(ALPHABET.encode(), dtype=np.uint8)


@dataclass
class BaseSeq:
    """A validated base sequence with an identifier."""

    id: str
    bases: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.bases = np.asarray(self.bases, dtype=np.uint8)
        if self.bases.ndim != 1:
            raise ValueError("bases must be one-dimensional")
        if self.bases.size and int(self.bases.max()) > N:
            raise ValueError("base code out of range")

    @property
    def length(self) -> int:
        return int(self.bases.size)

    def __len__(self):
        return self.length

    def __str__(self):
        return decode_bases(self.bases)

    def __eq__(self, other):
        if not isinstance(other, BaseSeq):
            return NotImplemented
        return self.id == other.id and np.array_equal(self.bases, other.bases)

    @classmethod
    def from_str(cls, text: str, id: str = "seq") -> "BaseSeq":
        return cls(id, encode_bases(text))


@dataclass
class FastaRecord:
    header: str
    seq: BaseSeq

    def __post_init__(self):
        if "\n" in self.header or "\r" in self.header:
            raise ValueError("FASTA header may not contain a newline")


def encode_bases(text: str | bytes, offset: int = 0) -> np.ndarray:
    """Map base letters (any case) to codes. Whitespace is skipped."""
    raw = np.frombuffer(text.encode() if isinstance(text, str) else text, dtype=np.uint8)
    keep = ~_WS[raw]
    codes = _LUT[raw]
    bad = np.flatnonzero(keep & (codes == 255))
    if bad.size:
        pos = int(bad[0])
        # position counted in bases, not raw characters
        base_pos = offset + int(np.count_nonzero(keep[:pos]))
        raise UnknownBase(base_pos, chr(raw[pos]))
    return codes[keep]


def decode_bases(codes: np.ndarray) -> str:
    return _CHARS[np.asarray(codes, dtype=np.uint8)].tobytes().decode()


def parse_fasta(data: bytes | str) -> list[FastaRecord]:
    """Parse FASTA text into records; line wrapping and case are not preserved."""
    if isinstance(data, str):
        data = data.encode()
    records: list[FastaRecord] = []
    header = None
    chunks: list[bytes] = []

    def flush():
        text = b"".join(chunks)
        bases = encode_bases(text)
        records.append(FastaRecord(header, BaseSeq(header.split()[0] if header.strip() else "", bases)))

    for line in data.splitlines():
        if line.startswith(b">"):
            if header is not None:
                flush()
            header = line[1:].decode().strip()
            chunks = []
        elif header is None:
            if line.strip():
                raise InputError("sequence data before the first '>' header")
        else:
            chunks.append(line)
    if header is not None:
        flush()
    if not records:
        raise EmptyFile("no FASTA records found")
    return records


def write_fasta(records: Iterable[FastaRecord], width: int = LINE_WIDTH) -> bytes:
    out = []
    for rec in records:
        out.append(f">{rec.header}\n")
        s = str(rec.seq)
        for i in range(0, len(s), width):
            out.append(s[i:i + width] + "\n")
    return "".join(out).encode()


def read_fasta(path) -> list[FastaRecord]:
    with open(path, "rb") as fh:
        return parse_fasta(fh.read())


def pack_2bit(frag) -> bytes:
    """Pack N-free bases four to a byte, first base in the high bits."""
    codes = frag.bases if isinstance(frag, BaseSeq) else np.asarray(frag, dtype=np.uint8)
    if codes.size and int(codes.max()) > T:
        raise ContainsN("2-bit packing requires an N-free fragment")
    n = codes.size
    padded = np.zeros(4 * math.ceil(n / 4), dtype=np.uint8)
    padded[:n] = codes
    q = padded.reshape(-1, 4)
    packed = (q[:, 0] << 6) | (q[:, 1] << 4) | (q[:, 2] << 2) | q[:, 3]
    return packed.astype(np.uint8).tobytes()


def unpack_2bit(data: bytes, length: int, id: str = "") -> BaseSeq:
    if len(data) != math.ceil(length / 4):
        raise LengthMismatch(f"{len(data)} bytes cannot hold exactly {length} bases")
    raw = np.frombuffer(data, dtype=np.uint8)
    out = np.empty((raw.size, 4), dtype=np.uint8)
    out[:, 0] = raw >> 6
    out[:, 1] = (raw >> 4) & 3
    out[:, 2] = (raw >> 2) & 3
    out[:, 3] = raw & 3
    return BaseSeq(id, out.reshape(-1)[:length])


def split_dataset(records: list, ratios=(0.70, 0.20, 0.10), seed: int = 0):
    """Seeded shuffle into (train, val, test); rounding remainder goes to train."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    n = len(records)
    order = np.random.default_rng(seed).permutation(n)
    n_val = math.floor(ratios[1] * n + 1e-9)
    n_test = math.floor(ratios[2] * n + 1e-9)
    n_train = n - n_val - n_test
    pick = [records[i] for i in order]
    return pick[:n_train], pick[n_train:n_train + n_val], pick[n_train + n_val:]
