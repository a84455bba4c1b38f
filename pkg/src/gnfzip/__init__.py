"""Lossless DNA compression driven by a transformer entropy model."""
from .errors import GnfError
from .sequence_io import BaseSeq, FastaRecord, parse_fasta, read_fasta, write_fasta
from .grouping import GroupingConfig
from .baselines import OrderKEntropyModel, UniformModel
from .pipeline import Archive, compress, decompress, decompress_one, verify

__version__ = "0.1.0"
