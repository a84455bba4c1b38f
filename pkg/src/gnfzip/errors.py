"""Exception hierarchy shared by every layer of the codec."""


class GnfError(Exception):
    """Base class for all errors raised by gnfzip."""


# -- input data ------------------------------------------------------------

class InputError(GnfError):
    """Bad user data (FASTA, sequence, configuration)."""


class UnknownBase(InputError):
    def __init__(self, position, char):
        super().__init__(f"unknown base {char!r} at position {position}")
        self.position = position
        self.char = char


class EmptyFile(InputError):
    pass


class ContainsN(InputError):
    pass


class LengthMismatch(InputError):
    pass


class LengthNotMultiple(InputError):
    pass


class AllN(InputError):
    pass


class TooShort(InputError):
    pass


class BadContextLength(InputError):
    pass


class ShortContext(InputError):
    pass


class TokenOutOfRange(InputError):
    pass


class ConfigError(InputError):
    pass


# -- numerics --------------------------------------------------------------

class NumericsError(GnfError):
    pass


class ShapeMismatch(NumericsError):
    pass


class NonFinite(NumericsError):
    pass


class NotScalar(NumericsError):
    pass


class TargetOutOfRange(NumericsError):
    pass


# -- coding / container ----------------------------------------------------

class IntegrityError(GnfError):
    """The compressed data does not decode to what was encoded."""


class CorruptStream(IntegrityError):
    pass


class CrcMismatch(IntegrityError):
    pass


class BadArchive(IntegrityError):
    pass


class Mismatch(IntegrityError):
    def __init__(self, position, detail=""):
        msg = f"mismatch at base {position}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.position = position


class BadDistribution(GnfError):
    pass


class ModelMismatch(GnfError):
    pass


# -- checkpoints -----------------------------------------------------------

class CheckpointError(GnfError):
    pass


class BadMagic(CheckpointError):
    pass


class HashMismatch(CheckpointError):
    pass


class VersionUnsupported(CheckpointError):
    pass
