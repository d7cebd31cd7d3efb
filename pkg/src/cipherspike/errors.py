"""Typed error taxonomy.

Two families matter for the CLI exit-code contract: configuration/format
problems (exit 2) and violations of the homomorphic-evaluation contract
(exit 3).  Everything else is a plain bug and may propagate.
"""


class CipherSpikeError(Exception):
    """Base class for all package errors."""


class ValidationError(CipherSpikeError):
    """Bad user input: network config, CLI flags, shape mismatches."""


class FormatError(ValidationError):
    """Malformed on-disk artifact (IDX, frame container, weights CSV, keys)."""


class HeContractError(CipherSpikeError):
    """The evaluation would violate the homomorphic computation contract."""


class LevelExhaustedError(HeContractError):
    """An operation needs more multiplicative levels than remain."""

    def __init__(self, op: str, have: int, need: int):
        self.op, self.have, self.need = op, have, need
        super().__init__(f"{op}: level budget exhausted (have {have}, need {need})")


class MissingRotationKeyError(HeContractError):
    """A rotation was requested whose Galois key was never generated."""

    def __init__(self, index: int):
        self.index = index
        super().__init__(f"no rotation key for slot offset {index}")


class CapacityError(HeContractError):
    """A layer's packed output does not fit in the available slots."""

    def __init__(self, layer: str, needed: int, slots: int):
        self.layer, self.needed, self.slots = layer, needed, slots
        super().__init__(f"layer {layer!r} needs {needed} slots, only {slots} available")


class ScaleMismatchError(HeContractError):
    """Operands disagree about encoding scale or scale domain."""


class BasisMismatchError(CipherSpikeError):
    """Polynomials from different RNS bases (or domains) were combined."""


class KeyFormatError(FormatError):
    """Serialized key/ciphertext blob failed magic or digest checks."""
