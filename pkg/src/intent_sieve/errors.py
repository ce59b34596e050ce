from pathlib import Path
from typing import Optional, Union

import numpy as np


class IntentSieveError(Exception):
    """Base class of all errors raised by intent-sieve."""


class InvalidInput(IntentSieveError, ValueError):
    """Raised when an operation receives data outside its domain."""


class InvalidConfig(IntentSieveError, ValueError):
    """Raised when a configuration record is inconsistent."""


class ParseError(IntentSieveError, ValueError):
    """Raised when a text file can't be parsed, pointing to the offending line."""

    def __init__(
        self,
        message: str,
        *,
        path: Optional[Union[str, Path]] = None,
        lineno: Optional[int] = None,
    ):
        self.path = path
        self.lineno = lineno
        location = ""
        if path is not None:
            location = f"{path!s}:"
        if lineno is not None:
            location += f"{lineno}:"
        super().__init__(f"{location} {message}" if location else message)


class UnknownLabel(ParseError):
    """Raised when a label name or code is not part of the label alphabet."""


class DimensionMismatch(ParseError):
    """Raised when a vector file row has a different dimension than expected."""


class ShapeError(IntentSieveError, ValueError):
    """Raised when tensor shapes don't fit an operation."""


class TrainingDiverged(IntentSieveError, RuntimeError):
    """Raised when a gradient or loss becomes NaN or infinite."""


class CheckpointError(IntentSieveError, ValueError):
    """Raised when a checkpoint file is malformed or doesn't match the model."""


class AudioRequired(IntentSieveError, RuntimeError):
    """Raised when the sieve routes an utterance to the audio stage but no audio is given."""

    def __init__(self, fci_probs: np.ndarray, message: Optional[str] = None):
        self.fci_probs = np.asarray(fci_probs)
        super().__init__(
            message or "Utterance is intonation-dependent but no audio was provided"
        )
