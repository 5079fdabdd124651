"""Exception hierarchy shared by the amtnet modules."""
from __future__ import annotations

from typing import Iterable, Optional


class AmtError(Exception):
    """Base class for every error raised by amtnet."""


class InvalidInput(AmtError):
    pass


class InvalidCutoff(AmtError):
    pass


class DegenerateSignal(AmtError):
    pass


class SignalTooShort(AmtError):
    pass


class OutOfMappingRange(AmtError):
    pass


class UnmappedRecording(AmtError):
    def __init__(self, recording_id: int) -> None:
        super().__init__(f"recording {recording_id} is not listed in the split manifest")
        self.recording_id = recording_id


class IngestError(AmtError):
    def __init__(self, recording_id: Optional[int], reason: str) -> None:
        label = recording_id if recording_id is not None else "<unknown>"
        super().__init__(f"recording {label}: {reason}")
        self.recording_id = recording_id
        self.reason = reason


class ManifestError(AmtError):
    def __init__(self, line: Optional[int], reason: str, source: Optional[str] = None) -> None:
        if line is None:
            location = source or "<manifest>"
        else:
            location = f"{source}:{line}" if source else f"line {line}"
        super().__init__(f"{location}: {reason}")
        self.line = line
        self.reason = reason
        self.source = source


class ShapeError(AmtError):
    pass


class NumericalError(AmtError):
    pass


class UnsupportedOperation(AmtError):
    pass


class DegenerateEmbedding(AmtError):
    pass


class CacheFormatError(AmtError):
    pass


class ConfigError(AmtError):
    """Raised once with every problem found while validating a config."""

    def __init__(self, problems: Iterable[str]) -> None:
        self.problems = list(problems)
        listing = "\n".join(f" - {problem}" for problem in self.problems)
        super().__init__(f"invalid configuration:\n{listing}")
