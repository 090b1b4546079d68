"""Exception types shared across the package."""


class RulensError(Exception):
    """Base class for errors raised by this package."""


class CmapssFormatError(RulensError, ValueError):
    """A CMAPSS text file does not match the expected 26-column layout.

    Carries the offending line number (1-based) when known.
    """

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class DataIntegrityError(RulensError, ValueError):
    """Parsed data violates a structural invariant (cycle gaps, count
    mismatches, constant features, fingerprint mismatches)."""


class DivergenceError(RulensError, RuntimeError):
    """Training or gradient evaluation produced a non-finite loss.

    ``sample_index`` / ``epoch`` locate the failure when known.
    """

    def __init__(self, message, sample_index=None, epoch=None, member=None):
        super().__init__(message)
        self.sample_index = sample_index
        self.epoch = epoch
        self.member = member
