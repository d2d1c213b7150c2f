"""Exception types shared across the package."""


class FlowcleanError(Exception):
    """Base class for all flowclean errors."""


class MalformedCapture(FlowcleanError):
    """Capture file has a bad magic number or a truncated global header."""


class SchemaMismatch(FlowcleanError):
    """A tabular input file does not carry the expected header."""


class EmptyFlow(FlowcleanError):
    """Feature extraction was asked to process a flow with zero packets."""


class TooFewRows(FlowcleanError):
    """An operation needs more rows than the matrix provides."""


class ShapeMismatch(FlowcleanError):
    """Matrix, assignment, and centroid shapes do not agree."""


class ParseError(FlowcleanError):
    """A rule, scenario, or config file failed to parse.

    Carries the 1-based line number of the offending line.
    """

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class AppTooSmall(FlowcleanError):
    """Too few flows survive DPI for an app to be clustered."""


class LabelTooSmall(FlowcleanError):
    """A class label has too few flows to split into train and test."""


class SingleClass(FlowcleanError):
    """Training requires at least two distinct class labels."""


class EmptyTest(FlowcleanError):
    """Evaluation requires a non-empty test set."""


class InvalidSpec(FlowcleanError):
    """A synthetic scenario specification is malformed or unsatisfiable."""
