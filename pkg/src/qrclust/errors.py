"""Exception hierarchy.

Configuration and input problems (bad schema, malformed files, invalid
parameters) are kept distinct from numerical/runtime failures so the CLI
can map them to different exit codes.
"""


class QrclustError(Exception):
    """Base class for all package errors."""


class ConfigError(QrclustError):
    """Invalid configuration: bad option value, unknown key, broken schema."""


class SchemaError(ConfigError):
    """Column schema does not match the data file."""


class ParseError(ConfigError):
    """A cell could not be parsed; message carries the row index."""


class EmptyInputError(ConfigError):
    """Input file contains no data rows."""


class DataError(QrclustError):
    """Structurally invalid dataset (shape, finiteness, cluster layout)."""


class SingularDesignError(QrclustError):
    """Design matrix is rank deficient where a full-rank fit is required."""


class SolverError(QrclustError):
    """An optimizer failed to reach its convergence criterion."""


class UnsupportedModelError(QrclustError):
    """Requested combination is outside the implemented model family."""


class UnreliableRunError(QrclustError):
    """Too many bootstrap replicates failed for the run to be trusted.

    Carries the partial run so callers can inspect what did complete.
    """

    def __init__(self, message, run=None):
        super().__init__(message)
        self.run = run
