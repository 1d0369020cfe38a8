"""Exception taxonomy shared by all osgate modules.

The CLI maps these onto exit codes: configuration problems exit 2,
data/container problems exit 3, numerical failures exit 4.
"""


class OsgateError(Exception):
    """Base class for all errors raised by osgate."""


class DataError(OsgateError):
    """Base class for container / record problems (CLI exit code 3)."""


class DataFormatError(DataError):
    """Container bytes are not parseable (bad magic, version, truncation)."""


class SchemaError(DataError):
    """A record contradicts the dataset manifest (e.g. wrong vector length)."""


class ValidationError(DataError):
    """A stored value violates a type invariant; message carries the record index."""


class CompletenessError(DataError):
    """A model set does not cover every declared class."""


class ConfigurationError(OsgateError):
    """Caller supplied an unusable configuration (CLI exit code 2)."""


class FitError(OsgateError):
    """A numerical fit could not produce a valid model (CLI exit code 4)."""


class MetricUndefinedError(OsgateError):
    """A metric has no defined value on the given inputs (e.g. empty score set)."""
