"""Exception hierarchy shared across the pipeline.

Every error raised for bad input data or a broken contract derives from
:class:`DataError`; the CLI maps those to exit code 2.
"""


class DataError(Exception):
    """Input data or a model file violates a documented contract."""


class ContractViolation(DataError):
    """A precondition of an operation was not met by its caller."""


class SchemaMismatch(DataError):
    """Feature vectors do not match the layout a model was trained on."""


# The feature layout is part of every serialized model.
FEATURE_SCHEMA_VERSION = 1
