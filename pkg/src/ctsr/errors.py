"""Exception types shared across the pipeline.

The CLI maps ``CtsrError`` subclasses to exit code 1 (user/state errors);
anything else escaping a subcommand is an internal error (exit code 2).
"""


class CtsrError(Exception):
    pass


class ConfigError(CtsrError, ValueError):
    pass


class PreconditionError(CtsrError, ValueError):
    pass


class FormatError(CtsrError, ValueError):
    pass


class StateError(CtsrError, RuntimeError):
    pass


class NumericError(CtsrError, FloatingPointError):
    pass
