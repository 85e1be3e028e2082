"""
Exception types shared across the codec lab.

Every class derives from a builtin so callers catching ValueError/RuntimeError/OSError
keep working. main.py maps them onto process exit codes.
"""


class DimensionError(ValueError):
    """Tensor shapes violate an operation's contract"""


class ConfigError(ValueError):
    """Invalid experiment configuration (heads, group boundaries, lambda, ...)"""


class UsageError(RuntimeError):
    """API misuse, e.g. backward on a non-scalar root"""


class InputError(ValueError):
    """Input data does not satisfy a precondition (too few frames, malformed files)"""


class MetricUndefinedError(ValueError):
    """A metric cannot be computed for the given inputs"""


class BitstreamError(RuntimeError):
    """Corrupted or truncated bitstream"""


class CodecIntegrityError(RuntimeError):
    """Decoder output differs from the encoder-side reconstruction"""


class SchemaVersionError(ValueError):
    """Results file written with another schema version"""


class ResultsIOError(OSError):
    """Reading or writing a results/checkpoint file failed"""

    def __init__(self, path, message: str):
        super().__init__(f"{message} [{path}]")
        self.path = str(path)


class ReferenceUnavailable(Exception):
    """The stored local context of the previous frame does not exist yet"""
