"""Exception types shared across the package.

The CLI maps these onto its exit-code contract, so new failure modes
should reuse an existing class where one fits.
"""


class InvalidInputError(ValueError):
    """Input contains non-finite values or is otherwise unusable."""


class ShapeError(ValueError):
    """Array arguments do not conform in shape."""


class DegenerateVectorError(ValueError):
    """A vector with (near-)zero norm where a direction is required."""


class ConfigError(ValueError):
    """A configuration value violates its documented constraints."""


class DegeneratePoolingError(RuntimeError):
    """Attention pooling collapsed to a (near-)zero vector."""


class OptimizationDivergedError(RuntimeError):
    """An optimization loop produced a non-finite loss."""


class NumericalError(RuntimeError):
    """A numerical probe (e.g. finite differences) hit a non-finite value."""


class DecompositionParseError(ValueError):
    """An LLM reply did not contain a parseable numbered list."""


class LspUnavailableError(RuntimeError):
    """No decomposition could be obtained from the client or the cache."""


class TooLargeError(ValueError):
    """Problem size exceeds a brute-force enumeration guard."""


class SchemaValidationError(ValueError):
    """A file payload violates its schema.

    `pointer` is a JSON-pointer-like path to the offending field.
    """

    def __init__(self, message: str, pointer: str = ""):
        self.pointer = pointer
        super().__init__(f"{message} (at {pointer})" if pointer else message)


class EvalInputError(ValueError):
    """Evaluation inputs are unusable (e.g. ground truth is missing)."""
