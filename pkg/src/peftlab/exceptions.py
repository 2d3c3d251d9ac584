"""Exception types raised across the package."""


class PeftLabError(Exception):
    """Base class for package errors."""


class DimensionError(PeftLabError, ValueError):
    """Tensor shapes do not fit the operation."""


class GraphError(PeftLabError, RuntimeError):
    """Misuse of the differentiation graph (double backward, non-scalar seed)."""


class ConfigError(PeftLabError, ValueError):
    """Invalid model, training or experiment configuration."""


class InstrumentationError(PeftLabError, RuntimeError):
    """A tuning method cannot be applied to the model as requested."""


class MethodSpecError(PeftLabError, ValueError):
    """A method string does not follow the method grammar."""


class UnreachableBudgetError(PeftLabError, ValueError):
    """No setting of an adjustable method family reaches the requested budget."""


class AlignmentError(PeftLabError, ValueError):
    """Parallel files disagree in line count."""


class CorpusEncodingError(PeftLabError, ValueError):
    """A corpus file is not valid UTF-8."""


class DegenerateInputError(PeftLabError, ValueError):
    """Statistic undefined for the given input (zero variance, zero baseline)."""


class TrainingError(PeftLabError, RuntimeError):
    """Training diverged or could not start."""
