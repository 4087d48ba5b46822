"""Exception hierarchy shared by every module."""


class SliceError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(SliceError, ValueError):
    """Operands have incompatible shapes."""


class DegenerateInputError(SliceError, ValueError):
    """Input is well-formed but carries no usable signal (zero matrix, r = 1, ...)."""


class NonFiniteError(SliceError, ValueError):
    """NaN or Inf where finite values are required."""


class SamplerExhausted(SliceError):
    """A without-replacement sampler ran out of examples."""


class NoPreviousTasks(SliceError):
    """Raised when a previous-task sampler is requested for the first task."""


class DivergenceError(SliceError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, task_id, step, value):
        self.task_id = task_id
        self.step = step
        self.value = value
        super().__init__(f"loss became {value} on task {task_id!r} at step {step}")


class BudgetExceeded(SliceError):
    """Exhaustive enumeration would exceed the configured subset budget."""

    def __init__(self, count, budget):
        self.count = count
        self.budget = budget
        super().__init__(
            f"{count} candidate subsets exceed the enumeration budget of {budget}; "
            "raise the budget or shrink the pool / subset size"
        )


class ConfigError(SliceError, ValueError):
    """Invalid run configuration; ``path`` points at the offending field."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)
