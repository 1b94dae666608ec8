"""Exception types raised by the library."""


class InterpoleError(Exception):
    """Base class for library errors."""


class ZeroLikelihood(InterpoleError):
    """An observation has (numerically) zero probability under the model."""

    def __init__(self, message="observation has zero likelihood", step=None, trajectory=None):
        self.step = step
        self.trajectory = trajectory
        parts = [message]
        if trajectory is not None:
            parts.append(f"trajectory={trajectory}")
        if step is not None:
            parts.append(f"step={step}")
        super().__init__(", ".join(parts))


class NonFiniteValue(InterpoleError):
    """A log-likelihood, objective or gradient evaluated to inf/nan."""

    def __init__(self, message, iteration=None, block=None):
        self.iteration = iteration
        self.block = block
        parts = [message]
        if iteration is not None:
            parts.append(f"iteration={iteration}")
        if block is not None:
            parts.append(f"block={block}")
        super().__init__(", ".join(parts))


class UnknownEnvironment(InterpoleError):
    pass


class UnsupportedDimension(InterpoleError):
    pass
