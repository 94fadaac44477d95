"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration; ``path`` locates the offending field."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class NumericalError(RuntimeError):
    """A simulation produced non-finite values."""

    def __init__(self, message: str, step: int | None = None, time: float | None = None):
        self.step = step
        self.time = time
        where = []
        if step is not None:
            where.append(f"step {step}")
        if time is not None:
            where.append(f"t={time:.6g}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
