class GLTError(Exception):
    pass


class ShapeError(GLTError, ValueError):
    pass


class ConfigError(GLTError, ValueError):
    pass


class ContractError(GLTError, ValueError):
    """A precondition of an operation was violated by its caller."""


class DivergenceError(GLTError, RuntimeError):
    """Training produced a non-finite loss."""
