class FedPromptError(Exception):
    """Base error. ``exit_code`` and ``category`` drive the CLI error mapping."""

    exit_code = 1
    category = "internal"


class ConfigError(FedPromptError, ValueError):
    exit_code = 2
    category = "config"


class ShapeMismatchError(ConfigError):
    """A tensor does not have the shape the configuration implies."""


class NumericalError(FedPromptError, ArithmeticError):
    exit_code = 3
    category = "numerical"


class StorageError(FedPromptError, OSError):
    exit_code = 4
    category = "io"


class ProtocolError(FedPromptError, RuntimeError):
    exit_code = 5
    category = "protocol"
