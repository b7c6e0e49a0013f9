class InputError(ValueError):
    """Invalid arguments passed to a library operation."""


class ConfigError(InputError):
    """Invalid experiment configuration. ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class InvariantError(RuntimeError):
    """A runtime invariant of the protocol or the oracles was breached."""
