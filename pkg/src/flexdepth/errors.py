"""Exception types shared across modules."""


class ConfigError(ValueError):
    """A requested setting is outside what the artifact was built/configured for."""


class IncompatibleCheckpointError(ValueError):
    """Checkpoints disagree in config or parameter shapes."""
