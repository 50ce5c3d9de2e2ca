"""Exception types shared across the toolkit."""


class ForgeShieldError(Exception):
    """Base class for toolkit-specific failures."""


class ConfigurationError(ForgeShieldError):
    """A model, generator, or run configuration is invalid or inconsistent."""


class CapabilityError(ForgeShieldError):
    """An operation was requested that the supplied model cannot support,
    e.g. a gradient-based attack against a non-differentiable forward."""


class MissingArtifactError(ForgeShieldError):
    """An upstream artifact (manifest, checkpoint, variant file) is absent."""

    def __init__(self, path, what="artifact"):
        self.path = str(path)
        super().__init__(f"missing {what}: {self.path}")
