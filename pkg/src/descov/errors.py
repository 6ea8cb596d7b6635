"""Exception types shared across the package."""


class DescovError(Exception):
    """Base class for package-specific errors."""


class ConfigurationError(DescovError):
    """Invalid configuration object or argument combination."""


class ManifestError(DescovError):
    """Manifest file violates the expected schema."""


class DiagnosticError(DescovError):
    """A metric or check cannot be computed from the given inputs."""


class TrainingError(DescovError):
    """Optimization diverged or cannot proceed."""
