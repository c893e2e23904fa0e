# cs_errors.py - Error taxonomy shared by every helper module.
"""
Exceptions raised by the helpers. The run command treats all of them as expected
failures (exit code 1).
"""
from django.core.exceptions import ImproperlyConfigured, ValidationError


class ConfigurationError(ImproperlyConfigured):
    """Invalid configuration values (dimensions, variants, modes)."""


class DatasetParseError(ValidationError):
    """A dataset or concept file is missing or unreadable.

    Args:
        path: The offending file.
        reason: What went wrong with it.
    """

    def __init__(self, path, reason: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {reason}")


class ConceptLookupError(LookupError):
    """An image id has no entry in a scripted concept source."""

    def __init__(self, image_id: str, source: str = ''):
        self.image_id = image_id
        suffix = f" in {source}" if source else ''
        super().__init__(f"No concepts for image '{image_id}'{suffix}")


class ProviderError(RuntimeError):
    """A live concept adapter could not be reached or answered garbage."""


class NumericalError(ArithmeticError):
    """Non-finite or degenerate values reached a numerical routine."""

    def __init__(self, message: str, component: str = ''):
        self.component = component
        super().__init__(message)


class DegenerateSoftmaxError(NumericalError):
    """An attention row has every key masked out."""
