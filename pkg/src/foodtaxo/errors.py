"""Exception types raised across the package."""


class FoodTaxoError(Exception):
    """Base class for all package errors."""


class FormatError(FoodTaxoError, ValueError):
    """Input file or stream is not well-formed."""


class IntegrityError(FormatError):
    """Taxonomy content violates a structural invariant.

    ``label`` names the first offending label; ``issues`` lists every
    violation found.
    """

    def __init__(self, label, issues=None):
        self.label = label
        self.issues = list(issues) if issues else [f"{label}"]
        super().__init__(label)


class UnknownLabel(FoodTaxoError, LookupError):
    pass


class InvalidContext(FoodTaxoError, ValueError):
    """Upstream decisions are missing, not in the taxonomy, or inconsistent."""


class ParseFailure(FoodTaxoError, ValueError):
    """Model output does not follow the strict JSON schema."""


class ConfigError(FoodTaxoError, ValueError):
    pass


class TransportError(FoodTaxoError):
    """Network-level failure talking to a model backend."""


class BackendRefusal(FoodTaxoError):
    """The provider rejected the request (policy or content filter)."""


class DecodeError(FoodTaxoError, ValueError):
    """Image bytes could not be decoded as a supported raster format."""


class EmptyDataset(FoodTaxoError, ValueError):
    pass


class EmptySamples(FoodTaxoError, ValueError):
    pass


class IdMismatch(FoodTaxoError, ValueError):
    """Prediction and annotation image ids do not align."""
