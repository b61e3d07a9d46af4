"""Exception hierarchy shared by all mixopt modules."""


class MixoptError(Exception):
    """Base class for all mixopt errors."""


class InvalidInputError(MixoptError, ValueError):
    """An argument violated a documented precondition."""


class NumericalFailureError(MixoptError, RuntimeError):
    """A numerical routine could not produce a trustworthy result."""


class OracleInvalidError(MixoptError, RuntimeError):
    """An oracle run is unusable (e.g. a retrain did not converge)."""


class ConfigError(MixoptError, ValueError):
    """A run configuration failed schema validation."""


class ManifestError(MixoptError, ValueError):
    """Base class for dataset-manifest problems."""


class MissingFileError(ManifestError):
    """Manifest or one of its referenced files does not exist."""


class ManifestSchemaError(ManifestError):
    """Manifest or a data file violates the documented schema."""


class DimensionMismatchError(ManifestError):
    """A data file's feature vectors do not match the declared dimension."""


class ReferenceOverlapError(ManifestError):
    """The reference set shares an example with a training domain."""
