"""Exception hierarchy shared by all subpackages."""


class VPRError(Exception):
    """Base class for every error raised by this package."""


class SchemaError(VPRError, ValueError):
    """A manifest, config or scheme document does not match its schema."""


class LoadError(VPRError, OSError):
    """A referenced file is missing or unreadable."""


class ConfigError(VPRError, ValueError):
    """Inconsistent or incomplete configuration."""


class EncodeError(VPRError, ValueError):
    pass


class DecodeError(VPRError, ValueError):
    pass


class ModelError(VPRError, ValueError):
    pass


class DataError(VPRError, ValueError):
    pass


class ProvenanceError(VPRError):
    """A cached artifact was produced from different inputs than expected."""


class FormatError(VPRError, ValueError):
    """A binary container has a corrupt or unsupported header."""


class LossError(VPRError, ValueError):
    pass


class TrainingError(VPRError):
    pass


class QueryError(VPRError, ValueError):
    pass


class EvaluationError(VPRError):
    pass
