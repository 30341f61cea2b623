"""Exception hierarchy shared by every falformer module."""


class FalformerError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FalformerError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(FalformerError, ArithmeticError):
    """A value became non-finite, or an operation is undefined for its input."""


class ConfigError(FalformerError, ValueError):
    """Invalid hyperparameters or a config that does not match a checkpoint."""


class ClusteringError(FalformerError, ValueError):
    pass


class DataError(FalformerError):
    """Base class for bag, manifest and checkpoint I/O problems."""


class BadMagicError(DataError):
    pass


class UnsupportedVersionError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class ShapeOverflowError(DataError):
    """Declared shape is zero, absurd, or disagrees with the bytes present."""


class ManifestError(DataError):
    pass


class DuplicateIdError(ManifestError):
    def __init__(self, bag_id):
        super().__init__(f"duplicate bag id {bag_id!r}")
        self.bag_id = bag_id


class CheckpointError(DataError):
    pass
