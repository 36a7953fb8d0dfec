
class FaceModelingError(Exception):
    # process exit code reported by the CLI
    exit_code: int = 2


class UsageError(FaceModelingError):
    exit_code = 1


class ConfigError(UsageError):
    pass


class InvalidGridError(UsageError):
    pass


class DataError(FaceModelingError):
    exit_code = 2


class CloudFormatError(DataError):
    pass


class LandmarkError(DataError):
    pass


class ModelFormatError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class InvalidPermutationError(DataError):
    pass


class InfeasiblePairsError(DataError):
    pass


class GalleryError(DataError):
    pass


class NumericalError(FaceModelingError):
    exit_code = 3


class DegenerateConfigurationError(NumericalError):
    pass


class DegenerateCorrespondenceError(NumericalError):
    pass


class FactorizationError(NumericalError):
    pass
