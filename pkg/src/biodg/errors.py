"""Exception hierarchy shared by every biodg module."""


class BiodgError(Exception):
    """Base class; the CLI maps it to a non-zero exit with the message."""


class ConfigError(BiodgError, ValueError):
    pass


class ShapeError(BiodgError, ValueError):
    pass


class StateError(BiodgError, RuntimeError):
    pass


class WavFormatError(BiodgError, ValueError):
    """Malformed RIFF/WAVE container."""


class UnsupportedEncodingError(BiodgError, ValueError):
    pass


class EmptyInputError(BiodgError, ValueError):
    pass


class TooShortError(BiodgError, ValueError):
    pass


class FoldError(BiodgError, ValueError):
    pass


class BalanceError(BiodgError, ValueError):
    pass


class NormalizationError(BiodgError, ValueError):
    pass


class DivergenceError(BiodgError, RuntimeError):
    """Training produced a non-finite loss or gradient."""


class MissingFeaturesError(BiodgError, FileNotFoundError):
    pass
