"""Exception hierarchy shared by every anc_lab module."""


class AncLabError(Exception):
    """Base class for all anc_lab failures."""


class ShapeError(AncLabError, ValueError):
    pass


class EmptyInput(AncLabError, ValueError):
    pass


class InvalidHop(AncLabError, ValueError):
    pass


class NonInvertibleConfig(AncLabError, ValueError):
    pass


class EmptyFilter(AncLabError, ValueError):
    pass


class TooShort(AncLabError, ValueError):
    pass


class SampleRateMismatch(AncLabError, ValueError):
    pass


class NotNormalized(AncLabError, ValueError):
    pass


class OutOfRoom(AncLabError, ValueError):
    pass


class AbsorptionOverflow(AncLabError, ValueError):
    """The requested RT60 needs a wall absorption coefficient above 1."""


class LengthMismatch(AncLabError, ValueError):
    pass


class ZeroSignal(AncLabError, ValueError):
    pass


class NumericFault(AncLabError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class Diverged(NumericFault):
    pass


class CorruptFile(AncLabError, ValueError):
    """Binary artifact with a bad magic, version, or payload size."""


class CorruptLibrary(CorruptFile):
    pass


class EmptyDataset(AncLabError, ValueError):
    pass


class ConfigError(AncLabError, ValueError):
    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class MissingDependency(AncLabError, FileNotFoundError):
    def __init__(self, artifact: str, hint: str = ""):
        self.artifact = artifact
        self.hint = hint
        msg = f"missing upstream artifact: {artifact}"
        if hint:
            msg += f" ({hint})"
        super().__init__(msg)
