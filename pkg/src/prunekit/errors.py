"""Exception hierarchy shared by every prunekit module."""


class PrunekitError(Exception):
    """Base class for all errors raised by prunekit."""


class ShapeError(PrunekitError, ValueError):
    """Operand shapes are inconsistent; ``dim`` names the offending dimension."""

    def __init__(self, message, dim=None):
        super().__init__(message)
        self.dim = dim


class GraphError(PrunekitError, ValueError):
    pass


class ModelFormatError(PrunekitError):
    """Malformed model file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(ModelFormatError):
    pass


class DatasetFormatError(PrunekitError, ValueError):
    pass


class SensitivityError(PrunekitError):
    pass


class TargetMacsUnreachable(PrunekitError):
    """Even the most aggressive plan misses the MAC budget."""

    def __init__(self, target_macs, best_macs):
        super().__init__(
            f"target of {target_macs} MACs is unreachable; best achievable is {best_macs}"
        )
        self.target_macs = target_macs
        self.best_macs = best_macs


class SurgeryError(PrunekitError):
    pass


class DivergenceError(PrunekitError):
    pass
