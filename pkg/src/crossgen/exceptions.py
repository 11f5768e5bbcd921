"""Exception hierarchy shared across the toolkit."""


class CrossgenError(Exception):
    """Base class for all toolkit errors."""


class ManifestError(CrossgenError, ValueError):
    """A dataset manifest is malformed or empty."""


class InfeasibleSplitError(CrossgenError, ValueError):
    """A patient-disjoint split cannot satisfy the requested fractions."""


class ParameterError(CrossgenError, ValueError):
    """An operation received an out-of-range parameter."""


class ContractError(CrossgenError, ValueError):
    """Inputs violate a shape or value contract of an operation."""


class ImageDecodeError(CrossgenError, OSError):
    """An image file could not be read or decoded."""

    def __init__(self, path, reason="", row=None):
        self.path = str(path)
        self.row = row
        where = f" (manifest row {row})" if row is not None else ""
        msg = f"cannot decode image {self.path}{where}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class TrainingAborted(CrossgenError, RuntimeError):
    """Training hit a non-finite loss."""

    def __init__(self, epoch, batch, loss):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")


class MissingWeightsError(CrossgenError, EnvironmentError):
    """Pretrained backbone weights are not available locally."""
