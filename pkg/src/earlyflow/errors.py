"""Exception types shared across the package."""


class EarlyFlowError(Exception):
    """Base class for all package errors."""


class MalformedFrame(EarlyFlowError):
    """A frame whose declared header lengths do not fit the captured bytes."""


class FragmentedPacket(EarlyFlowError):
    """An IPv4 fragment. Fragments are counted and skipped, never reassembled."""


class UnsupportedCaptureFormat(EarlyFlowError):
    pass


class NonFlowablePacket(EarlyFlowError):
    """Raised for packets that cannot belong to a TCP flow."""


class DomainError(EarlyFlowError, ValueError):
    """An argument outside the mathematical domain of an operation."""


class EmptyClass(EarlyFlowError, ValueError):
    pass


class LabelSchemaError(EarlyFlowError):
    pass


class ShapeMismatch(EarlyFlowError, ValueError):
    pass


class ModelFormatError(EarlyFlowError):
    pass


class DatasetFormatError(EarlyFlowError):
    pass
