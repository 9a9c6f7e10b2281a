"""Exception hierarchy shared across the toolkit."""


class CordwarpError(Exception):
    """Base class for all toolkit errors."""


# --- file I/O ---

class IoFailure(CordwarpError):
    pass


class CorruptHeader(IoFailure):
    pass


class UnsupportedDatatype(IoFailure):
    pass


class DimensionOverflow(IoFailure):
    pass


class RejectNonFinite(CordwarpError):
    pass


# --- grids and fields ---

class GridMismatch(CordwarpError):
    pass


class NonDiffeomorphicField(CordwarpError):
    pass


class InvalidSpec(CordwarpError):
    pass


# --- tensor fitting ---

class InsufficientDirections(CordwarpError):
    pass


class SingularDesign(CordwarpError):
    pass


# --- centerline geometry ---

class EmptyMask(CordwarpError):
    pass


class TooFewSlices(CordwarpError):
    pass


class DuplicateParameter(CordwarpError):
    pass


class OutOfDomain(CordwarpError):
    pass


class EmptyRegion(CordwarpError):
    pass


# --- statistics ---

class DegenerateVariance(CordwarpError):
    pass


class DegenerateData(CordwarpError):
    pass


class NoRecords(CordwarpError):
    pass


# --- pipeline ---

class MissingMethodOutput(CordwarpError):
    pass
