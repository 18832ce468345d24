"""Exception types raised by the numerical routines."""


class FmsncError(Exception):
    """Base class for all package errors."""


class NumericalError(FmsncError, ArithmeticError):
    """A computation could not be carried out to a meaningful result."""


class SingularMatrixError(NumericalError):
    """A matrix that must be positive definite is not (numerically)."""


class DegenerateRegionError(NumericalError):
    """A truncation rectangle has (numerically) zero probability."""


class BoundaryError(NumericalError):
    """Parameters sit on the boundary of the parameter space."""


class ComponentCollapseError(NumericalError):
    """A mixture component has too little posterior mass to be estimated."""

    def __init__(self, component, mass, floor):
        self.component = component
        self.mass = mass
        super().__init__(
            f"component {component} collapsed: posterior mass {mass:.4g} <= {floor}")


class DegenerateRowError(NumericalError):
    """Every component assigns (numerically) zero likelihood to a row."""

    def __init__(self, row):
        self.row = row
        super().__init__(f"row {row} has zero likelihood under every component")


class StudyFailureError(FmsncError):
    """Too many replicate fits of a simulation study failed."""

    def __init__(self, failed, total):
        self.failed = failed
        self.total = total
        super().__init__(f"{failed} of {total} replicate fits failed")
