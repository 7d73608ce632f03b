"""Exception hierarchy shared by all modules."""


class DDMORError(Exception):
    """Base class for package errors."""


class InvalidMeshError(DDMORError, ValueError):
    pass


class InvalidDeviceError(DDMORError, ValueError):
    pass


class AssemblyError(DDMORError, ValueError):
    pass


class ConfigError(DDMORError, ValueError):
    """Bad netlist/campaign configuration. ``location`` points into the document."""

    def __init__(self, message, location=None):
        self.location = location
        if location:
            message = f"{location}: {message}"
        super().__init__(message)


class SolverError(DDMORError, RuntimeError):
    """Newton or time-integration failure; ``time`` is the failing instant if known."""

    def __init__(self, message, time=None):
        self.time = time
        if time is not None:
            message = f"{message} (t = {time:.6e} s)"
        super().__init__(message)


class UndefinedGapError(DDMORError, ValueError):
    pass


class InvalidMassError(DDMORError, ValueError):
    """Mass matrix is not symmetric positive definite."""
