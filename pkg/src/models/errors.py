from typing import Optional


class SmoothmixError(Exception):
    """Base class for all estimation errors"""


class ConfigError(SmoothmixError, ValueError):
    """Invalid configuration or violated precondition"""


class GridError(SmoothmixError, ValueError):
    """Grid cannot carry the requested function or evaluation"""


class DegenerateFitError(SmoothmixError):
    """The MM update has no valid next iterate (e.g. all weights vanish)"""


class ObjectiveError(SmoothmixError):
    """Mixture density is not positive at a sample point"""

    def __init__(self, message: str, point: Optional[float] = None):
        super().__init__(message)
        self.point = point


class DataFileError(SmoothmixError, ValueError):
    """Input data file could not be parsed"""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class BandwidthSelectionError(SmoothmixError):
    """Every candidate bandwidth failed during cross-validation"""


class IdentifiabilityError(SmoothmixError, ValueError):
    """Checker inputs violate the sign precondition on the mean domain"""
