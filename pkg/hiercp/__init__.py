"""hiercp package."""


class HierCPError(Exception):
    """Base class for all errors raised by hiercp."""
