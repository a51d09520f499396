"""Exception types shared across the package."""


class ConfigurationError(Exception):
    """Bad scenario/model/solver configuration (unknown names, schema violations)."""


class SolverError(Exception):
    """Optimization could not produce a usable result."""


class NumericalError(Exception):
    """Numerical invariant broken beyond tolerance (non-finite values, negative variance)."""
