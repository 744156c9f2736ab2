"""Exception hierarchy. ``exit_code`` is what the CLI returns for each family."""


class ScadaTensorError(Exception):
    exit_code = 2


class ConfigError(ScadaTensorError):
    """Bad configuration, usage, or artifact version."""

    exit_code = 1


class DataError(ScadaTensorError):
    """Input data violates a contract (bad log line, out-of-bounds index, ...)."""

    exit_code = 2


class SimulationError(DataError):
    """A scenario cannot be satisfied by the profile it was given."""


class SolverError(ScadaTensorError):
    """Numeric failure while fitting or evaluating a model."""

    exit_code = 3
