"""Exception types shared across the package.

The CLI maps these to process exit codes: configuration problems exit 2,
missing pipeline dependencies exit 3, numeric divergence exits 4.
"""


class ElvcError(Exception):
    pass


class ConfigError(ElvcError):
    """Bad configuration, bad shapes at graph-build time, bad file formats."""


class FormatError(ConfigError):
    """A file on disk does not match the expected container format."""


class ContractError(ElvcError):
    """A caller violated an operation precondition."""


class DependencyError(ElvcError):
    """A pipeline step was invoked before the artifacts it needs exist."""


class NumericError(ElvcError):
    """Non-finite values appeared where finite ones are required."""
