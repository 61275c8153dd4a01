"""Exception types shared across the package.

Each carries the CLI exit code it maps to, so ``cli.main`` can turn any
failure into the stable scripting contract (2 config, 3 data, 4 format).
"""


class CloudMaskError(Exception):
    exit_code = 1


class ConfigError(CloudMaskError, ValueError):
    exit_code = 2


class DataError(CloudMaskError, ValueError):
    exit_code = 3


class FormatError(CloudMaskError, ValueError):
    exit_code = 4


class ShapeError(CloudMaskError, ValueError):
    exit_code = 3
