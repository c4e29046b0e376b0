"""Exception base classes shared across the toolkit.

Every error carries the CLI exit code it maps to: 1 for validation
failures, 2 for usage errors, 3 for io/external failures.
"""

from __future__ import annotations

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_USAGE = 2
EXIT_IO = 3


class DexkitError(Exception):
    """Root of all toolkit errors."""

    exit_code = EXIT_VALIDATION
    code = "ERROR"


class UsageError(DexkitError):
    exit_code = EXIT_USAGE
    code = "USAGE"


class ExternalError(DexkitError):
    """An io or external-process failure."""

    exit_code = EXIT_IO
    code = "EXTERNAL"
