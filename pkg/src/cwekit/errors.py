"""Shared exception hierarchy.

Every module raises subclasses of CwekitError so the CLI can map failures
to exit codes without enumerating module internals.
"""


class CwekitError(Exception):
    """Base class for all toolkit errors."""
