"""Human review gate for generated pairs: store, decisions, audit, HTTP API."""

from .store import (  # noqa: F401
    Check,
    CheckSet,
    ConflictError,
    Decision,
    GateError,
    NotFoundError,
    PageResult,
    ReviewItem,
    ReviewQueue,
    StoreCorruptionError,
    StoreError,
)
from .api import create_app  # noqa: F401
