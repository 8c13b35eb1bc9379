"""Policy engine: consumer profiles, access decisions and key management."""
from .store import (
    BLACKLIST,
    WHITELIST,
    AuthError,
    ConflictError,
    ConsumerProfile,
    Denial,
    Grant,
    NotFound,
    PolicyError,
    PolicyStore,
    ValidationError,
)

__all__ = [
    "BLACKLIST",
    "WHITELIST",
    "AuthError",
    "ConflictError",
    "ConsumerProfile",
    "Denial",
    "Grant",
    "NotFound",
    "PolicyError",
    "PolicyStore",
    "ValidationError",
]
