from .client import BackendEndpoint, make_client
from .protocol import (
    DEFAULT_BOX_THRESHOLD,
    DEFAULT_TEXT_THRESHOLD,
    PROTOCOL_VERSION,
    ProtocolError,
)

__all__ = [
    "BackendEndpoint",
    "make_client",
    "ProtocolError",
    "PROTOCOL_VERSION",
    "DEFAULT_BOX_THRESHOLD",
    "DEFAULT_TEXT_THRESHOLD",
]
