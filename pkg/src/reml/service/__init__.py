from .app import create_app
from .client import ServiceClient
from .schemas import WireMessage, WireReply
from .server import NdjsonServer, parse_listen, serve_forever
from .state import ServiceState

__all__ = [
    "NdjsonServer",
    "ServiceClient",
    "ServiceState",
    "WireMessage",
    "WireReply",
    "create_app",
    "parse_listen",
    "serve_forever",
]
