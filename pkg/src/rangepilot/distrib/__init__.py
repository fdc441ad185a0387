"""Client-server rollout collection over a framed binary protocol."""

from .client import Backoff, ClientRejected, ProcessGroup, ServerUnreachable, run_client
from .protocol import decode_frame, encode_frame
from .server import ServerSource, serve

__all__ = ["Backoff", "ClientRejected", "ProcessGroup", "ServerUnreachable", "ServerSource",
           "decode_frame", "encode_frame", "run_client", "serve"]
