from .exchange import FairLock, PeerAgent, PeerConnection
from .fetch import FetchError, FetchSession, FetchStats
from .routing import PeerInfo, ProviderStore, RoutingTable, peer_id_for, xor_distance

__all__ = [
    "FairLock",
    "FetchError",
    "FetchSession",
    "FetchStats",
    "PeerAgent",
    "PeerConnection",
    "PeerInfo",
    "ProviderStore",
    "RoutingTable",
    "peer_id_for",
    "xor_distance",
]
