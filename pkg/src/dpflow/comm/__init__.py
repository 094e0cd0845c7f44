from .collectives import allreduce_sum, barrier, broadcast
from .transport import (
    CommError,
    CommTimeout,
    InprocFabric,
    ProtocolError,
    SocketTransport,
    Transport,
    WorldAborted,
)
from .world import CommWorld, TrafficStats, WorldError, traffic_stats, world_spawn

__all__ = [
    "CommError",
    "CommTimeout",
    "CommWorld",
    "InprocFabric",
    "ProtocolError",
    "SocketTransport",
    "TrafficStats",
    "Transport",
    "WorldAborted",
    "WorldError",
    "allreduce_sum",
    "barrier",
    "broadcast",
    "traffic_stats",
    "world_spawn",
]
