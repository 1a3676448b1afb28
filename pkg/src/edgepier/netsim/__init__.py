from .fabric import QUANTUM, ByteCounters, Fabric, SimWriter, split_address
from .loop import SimulationStalled, VirtualTimeLoop
from .topology import MBPS, LinkShape, Topology

__all__ = [
    "MBPS",
    "QUANTUM",
    "ByteCounters",
    "Fabric",
    "LinkShape",
    "SimWriter",
    "SimulationStalled",
    "Topology",
    "VirtualTimeLoop",
    "split_address",
]
