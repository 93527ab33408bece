"""Leased-buffer storage depots and the exNode control plane built on them."""

from .capability import Capability, mint, parse, to_uri, verify
from .depot import (AllocationRecord, AllocationStatus, CapabilitySet, Depot,
                    DepotConfig, load_config, parse_config)
from .errors import EbpError
from .exnode import ExNode, Mapping, ParityGroup
from .topology import AdjacencyGraph, DepotDirectory, route

__version__ = "0.1.0"

__all__ = [
    "AdjacencyGraph", "AllocationRecord", "AllocationStatus", "Capability",
    "CapabilitySet", "Depot", "DepotConfig", "DepotDirectory", "EbpError",
    "ExNode", "Mapping", "ParityGroup", "load_config", "mint", "parse",
    "parse_config", "route", "to_uri", "verify", "__version__",
]
