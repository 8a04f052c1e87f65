"""Hybrid decoy orchestration: SDN flow classification and transparent TCP
handover between low- and high-interaction decoys, on a deterministic
packet-level simulator."""

from honeydoc.core import FiveTuple, Flag, IpAddr, MacAddr, Proto, Segment, Trace, seq_add
from honeydoc.kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "FiveTuple", "Flag", "IpAddr", "MacAddr", "Proto", "Segment", "Trace",
           "seq_add", "__version__"]
