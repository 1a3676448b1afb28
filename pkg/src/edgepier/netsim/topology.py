from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

MBPS = 1_000_000


@dataclass(frozen=True)
class LinkShape:
    bandwidth: float  # bits per second
    latency_ms: float = 0.0
    drop_prob: float = 0.0

    def __post_init__(self) -> None:
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if self.latency_ms < 0:
            raise ValueError("latency must be non-negative")
        if not 0 <= self.drop_prob <= 1:
            raise ValueError("drop_prob must lie in [0, 1]")


@dataclass
class Topology:
    """Named nodes, a default intra-site link and per-pair overrides.

    ``nic`` overrides the bandwidth of a node's network interface; the
    origin's NIC carries the shaped uplink, so every site flow to or from the
    origin shares a single bucket.
    """

    nodes: list[str]
    default: LinkShape
    overrides: dict[tuple[str, str], LinkShape] = field(default_factory=dict)
    nic: dict[str, float] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self) -> None:
        if len(set(self.nodes)) != len(self.nodes):
            raise ValueError("duplicate node names")

    def link(self, a: str, b: str) -> LinkShape:
        return self.overrides.get((a, b), self.default)

    def nic_rate(self, node: str) -> float:
        return self.nic.get(node, self.default.bandwidth)

    def set_pair(self, a: str, b: str, shape: LinkShape) -> None:
        self.overrides[(a, b)] = shape
        self.overrides[(b, a)] = shape

    def add_node(self, name: str, nic_bps: float | None = None) -> None:
        if name in self.nodes:
            raise ValueError(f"node {name!r} already exists")
        self.nodes.append(name)
        if nic_bps is not None:
            self.nic[name] = nic_bps

    @classmethod
    def edge_site(
        cls,
        site_nodes: list[str],
        *,
        origin: str = "origin",
        intra_mbps: float = 1000.0,
        uplink_mbps: float = 20.0,
        intra_latency_ms: float = 1.0,
        uplink_latency_ms: float = 20.0,
        drop_prob: float = 0.0,
        seed: int = 0,
    ) -> "Topology":
        topo = cls(
            nodes=[origin, *site_nodes],
            default=LinkShape(intra_mbps * MBPS, intra_latency_ms, drop_prob),
            nic={origin: uplink_mbps * MBPS},
            seed=seed,
        )
        for node in site_nodes:
            topo.set_pair(origin, node, LinkShape(uplink_mbps * MBPS, uplink_latency_ms, drop_prob))
        return topo

    @classmethod
    def from_config(cls, source: str | os.PathLike[str]) -> "Topology":
        """Parse a ``key=value`` topology file.

        ``[site]`` holds ``nodes`` (comma separated), ``default_bandwidth_mbps``,
        ``default_latency_ms`` and ``seed``; ``[uplink]`` holds ``origin``,
        ``uplink_bandwidth_mbps`` and ``uplink_latency_ms``.  Top-level keys
        without a section header are accepted too.
        """
        text = open(source).read() if os.path.exists(str(source)) else str(source)
        if not text.lstrip().startswith("["):
            text = "[site]\n" + text
        parser = configparser.ConfigParser()
        parser.read_string(text)
        merged: dict[str, str] = {}
        for section in parser.sections():
            merged.update(parser[section])
        if "nodes" not in merged:
            raise ValueError("topology needs a 'nodes' entry")
        nodes = [n.strip() for n in merged["nodes"].split(",") if n.strip()]
        origin = merged.get("origin", "origin").strip()
        return cls.edge_site(
            [n for n in nodes if n != origin],
            origin=origin,
            intra_mbps=float(merged.get("default_bandwidth_mbps", 1000)),
            uplink_mbps=float(merged.get("uplink_bandwidth_mbps", 20)),
            intra_latency_ms=float(merged.get("default_latency_ms", 1)),
            uplink_latency_ms=float(merged.get("uplink_latency_ms", 20)),
            drop_prob=float(merged.get("drop_prob", 0)),
            seed=int(merged.get("seed", 0)),
        )
