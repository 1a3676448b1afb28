"""Sequential, concurrent and size-sweep distribution experiments on the simulator.

Every run cold-starts a fresh site: the origin holds the image, site stores
are empty, and all timing is virtual.
"""
from __future__ import annotations

import asyncio
import csv
import logging
import math
import random
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .cas import BlockStore
from .client import RegistryClient
from .httpio import HttpClient
from .image import build_image
from .netsim import MBPS, Fabric, Topology, VirtualTimeLoop
from .node import EdgeNode, NodeConfig
from .transport import SimTransport

log = logging.getLogger(__name__)

MB = 1_000_000
KINDS = ("sequential", "concurrent", "size_sweep")
MODES = ("edgepier", "baseline")
HTTP_PORT = 5000
P2P_PORT = 4001
IMAGE_NAME = "bench/app"


@dataclass
class ScenarioSpec:
    kind: str = "sequential"
    node_count: int = 6
    image_size: int = 500 * MB
    layer_size: int = 100 * MB
    uplink_mbps: list[float] = field(default_factory=lambda: [20.0, 50.0, 100.0, 500.0])
    intra_mbps: float = 1000.0
    repetitions: int = 10
    modes: tuple[str, ...] = MODES
    seed: int = 0
    # multiplies every link rate; shrinking image and rates together keeps
    # the virtual timings of the full-size experiment
    bandwidth_scale: float = 1.0
    chunk_size: int = 256 * 1024
    sweep_layers: int = 10
    replication_factor: int | None = None  # None: every site node

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario {self.kind!r}")
        for mode in self.modes:
            if mode not in MODES:
                raise ValueError(f"unknown mode {mode!r}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        if self.node_count < 1:
            raise ValueError("node_count must be at least 1")
        if self.image_size <= 0 or self.layer_size <= 0:
            raise ValueError("sizes must be positive")
        if not self.uplink_mbps or any(b <= 0 for b in self.uplink_mbps):
            raise ValueError("uplink bandwidths must be positive")
        if self.bandwidth_scale <= 0 or self.intra_mbps <= 0:
            raise ValueError("bandwidths must be positive")

    @classmethod
    def desk(cls, kind: str = "sequential", **overrides) -> "ScenarioSpec":
        """One tenth of the full experiment: 50 MB images over links scaled by 0.1."""
        base = dict(kind=kind, image_size=50 * MB, layer_size=10 * MB, bandwidth_scale=0.1, chunk_size=32 * 1024)
        if kind == "size_sweep":
            base["uplink_mbps"] = [100.0]
        base.update(overrides)
        return cls(**base)

    @classmethod
    def full(cls, kind: str = "sequential", **overrides) -> "ScenarioSpec":
        base = dict(kind=kind)
        if kind == "size_sweep":
            base["uplink_mbps"] = [100.0]
        base.update(overrides)
        return cls(**base)

    def layer_sizes(self, image_size: int | None = None) -> list[int]:
        size = self.image_size if image_size is None else image_size
        n = max(1, math.ceil(size / self.layer_size))
        sizes = [self.layer_size] * (n - 1)
        sizes.append(size - self.layer_size * (n - 1))
        return sizes

    def sweep_sizes(self) -> list[int]:
        return [self.layer_size * k for k in range(1, self.sweep_layers + 1)]


@dataclass
class RunResult:
    scenario: str
    mode: str
    bandwidth_mbps: float
    repetition: int
    image_size: int
    distribution_ms: float | None = None
    pull_ms: dict[str, float] = field(default_factory=dict)
    uplink_series: list[tuple[int, float]] = field(default_factory=list)
    uplink_bytes: int = 0
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def avg_pull_ms(self) -> float:
        return statistics.fmean(self.pull_ms.values()) if self.pull_ms else float("nan")


def synthetic_layers(sizes: list[int], seed: int) -> tuple[list[bytes], bytes]:
    """Incompressible layer bytes and a small config, all derived from ``seed``."""
    rng = random.Random(f"edgepier-image:{seed}")
    layers = [rng.randbytes(n) for n in sizes]
    config = f'{{"architecture":"amd64","os":"linux","seed":{seed}}}'.encode()
    return layers, config


class SimSite:
    """An origin registry plus ``n`` site nodes inside one simulated fabric."""

    def __init__(
        self,
        n: int,
        *,
        mode: str = "edgepier",
        uplink_mbps: float = 20.0,
        intra_mbps: float = 1000.0,
        chunk_size: int = 256 * 1024,
        seed: int = 0,
        drop_prob: float = 0.0,
        replication_factor: int | None = None,
        replication: bool = True,
        gossip_interval: float = 5.0,
        deferred: tuple[str, ...] = (),
    ):
        self.mode = mode
        # nodes created but not started; tests start them later to model joins
        self.deferred = set(deferred)
        self.loop = VirtualTimeLoop()
        asyncio.set_event_loop(self.loop)
        self.names = [f"node{i}" for i in range(1, n + 1)]
        self.topology = Topology.edge_site(
            self.names, uplink_mbps=uplink_mbps, intra_mbps=intra_mbps, drop_prob=drop_prob, seed=seed
        )
        self.fabric = Fabric(self.topology, self.loop)
        self.origin_registry = f"origin:{HTTP_PORT}"
        peers = [f"{name}:{P2P_PORT}" for name in self.names]
        self.origin = EdgeNode(
            NodeConfig("origin", self.origin_registry, f"origin:{P2P_PORT}", role="origin", chunk_size=chunk_size),
            SimTransport(self.fabric, "origin"),
            deterministic=True,
        )
        self.nodes: list[EdgeNode] = []
        if mode == "edgepier":
            for name in self.names:
                config = NodeConfig(
                    name,
                    f"{name}:{HTTP_PORT}",
                    f"{name}:{P2P_PORT}",
                    peers=peers,
                    origin_p2p=f"origin:{P2P_PORT}",
                    origin_registry=self.origin_registry,
                    replication_enabled=replication,
                    replication_factor=replication_factor,
                    chunk_size=chunk_size,
                    gossip_interval=gossip_interval,
                    seed=seed,
                )
                self.nodes.append(EdgeNode(config, SimTransport(self.fabric, name), deterministic=True))
        self.run(self._start())

    async def _start(self) -> None:
        await self.origin.start()
        await asyncio.gather(*(node.start() for node in self.nodes if node.name not in self.deferred))

    def run(self, coro):
        async def wrap():
            return await coro

        return self.loop.run_until_complete(wrap())

    def now(self) -> float:
        return self.loop.time()

    def publish(self, name: str, tag: str, layers: list[bytes], config: bytes):
        """Place an image directly in the origin's store, as if pushed earlier."""
        built = build_image(self.origin.store, layers, config)
        self.origin.pin_image_locally(built.manifest, built.manifest_root)
        from .gateway import _local_tag

        tags = self.origin.gateway.local_tags
        tags.add_tag(_local_tag(tags, name, tag, built.digest))
        return built

    def client(self, host: str, registry: str | None = None) -> RegistryClient:
        """Registry client on ``host``; by default it talks to the host's own node
        (edgepier) or to the origin (baseline)."""
        if registry is None:
            registry = f"{host}:{HTTP_PORT}" if self.mode == "edgepier" else self.origin_registry
        # no per-request timeout: a shared uplink can legitimately take hours of virtual time
        return RegistryClient(HttpClient(SimTransport(self.fabric, host).connect, timeout=None), registry)

    def node(self, name: str) -> EdgeNode:
        return next(n for n in self.nodes if n.name == name)

    def start_node(self, name: str) -> EdgeNode:
        node = self.node(name)
        self.deferred.discard(name)
        self.run(node.start())
        return node

    def uplink_bytes(self) -> int:
        counters = self.fabric.counters
        return sum(counters.pair("origin", name).bytes_received for name in self.names)

    def close(self) -> None:
        async def stop():
            for node in [*self.nodes, self.origin]:
                if node.name not in self.deferred:
                    await node.stop()
            await self.fabric.shutdown()

        try:
            self.run(stop())
        finally:
            self.loop.cancel_all()
            self.loop.close()
            asyncio.set_event_loop(None)


def _deadline(image_size: int, nodes: int, uplink_bps: float) -> float:
    # far beyond anything a working run needs: 20x the serialized baseline
    return 20 * nodes * image_size * 8 / uplink_bps + 120


def run_once(spec: ScenarioSpec, mode: str, uplink_mbps: float, repetition: int,
             image: tuple[list[bytes], bytes] | None = None) -> RunResult:
    """One cold-start repetition of ``spec.kind`` in ``mode`` at nominal ``uplink_mbps``."""
    seed = spec.seed + repetition
    layers, config = image if image is not None else synthetic_layers(spec.layer_sizes(), spec.seed)
    image_size = sum(len(l) for l in layers)
    kind = "concurrent" if spec.kind == "size_sweep" else spec.kind
    result = RunResult(spec.kind, mode, uplink_mbps, repetition, image_size)
    scale = spec.bandwidth_scale
    site = SimSite(
        spec.node_count,
        mode=mode,
        uplink_mbps=uplink_mbps * scale,
        intra_mbps=spec.intra_mbps * scale,
        chunk_size=spec.chunk_size,
        seed=seed,
        replication_factor=spec.replication_factor,
    )
    try:
        site.publish(IMAGE_NAME, "latest", layers, config)
        start = site.now()
        ends: dict[str, float] = {}

        async def pull(name: str) -> None:
            t0 = site.now()
            pulled = await site.client(name).pull(f"{IMAGE_NAME}:latest")
            if pulled.layers != layers:
                raise RuntimeError(f"{name} assembled a different image")
            ends[name] = site.now()
            result.pull_ms[name] = (ends[name] - t0) * 1000

        async def workload() -> None:
            if kind == "sequential":
                for name in site.names:
                    await pull(name)
            else:
                await asyncio.gather(*(pull(name) for name in site.names))

        async def bounded() -> None:
            limit = _deadline(image_size, spec.node_count, uplink_mbps * scale * MBPS)
            await asyncio.wait_for(workload(), limit)

        try:
            site.run(bounded())
            result.distribution_ms = (max(ends.values()) - start) * 1000
        except Exception as exc:  # recorded, the repetition is aborted
            result.error = f"{type(exc).__name__}: {exc}"
            log.warning("%s/%s @%s Mbps rep %d failed: %s", spec.kind, mode, uplink_mbps, repetition, exc)
        result.uplink_bytes = site.uplink_bytes()
        series = site.fabric.counters.egress_series("origin")
        result.uplink_series = [(sec, n * 8 / MBPS / scale) for sec, n in sorted(series.items())]
    finally:
        site.close()
    return result


def run_scenario(spec: ScenarioSpec, progress=None) -> list[RunResult]:
    results: list[RunResult] = []
    if spec.kind == "size_sweep":
        full_layers, config = synthetic_layers([spec.layer_size] * spec.sweep_layers, spec.seed)
        for k in range(1, spec.sweep_layers + 1):
            image = (full_layers[:k], config)
            for mode in spec.modes:
                for bw in spec.uplink_mbps:
                    for rep in range(spec.repetitions):
                        results.append(run_once(spec, mode, bw, rep, image))
                        if progress:
                            progress(results[-1])
        return results
    image = synthetic_layers(spec.layer_sizes(), spec.seed)
    for bw in spec.uplink_mbps:
        for mode in spec.modes:
            for rep in range(spec.repetitions):
                results.append(run_once(spec, mode, bw, rep, image))
                if progress:
                    progress(results[-1])
    return results


# -- CSV output ---------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.3f}"


def write_csvs(results: list[RunResult], out: str | Path) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    dist = [r for r in results if r.scenario != "size_sweep"]
    sweep = [r for r in results if r.scenario == "size_sweep"]
    if dist:
        path = out / "distribution_time.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scenario", "mode", "bandwidth_mbps", "repetition", "distribution_ms"])
            for r in dist:
                w.writerow([r.scenario, r.mode, _num(r.bandwidth_mbps), r.repetition,
                            _fmt(r.distribution_ms) if r.ok else "failed"])
        written.append(path)
        path = out / "pull_times.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scenario", "mode", "bandwidth_mbps", "repetition", "node", "pull_ms"])
            for r in dist:
                for node, ms in r.pull_ms.items():
                    w.writerow([r.scenario, r.mode, _num(r.bandwidth_mbps), r.repetition, node, _fmt(ms)])
        written.append(path)
        path = out / "uplink_util.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scenario", "mode", "bandwidth_mbps", "repetition", "second", "mbps"])
            for r in dist:
                for sec, mbps in r.uplink_series:
                    w.writerow([r.scenario, r.mode, _num(r.bandwidth_mbps), r.repetition, sec, _fmt(mbps)])
        written.append(path)
    if sweep:
        path = out / "size_sweep.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mode", "image_mb", "repetition", "avg_pull_ms"])
            for r in sweep:
                w.writerow([r.mode, _num(r.image_size / MB), r.repetition, _fmt(r.avg_pull_ms) if r.ok else "failed"])
        written.append(path)
    path = out / "uplink_bytes.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "mode", "bandwidth_mbps", "repetition", "image_bytes", "uplink_bytes"])
        for r in results:
            w.writerow([r.scenario, r.mode, _num(r.bandwidth_mbps), r.repetition, r.image_size, r.uplink_bytes])
    written.append(path)
    return written


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else f"{x:g}"


# -- report -------------------------------------------------------------------

@dataclass
class Cell:
    values: list[float]
    failed: int = 0

    @property
    def count(self) -> int:
        return len(self.values)

    @property
    def mean(self) -> float:
        return statistics.fmean(self.values) if self.values else float("nan")

    @property
    def stddev(self) -> float:
        return statistics.stdev(self.values) if len(self.values) > 1 else 0.0


@dataclass
class Report:
    # (scenario, bandwidth or image size, mode) -> cell
    cells: dict[tuple[str, str, str], Cell]

    def speedups(self) -> dict[tuple[str, str], float]:
        """1 - edgepier/baseline per (scenario, bandwidth)."""
        out = {}
        keys = {(s, b) for s, b, _ in self.cells}
        for scenario, bw in sorted(keys):
            e = self.cells.get((scenario, bw, "edgepier"))
            b = self.cells.get((scenario, bw, "baseline"))
            if e and b and e.values and b.values and b.mean > 0:
                out[(scenario, bw)] = 1 - e.mean / b.mean
        return out

    def render(self) -> str:
        lines = [f"{'scenario':<12} {'x':>8} {'mode':<9} {'n':>3} {'fail':>4} {'mean_s':>10} {'stddev_s':>9}"]
        for (scenario, x, mode), cell in sorted(self.cells.items(), key=lambda kv: (kv[0][0], float(kv[0][1]), kv[0][2])):
            lines.append(f"{scenario:<12} {x:>8} {mode:<9} {cell.count:>3} {cell.failed:>4} "
                         f"{cell.mean / 1000:>10.2f} {cell.stddev / 1000:>9.2f}")
        speed = self.speedups()
        if speed:
            lines.append("")
            lines.append("speedup = 1 - edgepier/baseline")
            for (scenario, x), s in sorted(speed.items(), key=lambda kv: (kv[0][0], float(kv[0][1]))):
                lines.append(f"{scenario:<12} {x:>8} {s * 100:>7.1f}%")
        return "\n".join(lines)


def load_report(directory: str | Path) -> Report:
    directory = Path(directory)
    cells: dict[tuple[str, str, str], Cell] = defaultdict(lambda: Cell([]))
    found = False
    dist = directory / "distribution_time.csv"
    if dist.is_file():
        with dist.open() as fh:
            for row in csv.DictReader(fh):
                found = True
                cell = cells[(row["scenario"], row["bandwidth_mbps"], row["mode"])]
                if row["distribution_ms"] == "failed":
                    cell.failed += 1
                else:
                    cell.values.append(float(row["distribution_ms"]))
    sweep = directory / "size_sweep.csv"
    if sweep.is_file():
        with sweep.open() as fh:
            for row in csv.DictReader(fh):
                found = True
                cell = cells[("size_sweep", row["image_mb"], row["mode"])]
                if row["avg_pull_ms"] == "failed":
                    cell.failed += 1
                else:
                    cell.values.append(float(row["avg_pull_ms"]))
    if not found:
        raise FileNotFoundError(f"no benchmark results in {directory}")
    return Report(dict(cells))
