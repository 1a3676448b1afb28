"""``edgepier`` command line: daemon, push, pull, bench and report."""
from __future__ import annotations

import argparse
import asyncio
import configparser
import logging
import re
import signal
import sys
from pathlib import Path

from .client import RegistryClient, RegistryClientError, load_image_dir, save_image_dir
from .httpio import HttpClient
from .p2p.routing import peer_id_for
from .replication import ALL
from .transport import TcpTransport

log = logging.getLogger("edgepier")

_PEER_LINE = re.compile(r"^([0-9a-f]{64})=(\S+:\d+)$")


class ConfigError(Exception):
    pass


def read_peers_file(path: str | Path) -> list[str]:
    """One ``peer_id=host:port`` per line; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"peers file {path} does not exist")
    peers = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _PEER_LINE.match(line)
        if not m:
            raise ConfigError(f"{path}:{lineno}: expected peer_id=host:port")
        pid, address = m.groups()
        if bytes.fromhex(pid) != peer_id_for(address):
            raise ConfigError(f"{path}:{lineno}: peer id does not match {address}")
        peers.append(address)
    return peers


def peers_file_line(address: str) -> str:
    return f"{peer_id_for(address).hex()}={address}"


def load_node_config(path: str | Path):
    from .node import NodeConfig

    path = Path(path)
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigError(f"cannot read config {path}")
    if "node" not in parser:
        raise ConfigError(f"{path}: missing [node] section")
    sec = parser["node"]
    try:
        role = sec.get("role", "site")
        peers: list[str] = []
        if "peers_file" in sec:
            peers_path = Path(sec["peers_file"])
            if not peers_path.is_absolute():
                peers_path = path.parent / peers_path
            peers = read_peers_file(peers_path)
        elif role == "site" and sec.getboolean("p2p", True):
            raise ConfigError(f"{path}: site nodes need peers_file")
        factor_text = sec.get("replication_factor", "ALL").strip()
        factor = ALL if factor_text.upper() == "ALL" else int(factor_text)
        cache = sec.get("cache_bytes")
        store_dir = sec.get("store_dir")
        if store_dir and not Path(store_dir).is_absolute():
            store_dir = str(path.parent / store_dir)
        return NodeConfig(
            name=sec.get("name", "node"),
            role=role,
            http_listen=sec["http_listen"],
            p2p_listen=sec.get("p2p_listen"),
            peers=peers,
            origin_p2p=sec.get("origin_p2p"),
            origin_registry=sec.get("origin_registry"),
            p2p_enabled=sec.getboolean("p2p", True),
            replication_enabled=sec.getboolean("replication", True),
            replication_factor=factor,
            chunk_size=sec.getint("chunk_size", 256 * 1024),
            cache_bytes=int(cache) if cache else None,
            store_dir=store_dir,
            gossip_interval=sec.getfloat("gossip_interval", 5.0),
            seed=sec.getint("seed", 0),
        )
    except KeyError as exc:
        raise ConfigError(f"{path}: missing key {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


# -- daemon -------------------------------------------------------------------

async def _run_daemon(config) -> None:
    from .node import EdgeNode

    node = EdgeNode(config, TcpTransport())
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, stop.set)
    await node.start()
    # the banner doubles as a readiness signal for supervisors
    print(f"edgepier {config.role} node {config.name}: http={node.http_address} p2p={config.p2p_listen}", flush=True)
    try:
        await stop.wait()
    finally:
        await node.stop()
        print("edgepier: stopped", flush=True)


def cmd_daemon(args) -> int:
    try:
        config = load_node_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        asyncio.run(_run_daemon(config))
    except OSError as exc:
        print(f"error: cannot start node: {exc}", file=sys.stderr)
        return 1
    return 0


# -- push / pull --------------------------------------------------------------

def _client(registry: str, timeout: float | None) -> RegistryClient:
    return RegistryClient(HttpClient(TcpTransport().connect, timeout=timeout), registry)


def cmd_push(args) -> int:
    try:
        layers, config = load_image_dir(args.dir)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    async def go():
        client = _client(args.registry, args.timeout)
        try:
            return await client.push(args.image, layers, config)
        finally:
            client.http.close()

    try:
        digest = asyncio.run(go())
    except RegistryClientError as exc:
        print(f"error: {exc.code}: {exc.message}", file=sys.stderr)
        return 1
    except (ConnectionError, OSError, asyncio.TimeoutError) as exc:
        print(f"error: registry unreachable: {exc}", file=sys.stderr)
        return 1
    print(digest)
    return 0


def cmd_pull(args) -> int:
    async def go():
        client = _client(args.registry, args.timeout)
        try:
            return await client.pull(args.image)
        finally:
            client.http.close()

    try:
        image = asyncio.run(go())
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RegistryClientError as exc:
        print(f"error: {exc.code}: {exc.message}", file=sys.stderr)
        return 1
    except (ConnectionError, OSError, asyncio.TimeoutError) as exc:
        print(f"error: registry unreachable: {exc}", file=sys.stderr)
        return 1
    if args.out:
        save_image_dir(image, args.out)
    size = sum(d.size for d in image.manifest.blobs)
    print(f"{image.digest} {len(image.manifest.layers)} layers {size} bytes verified")
    return 0


# -- bench / report -----------------------------------------------------------

def _float_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def cmd_bench(args) -> int:
    from .bench import MB, ScenarioSpec, load_report, run_scenario, write_csvs

    kind = args.scenario.replace("-", "_")
    modes = ("edgepier", "baseline") if args.mode == "both" else (args.mode,)
    overrides = dict(node_count=args.nodes, repetitions=args.reps, seed=args.seed, modes=modes)
    if args.uplink_mbps:
        overrides["uplink_mbps"] = args.uplink_mbps
    if args.image_mb is not None:
        overrides["image_size"] = int(args.image_mb * MB)
    if args.layer_mb is not None:
        overrides["layer_size"] = int(args.layer_mb * MB)
    if args.sweep_steps is not None:
        overrides["sweep_layers"] = args.sweep_steps
    try:
        spec = (ScenarioSpec.full if args.full_scale else ScenarioSpec.desk)(kind, **overrides)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    def progress(r):
        status = "failed: " + r.error if r.error else f"{(r.distribution_ms or r.avg_pull_ms) / 1000:.2f} s"
        print(f"{r.scenario} {r.mode} {r.bandwidth_mbps:g} Mbps {r.image_size / MB:g} MB rep {r.repetition}: {status}",
              file=sys.stderr, flush=True)

    results = run_scenario(spec, progress=None if args.quiet else progress)
    write_csvs(results, args.out)
    print(load_report(args.out).render())
    return 0 if all(r.ok for r in results) else 1


def cmd_report(args) -> int:
    from .bench import load_report

    try:
        report = load_report(args.dir)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(report.render())
    return 0


def cmd_peer_line(args) -> int:
    for address in args.addresses:
        print(peers_file_line(address))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgepier", description="Peer-to-peer container registry for edge sites")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("daemon", help="run a registry node")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_daemon)

    p = sub.add_parser("push", help="push an image directory")
    p.add_argument("dir")
    p.add_argument("image", metavar="name:tag")
    p.add_argument("--registry", required=True, help="host:port")
    p.add_argument("--timeout", type=float, default=600.0)
    p.set_defaults(func=cmd_push)

    p = sub.add_parser("pull", help="pull and verify an image")
    p.add_argument("image", metavar="name:tag")
    p.add_argument("--registry", required=True, help="host:port")
    p.add_argument("--out", help="write config and layers to this directory")
    p.add_argument("--timeout", type=float, default=600.0)
    p.set_defaults(func=cmd_pull)

    p = sub.add_parser("bench", help="run distribution experiments in the simulator")
    p.add_argument("--scenario", choices=["sequential", "concurrent", "size-sweep"], default="sequential")
    p.add_argument("--mode", choices=["edgepier", "baseline", "both"], default="both")
    p.add_argument("--nodes", type=int, default=6)
    p.add_argument("--image-mb", type=float)
    p.add_argument("--layer-mb", type=float)
    p.add_argument("--sweep-steps", type=int, help="number of image sizes in a size sweep")
    p.add_argument("--uplink-mbps", type=_float_list, help="comma separated, nominal rates")
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full-scale", action="store_true", help="500 MB images over unscaled links")
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="summarize benchmark CSVs")
    p.add_argument("dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("peer-line", help="print peers-file lines for addresses")
    p.add_argument("addresses", nargs="+")
    p.set_defaults(func=cmd_peer_line)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
