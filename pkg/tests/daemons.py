"""Run real ``edgepier daemon`` processes on loopback for integration tests."""
import json
import os
import signal
import socket
import subprocess
import sys
import time
import urllib.request
from pathlib import Path

from edgepier.cli import peers_file_line

CLI = [sys.executable, "-m", "edgepier.cli"]


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def cli(*args, timeout=120, env=None):
    return subprocess.run([*CLI, *map(str, args)], capture_output=True, text=True, timeout=timeout, env=env)


class Daemon:
    def __init__(self, config: Path, http: str):
        self.config = config
        self.http = http
        self.proc: subprocess.Popen | None = None
        self.banner = ""

    def start(self) -> "Daemon":
        self.proc = subprocess.Popen([*CLI, "daemon", "--config", str(self.config)],
                                     stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
        self.banner = self.proc.stdout.readline().strip()
        if not self.banner.startswith("edgepier"):
            err = self.proc.stderr.read()
            raise RuntimeError(f"daemon failed to start: {err}")
        return self

    def stop(self, sig=signal.SIGTERM) -> int:
        if self.proc is None:
            return 0
        self.proc.send_signal(sig)
        try:
            code = self.proc.wait(15)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            code = self.proc.wait()
        self.proc.stdout.close()
        self.proc.stderr.close()
        self.proc = None
        return code

    def status(self) -> dict:
        with urllib.request.urlopen(f"http://{self.http}/_edgepier/status", timeout=5) as res:
            return json.load(res)


class Cluster:
    """An origin daemon and ``n`` site daemons sharing one peers file."""

    def __init__(self, root: Path, n: int, *, p2p=True, replication=True, factor="ALL", origin=True, extra=""):
        self.root = root
        root.mkdir(parents=True, exist_ok=True)
        p2p_addrs = [f"127.0.0.1:{free_port()}" for _ in range(n)]
        (root / "peers.txt").write_text("".join(peers_file_line(a) + "\n" for a in p2p_addrs))
        self.origin = None
        origin_lines = ""
        if origin:
            http, p2p_addr = f"127.0.0.1:{free_port()}", f"127.0.0.1:{free_port()}"
            path = root / "origin.ini"
            path.write_text(
                f"[node]\nname = origin\nrole = origin\nhttp_listen = {http}\np2p_listen = {p2p_addr}\n"
                f"store_dir = store-origin\n"
            )
            self.origin = Daemon(path, http)
            origin_lines = f"origin_p2p = {p2p_addr}\norigin_registry = {http}\n"
        self.sites = []
        for i, p2p_addr in enumerate(p2p_addrs, 1):
            http = f"127.0.0.1:{free_port()}"
            path = root / f"node{i}.ini"
            text = f"[node]\nname = node{i}\nhttp_listen = {http}\nstore_dir = store{i}\n" + origin_lines
            if p2p:
                text += (f"p2p_listen = {p2p_addr}\npeers_file = peers.txt\nreplication = {str(replication).lower()}\n"
                         f"replication_factor = {factor}\ngossip_interval = 1\n")
            else:
                text += "p2p = false\nreplication = false\n"
            path.write_text(text + extra)
            self.sites.append(Daemon(path, http))

    def start(self) -> "Cluster":
        if self.origin:
            self.origin.start()
        for d in self.sites:
            d.start()
        return self

    def stop(self) -> None:
        for d in [*self.sites, self.origin]:
            if d is not None:
                d.stop()

    def wait_for(self, predicate, timeout=30.0, interval=0.25) -> bool:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if predicate():
                return True
            time.sleep(interval)
        return predicate()


def write_image(path: Path, sizes, seed=0) -> Path:
    import random

    rng = random.Random(seed)
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.json").write_text(json.dumps({"os": "linux", "seed": seed}))
    for i, n in enumerate(sizes):
        (path / f"layer{i}.tar.gz").write_bytes(rng.randbytes(n))
    return path


def pythonpath_env(**extra) -> dict:
    env = dict(os.environ)
    env.update(extra)
    return env
