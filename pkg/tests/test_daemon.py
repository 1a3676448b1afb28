"""Daemons on real loopback sockets, driven through the command line."""
import hashlib
import signal
import subprocess
import time

import pytest

from daemons import CLI, Cluster, Daemon, cli, free_port, write_image


@pytest.fixture
def cluster_factory(tmp_path):
    made = []

    def make(n, **kw):
        c = Cluster(tmp_path / f"c{len(made)}", n, **kw)
        made.append(c)
        return c.start()

    yield make
    for c in made:
        c.stop()


def test_push_to_one_daemon_replicates_to_all(cluster_factory, tmp_path):
    c = cluster_factory(3)
    image = write_image(tmp_path / "img", [400_000, 300_000, 200_000], seed=1)
    res = cli("push", image, "demo/app:v1", "--registry", c.sites[0].http)
    assert res.returncode == 0, res.stderr
    digest = res.stdout.strip()
    start = time.monotonic()
    assert c.wait_for(lambda: all(digest in d.status()["images"] for d in c.sites), timeout=30)
    assert time.monotonic() - start < 30


def test_pull_round_trip_is_byte_identical(cluster_factory, tmp_path):
    c = cluster_factory(2)
    image = write_image(tmp_path / "img", [1_500_000, 10], seed=2)
    assert cli("push", image, "demo/app:v1", "--registry", c.origin.http).returncode == 0
    out = tmp_path / "out"
    res = cli("pull", "demo/app:v1", "--registry", c.sites[1].http, "--out", out)
    assert res.returncode == 0, res.stderr
    assert "verified" in res.stdout
    assert (out / "config.json").read_bytes() == (image / "config.json").read_bytes()
    assert (out / "layer000.tar.gz").read_bytes() == (image / "layer0.tar.gz").read_bytes()
    assert (out / "layer001.tar.gz").read_bytes() == (image / "layer1.tar.gz").read_bytes()


def test_pull_unknown_tag(cluster_factory):
    c = cluster_factory(1)
    res = cli("pull", "demo/none:v1", "--registry", c.sites[0].http)
    assert res.returncode == 1
    assert "MANIFEST_UNKNOWN" in res.stderr


def test_pull_with_origin_down_after_replication(cluster_factory, tmp_path):
    c = cluster_factory(3)
    image = write_image(tmp_path / "img", [200_000, 100_000], seed=3)
    digest = cli("push", image, "demo/app:v1", "--registry", c.sites[0].http).stdout.strip()
    assert c.wait_for(lambda: all(digest in d.status()["images"] for d in c.sites))
    c.origin.stop()
    for d in c.sites:
        res = cli("pull", "demo/app:v1", "--registry", d.http)
        assert res.returncode == 0, res.stderr


def test_baseline_pull_fails_with_origin_down(cluster_factory, tmp_path):
    c = cluster_factory(1, p2p=False)
    image = write_image(tmp_path / "img", [50_000], seed=4)
    assert cli("push", image, "demo/app:v1", "--registry", c.origin.http).returncode == 0
    assert cli("pull", "demo/app:v1", "--registry", c.sites[0].http).returncode == 0
    c.origin.stop()
    res = cli("pull", "demo/app@sha256:" + "0" * 64, "--registry", c.sites[0].http)
    assert res.returncode == 1


def _store_is_intact(store_dir):
    bad = []
    for sub in ("blocks", "nodes"):
        for path in (store_dir / sub).rglob("*"):
            if path.is_file() and hashlib.sha256(path.read_bytes()).hexdigest() != path.name:
                bad.append(path)
    return bad


def test_killed_mid_fetch_restarts_from_intact_store(cluster_factory, tmp_path):
    c = cluster_factory(1, replication=False)
    image = write_image(tmp_path / "img", [20_000_000, 20_000_000, 20_000_000], seed=5)
    assert cli("push", image, "demo/big:v1", "--registry", c.origin.http).returncode == 0
    node = c.sites[0]
    blocks = c.root / "store1" / "blocks"
    puller = subprocess.Popen([*CLI, "pull", "demo/big:v1", "--registry", node.http],
                              stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    # kill as soon as some, but not all, of the image has landed
    c.wait_for(lambda: blocks.exists() and sum(1 for p in blocks.rglob("*") if p.is_file()) > 20,
               timeout=30, interval=0.01)
    node.stop(signal.SIGKILL)
    # the interrupted pull saw its registry vanish
    assert puller.wait(30) != 0
    assert _store_is_intact(c.root / "store1") == []
    node.start()
    res = cli("pull", "demo/big:v1", "--registry", node.http)
    assert res.returncode == 0, res.stderr
    assert " 3 layers " in res.stdout and "verified" in res.stdout


def test_sigterm_is_a_clean_stop(tmp_path):
    c = Cluster(tmp_path, 1).start()
    try:
        proc = c.sites[0].proc
        proc.send_signal(signal.SIGTERM)
        assert proc.wait(15) == 0
        assert "edgepier: stopped" in proc.stdout.read()
        c.sites[0].proc = None
    finally:
        c.stop()


def test_missing_peers_file_is_a_startup_error(tmp_path):
    config = tmp_path / "n.ini"
    config.write_text(f"[node]\nname = n\nhttp_listen = 127.0.0.1:{free_port()}\n"
                      f"p2p_listen = 127.0.0.1:{free_port()}\npeers_file = nowhere.txt\n")
    res = cli("daemon", "--config", config, timeout=30)
    assert res.returncode == 2
    assert "peers file" in res.stderr


def test_port_in_use_is_a_startup_error(tmp_path):
    c = Cluster(tmp_path, 1, origin=False)
    taken = c.sites[0].config.read_text().split("http_listen = ")[1].split("\n")[0]
    import socket

    with socket.socket() as s:
        host, port = taken.split(":")
        s.bind((host, int(port)))
        s.listen()
        res = cli("daemon", "--config", c.sites[0].config, timeout=30)
    assert res.returncode == 1
    assert "cannot start node" in res.stderr


def test_daemon_banner_names_role(cluster_factory):
    c = cluster_factory(1)
    assert c.origin.banner.startswith("edgepier origin node origin")
    assert c.sites[0].banner.startswith("edgepier site node node1")
    assert isinstance(c.sites[0], Daemon)
