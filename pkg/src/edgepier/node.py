"""One registry node: block store, P2P agent, replication and the HTTP gateway."""
from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass, field

from .cas import DEFAULT_CHUNK_SIZE, BlockStore, ContentId, StoreError
from .gateway import RegistryGateway
from .httpio import HttpClient, serve_http
from .image import ImageManifest, ManifestError, parse_manifest
from .p2p import PeerAgent
from .replication import ALL, GOSSIP_INTERVAL, Replicator
from .transport import Transport

log = logging.getLogger(__name__)


@dataclass
class NodeConfig:
    name: str
    http_listen: str
    p2p_listen: str | None = None
    peers: list[str] = field(default_factory=list)
    origin_p2p: str | None = None
    origin_registry: str | None = None
    role: str = "site"  # or "origin"
    p2p_enabled: bool = True
    replication_enabled: bool = True
    replication_factor: int | None = ALL
    chunk_size: int = DEFAULT_CHUNK_SIZE
    cache_bytes: int | None = None
    store_dir: str | None = None
    gossip_interval: float = GOSSIP_INTERVAL
    seed: int = 0

    def __post_init__(self) -> None:
        if self.role not in ("site", "origin"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.p2p_enabled and not self.p2p_listen:
            raise ValueError("p2p_listen is required when P2P is enabled")
        if self.replication_factor is not None and self.replication_factor < 1:
            raise ValueError("replication factor must be positive or ALL")


class EdgeNode:
    def __init__(self, config: NodeConfig, transport: Transport, *, deterministic: bool = False):
        self.config = config
        self.name = config.name
        self.transport = transport
        self.deterministic = deterministic
        if config.store_dir:
            self.store = BlockStore.open(config.store_dir, capacity=config.cache_bytes, chunk_size=config.chunk_size)
        else:
            self.store = BlockStore(capacity=config.cache_bytes, chunk_size=config.chunk_size)
        self.agent: PeerAgent | None = None
        self.replicator: Replicator | None = None
        origin = config.role == "origin"
        if config.p2p_enabled:
            self.agent = PeerAgent(
                self.store,
                transport,
                config.p2p_listen,
                bootstrap=[] if origin else config.peers,
                origin=None if origin else config.origin_p2p,
                dht=not origin,
            )
            if config.replication_enabled and not origin:
                self.replicator = Replicator(
                    self.agent,
                    self.fetch_image,
                    members=config.peers,
                    default_factor=config.replication_factor,
                    gossip_interval=config.gossip_interval,
                    seed=config.seed,
                )
        self.http = HttpClient(transport.connect)
        self.gateway = RegistryGateway(
            self, origin_registry=None if origin else config.origin_registry, http=self.http
        )
        self._http_listener = None
        self._pinned: set[ContentId] = set()
        self._conn_tasks: set[asyncio.Task] = set()

    @property
    def http_address(self) -> str:
        return self._http_listener.address if self._http_listener else self.config.http_listen

    async def start(self) -> None:
        self._http_listener = await self.transport.listen(self.config.http_listen, self._serve)
        try:
            if self.agent is not None:
                await self.agent.start()
            if self.replicator is not None:
                await self.replicator.start()
        except BaseException:
            self._http_listener.close()
            raise

    async def _serve(self, reader, writer) -> None:
        task = asyncio.current_task()
        self._conn_tasks.add(task)
        try:
            await serve_http(reader, writer, self.gateway)
        finally:
            self._conn_tasks.discard(task)

    async def stop(self) -> None:
        if self._http_listener is not None:
            self._http_listener.close()
        if self.replicator is not None:
            await self.replicator.stop()
        if self.agent is not None:
            await self.agent.stop()
        for task in list(self._conn_tasks):
            task.cancel()
        self.http.close()
        self.store.close()

    # -- pinning ------------------------------------------------------------

    def pin_root(self, root: ContentId) -> None:
        if root not in self._pinned:
            self.store.pin(root)
            self._pinned.add(root)

    def pin_image_locally(self, manifest: ImageManifest, manifest_root: ContentId) -> None:
        self.pin_root(manifest_root)
        for desc in manifest.blobs:
            root = self.store.root_for(desc.digest)
            if root is not None:
                self.pin_root(root)

    async def announce_image(self, manifest: ImageManifest, manifest_root: ContentId) -> None:
        if self.agent is None:
            return
        roots = [manifest_root] + [self.store.root_for(d.digest) for d in manifest.blobs]
        for root in roots:
            if root is not None:
                await self.agent.provide_file(root, complete=True)

    def manifest_for(self, digest: ContentId) -> tuple[ImageManifest, ContentId] | None:
        root = self.store.root_for(digest)
        if root is None or not self.store.is_complete(root):
            return None
        try:
            return parse_manifest(self.store.read_blob(root)), root
        except (ManifestError, StoreError):
            return None

    def pull_completed(self, digest: ContentId, name: str | None, tag: str | None) -> None:
        found = self.manifest_for(digest)
        if found is None:
            return
        manifest, root = found
        if any(not self.store.has_file(d.digest) for d in manifest.blobs):
            return
        if self.replicator is None:
            self.pin_image_locally(manifest, root)
            return
        entry = self.replicator.auto_pin_on_complete(digest, name, tag)
        # nodes outside the placement keep the pulled copy only as cache
        if self.replicator.placed_here(entry):
            self.pin_image_locally(manifest, root)

    async def fetch_image(self, digest: ContentId) -> None:
        """Fetch and pin an image's manifest, config and layers."""
        if self.agent is None:
            raise RuntimeError("P2P is disabled on this node")
        root = await asyncio.shield(self.agent.fetch(digest))
        manifest = parse_manifest(self.store.read_blob(root))
        blob_roots = await asyncio.gather(
            *(asyncio.shield(self.agent.fetch(d.digest)) for d in manifest.blobs)
        )
        self.pin_root(root)
        for blob_root in blob_roots:
            self.pin_root(blob_root)

    def holds_image(self, digest: ContentId) -> bool:
        found = self.manifest_for(digest)
        return found is not None and all(self.store.has_file(d.digest) for d in found[0].blobs)

    def status(self) -> dict:
        images = []
        if self.replicator is not None:
            pins = self.replicator.state.pins
            images = sorted(str(d) for d in pins if self.holds_image(d))
        return {
            "name": self.name,
            "role": self.config.role,
            "pinned_roots": len(self.store.pinned_roots),
            "images": images,
            "pinset": len(self.replicator.state.pins) if self.replicator else 0,
            "stored_bytes": self.store.used,
        }
