"""Content-addressed block store.

Files are split into fixed-size leaf blocks and tied together by a small
Merkle DAG whose root records the digest of the whole file.  Every block is
addressed by the SHA-256 of its bytes and re-verified on every read.
"""
from __future__ import annotations

import contextlib
import hashlib
import io
import os
import re
import struct
import tempfile
import threading
from collections import OrderedDict
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

DEFAULT_CHUNK_SIZE = 262_144
MIN_CHUNK_SIZE = 4096
MAX_NODE_SIZE = 1 << 20

NODE_MAGIC = 0xD1
_NODE_HEADER = struct.Struct(">BBQ32sI")
_LINK = struct.Struct(">32sQ")
# largest fan-out that keeps a serialized node within MAX_NODE_SIZE
MAX_LINKS = (MAX_NODE_SIZE - _NODE_HEADER.size) // _LINK.size

_CID_RE = re.compile(r"^sha256:([0-9a-f]{64})$")
_HEX_RE = re.compile(r"^[0-9a-f]{64}$")


class StoreError(Exception):
    pass


class NotFoundError(StoreError):
    def __init__(self, cid: "ContentId"):
        super().__init__(f"not found: {cid}")
        self.cid = cid


class CapacityError(StoreError):
    pass


class IntegrityError(StoreError):
    def __init__(self, cid: "ContentId", message: str = ""):
        super().__init__(message or f"integrity check failed for {cid}")
        self.cid = cid


class MissingBlocksError(StoreError):
    """Raised when a DAG cannot be assembled because blocks are absent."""

    def __init__(self, root: "ContentId", missing: list["ContentId"]):
        super().__init__(f"{len(missing)} block(s) missing under {root}")
        self.root = root
        self.missing = missing


@dataclass(frozen=True, order=True)
class ContentId:
    hex: str

    algorithm = "sha256"

    def __post_init__(self) -> None:
        if not isinstance(self.hex, str) or not _HEX_RE.match(self.hex):
            raise ValueError(f"invalid sha256 hex digest: {self.hex!r}")

    @classmethod
    def parse(cls, text: str) -> "ContentId":
        m = _CID_RE.match(text) if isinstance(text, str) else None
        if m is None:
            raise ValueError(f"invalid content id: {text!r}")
        return cls(m.group(1))

    @classmethod
    def of(cls, data: bytes) -> "ContentId":
        return cls(hashlib.sha256(data).hexdigest())

    @classmethod
    def from_raw(cls, raw: bytes) -> "ContentId":
        if len(raw) != 32:
            raise ValueError("raw digest must be 32 bytes")
        return cls(raw.hex())

    @property
    def raw(self) -> bytes:
        return bytes.fromhex(self.hex)

    @property
    def short(self) -> str:
        return self.hex[:12]

    def __str__(self) -> str:
        return f"sha256:{self.hex}"

    def __repr__(self) -> str:
        return f"ContentId({self.short})"


EMPTY_DIGEST = ContentId.of(b"")
_ZERO_DIGEST = bytes(32)


class NodeKind(IntEnum):
    LEAF = 0
    # links point at raw leaf blocks
    INTERIOR = 1
    # links point at further INTERIOR nodes (files above MAX_LINKS leaves)
    BRANCH = 2


@dataclass(frozen=True)
class Link:
    cid: ContentId
    size: int


@dataclass(frozen=True)
class DagNode:
    kind: NodeKind
    links: tuple[Link, ...]
    total_size: int
    file_digest: ContentId | None = None

    def __post_init__(self) -> None:
        if self.kind != NodeKind.LEAF and sum(l.size for l in self.links) != self.total_size:
            raise ValueError("link sizes do not add up to total_size")
        if self.kind == NodeKind.LEAF and self.links:
            raise ValueError("leaf nodes carry no links")

    @property
    def is_root(self) -> bool:
        return self.file_digest is not None

    def encode(self) -> bytes:
        digest = self.file_digest.raw if self.file_digest is not None else _ZERO_DIGEST
        parts = [_NODE_HEADER.pack(NODE_MAGIC, int(self.kind), self.total_size, digest, len(self.links))]
        parts.extend(_LINK.pack(link.cid.raw, link.size) for link in self.links)
        data = b"".join(parts)
        if len(data) > MAX_NODE_SIZE:
            raise ValueError("serialized node exceeds 1 MiB")
        return data

    @classmethod
    def decode(cls, data: bytes) -> "DagNode":
        if len(data) < _NODE_HEADER.size:
            raise ValueError("truncated DAG node")
        magic, kind, total, digest, count = _NODE_HEADER.unpack_from(data, 0)
        if magic != NODE_MAGIC:
            raise ValueError("bad DAG node magic")
        if len(data) != _NODE_HEADER.size + count * _LINK.size:
            raise ValueError("DAG node length does not match link count")
        links = tuple(
            Link(ContentId.from_raw(raw), size)
            for raw, size in _LINK.iter_unpack(data[_NODE_HEADER.size:])
        )
        file_digest = None if digest == _ZERO_DIGEST else ContentId.from_raw(digest)
        return cls(NodeKind(kind), links, total, file_digest)

    @property
    def cid(self) -> ContentId:
        return ContentId.of(self.encode())


@dataclass(frozen=True)
class Block:
    cid: ContentId
    data: bytes

    @classmethod
    def of(cls, data: bytes) -> "Block":
        return cls(ContentId.of(data), data)


@dataclass(frozen=True)
class StoreStats:
    unique_blocks: int
    physical_bytes: int
    logical_bytes: int


# -- storage backends ------------------------------------------------------


class MemoryBackend:
    def __init__(self) -> None:
        self.blocks: dict[str, bytes] = {}
        self.quarantined: dict[str, bytes] = {}

    def read(self, hexid: str) -> bytes | None:
        return self.blocks.get(hexid)

    def write(self, hexid: str, data: bytes, *, node: bool) -> None:
        self.blocks[hexid] = bytes(data)

    def delete(self, hexid: str) -> None:
        self.blocks.pop(hexid, None)

    def quarantine(self, hexid: str) -> None:
        data = self.blocks.pop(hexid, None)
        if data is not None:
            self.quarantined[hexid] = data

    def scan(self) -> Iterator[tuple[str, int, bool]]:
        return iter(())

    def read_pin_log(self) -> dict[str, int]:
        return {}

    def append_pin_log(self, line: str) -> None:
        pass

    def compact_pin_log(self, pins: dict[str, int]) -> None:
        pass


class DiskBackend:
    """One file per block, fanned out by the first two hex characters.

    Leaves live under ``blocks/`` and DAG nodes under ``nodes/``; writes go
    through a temporary file and an atomic rename so a crash never leaves a
    partial block behind.
    """

    def __init__(self, root: str | os.PathLike[str]):
        self.root = Path(root)
        for sub in ("blocks", "nodes", "quarantine", "tmp"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        for stale in (self.root / "tmp").iterdir():
            stale.unlink(missing_ok=True)
        self.pin_log = self.root / "pins.log"

    def _path(self, hexid: str, node: bool) -> Path:
        return self.root / ("nodes" if node else "blocks") / hexid[:2] / hexid

    def _find(self, hexid: str) -> Path | None:
        for node in (False, True):
            path = self._path(hexid, node)
            if path.exists():
                return path
        return None

    def read(self, hexid: str) -> bytes | None:
        path = self._find(hexid)
        if path is None:
            return None
        try:
            return path.read_bytes()
        except FileNotFoundError:
            return None

    def write(self, hexid: str, data: bytes, *, node: bool) -> None:
        path = self._path(hexid, node)
        path.parent.mkdir(exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.root / "tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    def delete(self, hexid: str) -> None:
        path = self._find(hexid)
        if path is not None:
            path.unlink(missing_ok=True)

    def quarantine(self, hexid: str) -> None:
        path = self._find(hexid)
        if path is not None:
            os.replace(path, self.root / "quarantine" / hexid)

    def scan(self) -> Iterator[tuple[str, int, bool]]:
        for node in (False, True):
            base = self.root / ("nodes" if node else "blocks")
            for fan in sorted(base.iterdir()):
                for path in sorted(fan.iterdir()):
                    yield path.name, path.stat().st_size, node

    def read_pin_log(self) -> dict[str, int]:
        pins: dict[str, int] = {}
        if not self.pin_log.exists():
            return pins
        for line in self.pin_log.read_text().splitlines():
            if len(line) < 65 or line[0] not in "+-":
                continue  # torn trailing write
            hexid = line[1:65]
            pins[hexid] = pins.get(hexid, 0) + (1 if line[0] == "+" else -1)
            if pins[hexid] <= 0:
                del pins[hexid]
        return pins

    def append_pin_log(self, line: str) -> None:
        with open(self.pin_log, "a") as fh:
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def compact_pin_log(self, pins: dict[str, int]) -> None:
        tmp = self.root / "tmp" / "pins.log"
        lines = [f"+{hexid}" for hexid in sorted(pins) for _ in range(pins[hexid])]
        tmp.write_text("".join(line + "\n" for line in lines))
        os.replace(tmp, self.pin_log)


# -- the store ---------------------------------------------------------------


@dataclass
class _RootInfo:
    file_digest: ContentId
    refs: int = 1


class BlockStore:
    """Pin-aware content-addressed store with LRU eviction of unpinned DAGs.

    ``capacity`` bounds all stored bytes (leaves and DAG nodes alike);
    ``None`` means unbounded.
    """

    def __init__(
        self,
        capacity: int | None = None,
        chunk_size: int = DEFAULT_CHUNK_SIZE,
        backend: MemoryBackend | DiskBackend | None = None,
    ):
        check_chunk_size(chunk_size)
        self.capacity = capacity
        self.chunk_size = chunk_size
        self.backend = backend if backend is not None else MemoryBackend()
        self._lock = threading.RLock()
        # insertion-ordered: doubles as the age order of loose blocks
        self._sizes: dict[ContentId, int] = {}
        self._is_node: dict[ContentId, bool] = {}
        self._nodes: dict[ContentId, DagNode] = {}
        self._roots: OrderedDict[ContentId, _RootInfo] = OrderedDict()
        self._files: dict[ContentId, ContentId] = {}
        self._pins: dict[ContentId, int] = {}
        self._leases: dict[ContentId, int] = {}
        # leaves of files being chunked right now; not evictable until the root lands
        self._inflight: dict[ContentId, int] = {}
        self.used = 0
        self.evicted_blocks = 0
        self._load()

    @classmethod
    def open(cls, directory: str | os.PathLike[str], **kwargs) -> "BlockStore":
        return cls(backend=DiskBackend(directory), **kwargs)

    def _load(self) -> None:
        for hexid, size, node in self.backend.scan():
            cid = ContentId(hexid)
            self._sizes[cid] = size
            self._is_node[cid] = node
            self.used += size
            if node:
                data = self.backend.read(hexid)
                try:
                    decoded = DagNode.decode(data) if data is not None else None
                except ValueError:
                    decoded = None
                if decoded is None or ContentId.of(data) != cid:
                    self._drop_corrupt(cid)
                    continue
                self._register_node(cid, decoded)
        pins = self.backend.read_pin_log()
        self._pins = {ContentId(h): n for h, n in pins.items() if ContentId(h) in self._sizes}
        self.backend.compact_pin_log({c.hex: n for c, n in self._pins.items()})

    # -- raw blocks ------------------------------------------------------

    def put_block(self, data: bytes) -> ContentId:
        """Store one leaf block; idempotent."""
        if len(data) > self.chunk_size:
            raise ValueError(f"leaf of {len(data)} bytes exceeds chunk size {self.chunk_size}")
        cid = ContentId.of(data)
        self._store(cid, data, node=False)
        return cid

    def put_node(self, node: DagNode) -> ContentId:
        data = node.encode()
        cid = ContentId.of(data)
        self._store(cid, data, node=True)
        self._register_node(cid, node)
        return cid

    def put_verified(self, cid: ContentId, data: bytes) -> None:
        """Store a leaf received from a peer; the bytes must hash to ``cid``.

        Unlike :meth:`put_block` the bound is the 1 MiB block limit, since the
        sender may have chunked with a different size.
        """
        if len(data) > MAX_NODE_SIZE:
            raise ValueError("block exceeds 1 MiB")
        if ContentId.of(data) != cid:
            raise IntegrityError(cid, f"received bytes do not hash to {cid}")
        self._store(cid, data, node=False)

    def put_node_bytes(self, data: bytes, expect: ContentId | None = None) -> tuple[ContentId, DagNode]:
        """Decode, verify and store serialized DAG node bytes from a peer."""
        node = DagNode.decode(data)
        cid = ContentId.of(data)
        if expect is not None and cid != expect and node.file_digest != expect:
            raise IntegrityError(expect, "node does not match requested id")
        self._store(cid, data, node=True)
        self._register_node(cid, node)
        return cid, node

    def _store(self, cid: ContentId, data: bytes, *, node: bool) -> None:
        with self._lock:
            if cid in self._sizes:
                return
            self._ensure_space(len(data))
            self.backend.write(cid.hex, data, node=node)
            self._sizes[cid] = len(data)
            self._is_node[cid] = node
            self.used += len(data)

    def _register_node(self, cid: ContentId, node: DagNode) -> None:
        with self._lock:
            self._nodes[cid] = node
            if node.file_digest is not None and cid not in self._roots:
                self._roots[cid] = _RootInfo(node.file_digest, refs=0)
                self._files[node.file_digest] = cid

    def has(self, cid: ContentId) -> bool:
        return cid in self._sizes

    def __contains__(self, cid: ContentId) -> bool:
        return cid in self._sizes

    def size_of(self, cid: ContentId) -> int | None:
        return self._sizes.get(cid)

    def get_block(self, cid: ContentId) -> bytes:
        with self._lock:
            if cid not in self._sizes:
                raise NotFoundError(cid)
            data = self.backend.read(cid.hex)
            if data is None:
                self._forget(cid)
                raise NotFoundError(cid)
            if ContentId.of(data) != cid:
                self._drop_corrupt(cid)
                raise IntegrityError(cid)
            return data

    def get_node(self, cid: ContentId) -> DagNode:
        node = self._nodes.get(cid)
        if node is None:
            if cid in self._sizes:
                raise IntegrityError(cid, f"{cid} is not a DAG node")
            raise NotFoundError(cid)
        return node

    def is_node(self, cid: ContentId) -> bool:
        return self._is_node.get(cid, False)

    def delete_block(self, cid: ContentId) -> None:
        with self._lock:
            if cid in self._sizes:
                self.backend.delete(cid.hex)
                self._forget(cid)

    def _forget(self, cid: ContentId) -> None:
        size = self._sizes.pop(cid, 0)
        self.used -= size
        self._is_node.pop(cid, None)
        node = self._nodes.pop(cid, None)
        if cid in self._roots:
            info = self._roots.pop(cid)
            if self._files.get(info.file_digest) == cid:
                del self._files[info.file_digest]
        if node is not None:
            self._pins.pop(cid, None)

    def _drop_corrupt(self, cid: ContentId) -> None:
        self.backend.quarantine(cid.hex)
        self._forget(cid)

    # -- files -----------------------------------------------------------

    def chunk_blob(self, data: bytes | BinaryIO | Iterable[bytes], chunk_size: int | None = None) -> ContentId:
        """Split a file into leaves, store them and a root node; return the root."""
        size = self.chunk_size if chunk_size is None else chunk_size
        check_chunk_size(size)
        hasher = hashlib.sha256()
        links: list[Link] = []
        try:
            for piece in _rechunk(data, size):
                hasher.update(piece)
                cid = ContentId.of(piece)
                with self._lock:
                    self._inflight[cid] = self._inflight.get(cid, 0) + 1
                links.append(Link(cid, len(piece)))
                self._store(cid, piece, node=False)
            digest = ContentId(hasher.hexdigest())
            root = self.put_node(build_root(links, digest, self.put_node))
            with self._lock:
                self._roots[root].refs += 1
                self._roots.move_to_end(root)
        finally:
            with self._lock:
                for link in links:
                    n = self._inflight[link.cid] - 1
                    if n:
                        self._inflight[link.cid] = n
                    else:
                        del self._inflight[link.cid]
        return root

    def root_for(self, file_digest: ContentId) -> ContentId | None:
        """Root node id of a stored file, looked up by the file's own digest."""
        return self._files.get(file_digest)

    def file_digest(self, root: ContentId) -> ContentId:
        node = self.get_node(root)
        if node.file_digest is None:
            raise IntegrityError(root, f"{root} is not a root node")
        return node.file_digest

    def leaves(self, root: ContentId) -> list[Link]:
        """Leaf links of a DAG in file order; raises if interior nodes are absent."""
        out: list[Link] = []
        missing: list[ContentId] = []
        stack = [root]
        while stack:
            cid = stack.pop()
            node = self._nodes.get(cid)
            if node is None:
                missing.append(cid)
                continue
            if node.kind == NodeKind.BRANCH:
                stack.extend(link.cid for link in reversed(node.links))
            else:
                out.extend(node.links)
        if missing:
            raise MissingBlocksError(root, missing)
        return out

    def missing_blocks(self, root: ContentId) -> list[ContentId]:
        if root not in self._nodes:
            return [root]
        try:
            links = self.leaves(root)
        except MissingBlocksError as exc:
            return exc.missing
        return [link.cid for link in links if link.cid not in self._sizes]

    def is_complete(self, root: ContentId) -> bool:
        return not self.missing_blocks(root)

    def has_file(self, file_digest: ContentId) -> bool:
        root = self._files.get(file_digest)
        return root is not None and self.is_complete(root)

    def assemble_blob(self, root: ContentId) -> Iterator[bytes]:
        """Stream a file's bytes, verifying leaves and the whole-file digest.

        Missing blocks are reported up front, before any byte is yielded.
        """
        node = self.get_node(root)
        if node.file_digest is None:
            raise IntegrityError(root, f"{root} is not a root node")
        missing = self.missing_blocks(root)
        if missing:
            raise MissingBlocksError(root, missing)
        links = self.leaves(root)
        with self._lock:
            if root in self._roots:
                self._roots.move_to_end(root)
        return self._stream(root, node, links)

    def _stream(self, root: ContentId, node: DagNode, links: list[Link]) -> Iterator[bytes]:
        hasher = hashlib.sha256()
        length = 0
        with self.lease(root):
            for link in links:
                try:
                    data = self.get_block(link.cid)
                except NotFoundError:
                    raise MissingBlocksError(root, [link.cid]) from None
                hasher.update(data)
                length += len(data)
                yield data
        if length != node.total_size or hasher.hexdigest() != node.file_digest.hex:
            raise IntegrityError(root, f"assembled bytes do not match {node.file_digest}")

    def read_blob(self, root: ContentId) -> bytes:
        return b"".join(self.assemble_blob(root))

    # -- pinning and eviction ------------------------------------------

    def pin(self, root: ContentId) -> None:
        with self._lock:
            if root not in self._sizes:
                raise NotFoundError(root)
            self._pins[root] = self._pins.get(root, 0) + 1
            self.backend.append_pin_log(f"+{root.hex}")

    def unpin(self, root: ContentId) -> None:
        with self._lock:
            count = self._pins.get(root, 0)
            if count == 0:
                return
            if count == 1:
                del self._pins[root]
            else:
                self._pins[root] = count - 1
            self.backend.append_pin_log(f"-{root.hex}")

    def is_pinned(self, root: ContentId) -> bool:
        return root in self._pins

    @property
    def pinned_roots(self) -> list[ContentId]:
        return list(self._pins)

    def close(self) -> None:
        with self._lock:
            self.backend.compact_pin_log({c.hex: n for c, n in self._pins.items()})

    @contextlib.contextmanager
    def lease(self, root: ContentId) -> Iterator[None]:
        """Protect a DAG from eviction while it is being fetched or served."""
        with self._lock:
            self._leases[root] = self._leases.get(root, 0) + 1
        try:
            yield
        finally:
            with self._lock:
                n = self._leases[root] - 1
                if n:
                    self._leases[root] = n
                else:
                    del self._leases[root]

    def _members(self, root: ContentId) -> list[ContentId]:
        out = [root]
        stack = [root]
        while stack:
            node = self._nodes.get(stack.pop())
            if node is None:
                continue
            for link in node.links:
                out.append(link.cid)
                if node.kind == NodeKind.BRANCH:
                    stack.append(link.cid)
        return out

    def _protected(self) -> set[ContentId]:
        keep: set[ContentId] = set(self._inflight)
        for root in list(self._pins) + list(self._leases):
            keep.update(self._members(root))
        return keep

    def _ensure_space(self, incoming: int) -> None:
        if self.capacity is None or self.used + incoming <= self.capacity:
            return
        keep = self._protected()
        owned: set[ContentId] = set()
        for root in self._roots:
            owned.update(self._members(root))
        # loose blocks first, oldest first
        for cid in [c for c in self._sizes if c not in owned and c not in keep]:
            self._evict(cid)
            if self.used + incoming <= self.capacity:
                return
        for root in [r for r in self._roots if r not in self._pins and r not in self._leases]:
            for cid in self._members(root):
                if cid not in keep and cid in self._sizes:
                    self._evict(cid)
            if self.used + incoming <= self.capacity:
                return
        raise CapacityError(
            f"store full: {self.used} of {self.capacity} bytes used, {incoming} more requested"
        )

    def _evict(self, cid: ContentId) -> None:
        self.backend.delete(cid.hex)
        self._forget(cid)
        self.evicted_blocks += 1

    # -- accounting ------------------------------------------------------

    def stats(self) -> StoreStats:
        with self._lock:
            logical = 0
            owned: set[ContentId] = set()
            for root, info in self._roots.items():
                members = [c for c in dict.fromkeys(self._members(root)) if c in self._sizes]
                owned.update(members)
                logical += max(info.refs, 1) * sum(self._sizes[c] for c in members)
            logical += sum(size for cid, size in self._sizes.items() if cid not in owned)
            return StoreStats(len(self._sizes), self.used, logical)


def check_chunk_size(chunk_size: int) -> None:
    if not isinstance(chunk_size, int) or chunk_size <= 0:
        raise ValueError("chunk_size must be a positive integer")
    if chunk_size < MIN_CHUNK_SIZE:
        raise ValueError(f"chunk_size must be at least {MIN_CHUNK_SIZE}")
    if chunk_size > MAX_NODE_SIZE:
        raise ValueError("chunk_size must not exceed 1 MiB")


def build_root(links: list[Link], digest: ContentId, put_node) -> DagNode:
    """Build the root over ``links``, adding interior levels past MAX_LINKS."""
    total = sum(link.size for link in links)
    kind = NodeKind.INTERIOR
    while len(links) > MAX_LINKS:
        level: list[Link] = []
        for start in range(0, len(links), MAX_LINKS):
            group = tuple(links[start:start + MAX_LINKS])
            child = DagNode(kind, group, sum(l.size for l in group))
            level.append(Link(put_node(child), child.total_size))
        links = level
        kind = NodeKind.BRANCH
    return DagNode(kind, tuple(links), total, digest)


def _rechunk(data, size: int) -> Iterator[bytes]:
    if isinstance(data, (bytes, bytearray, memoryview)):
        view = bytes(data)
        for start in range(0, len(view), size):
            yield view[start:start + size]
        return
    if hasattr(data, "read"):
        reader = data
    else:
        reader = _IterReader(iter(data))
    while True:
        piece = _read_full(reader, size)
        if not piece:
            return
        yield piece
        if len(piece) < size:
            return


def _read_full(reader, size: int) -> bytes:
    buf = bytearray()
    while len(buf) < size:
        piece = reader.read(size - len(buf))
        if not piece:
            break
        buf += piece
    return bytes(buf)


class _IterReader(io.RawIOBase):
    def __init__(self, it: Iterator[bytes]):
        self._it = it
        self._buf = b""

    def read(self, n: int = -1) -> bytes:
        while len(self._buf) < n:
            try:
                self._buf += next(self._it)
            except StopIteration:
                break
        out, self._buf = self._buf[:n], self._buf[n:]
        return out
