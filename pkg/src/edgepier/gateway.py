"""Docker Registry V2 endpoints backed by the block store and P2P fetches."""
from __future__ import annotations

import asyncio
import itertools
import json
import logging
import re
import uuid
from dataclasses import dataclass, field
from typing import Callable, Iterator

from .cas import CapacityError, ContentId, IntegrityError, MissingBlocksError, StoreError
from .httpio import HttpClient, Request, Response, StreamAborted
from .image import MANIFEST_MEDIA_TYPE, NAME_RE, TAG_RE, ImageManifest, ManifestError, parse_manifest
from .p2p.fetch import FetchError
from .replication import PinsetState

log = logging.getLogger(__name__)

LOOKUP_BACKOFF = (1.0, 2.0, 4.0)
TAG_CHECK_TIMEOUT = 2.0
# node status for operators; outside the /v2/ namespace
STATUS_PATH = "/_edgepier/status"

_PATH = re.compile(r"^/v2/(?P<name>.+?)/(?P<kind>manifests|blobs)/(?P<ref>[^/]+)$")
_UPLOAD = re.compile(r"^/v2/(?P<name>.+?)/blobs/uploads/(?P<id>[^/]*)$")


class RegistryError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


def error_response(status: int, code: str, message: str, head: bool = False) -> Response:
    body = json.dumps({"errors": [{"code": code, "message": message}]}).encode()
    return Response(status, {"content-type": "application/json"}, b"" if head else body,
                    content_length=len(body) if head else None)


@dataclass
class PullSession:
    session_id: int
    image: str
    digest: ContentId
    started: float
    ended: float | None = None
    progress: dict[ContentId, int] = field(default_factory=dict)  # blob -> bytes served
    sizes: dict[ContentId, int] = field(default_factory=dict)
    bytes_from_origin: int = 0
    bytes_from_peers: int = 0

    @property
    def done(self) -> bool:
        return all(self.progress.get(d, 0) >= size for d, size in self.sizes.items())


@dataclass(frozen=True)
class PullMetrics:
    node: str
    image: str
    start: float
    end: float
    bytes_from_origin: int
    bytes_from_peers: int


class RegistryGateway:
    """Request handler; ``node`` supplies store, agent, replicator and image helpers."""

    def __init__(self, node, *, origin_registry: str | None = None, http: HttpClient | None = None):
        self.node = node
        self.store = node.store
        self.origin_registry = origin_registry
        self.http = http
        self.local_tags = PinsetState()
        self.uploads: dict[str, str] = {}
        self.sessions: dict[ContentId, PullSession] = {}
        self.metrics: list[PullMetrics] = []
        self.on_metrics: Callable[[PullMetrics], None] | None = None
        self._ids = itertools.count(1)

    @property
    def agent(self):
        return self.node.agent

    @property
    def replicator(self):
        return self.node.replicator

    def now(self) -> float:
        return asyncio.get_running_loop().time()

    # -- dispatch ------------------------------------------------------------

    async def __call__(self, req: Request) -> Response:
        head = req.method == "HEAD"
        try:
            return await self._route(req)
        except RegistryError as err:
            return error_response(err.status, err.code, err.message, head)
        except CapacityError as err:
            return error_response(507, "UNAVAILABLE", f"insufficient storage: {err}", head)

    async def _route(self, req: Request) -> Response:
        path = req.path
        if path in ("/v2", "/v2/"):
            if req.method not in ("GET", "HEAD"):
                raise RegistryError(405, "UNSUPPORTED", "method not allowed")
            return Response(200, {"content-type": "application/json",
                                  "docker-distribution-api-version": "registry/2.0"}, b"{}")
        if path == STATUS_PATH and req.method == "GET":
            return Response(200, {"content-type": "application/json"}, json.dumps(self.node.status()).encode())
        m = _UPLOAD.match(path)
        if m:
            self._check_name(m["name"])
            if req.method == "POST" and not m["id"]:
                return self._start_upload(req, m["name"])
            if req.method == "PUT" and m["id"]:
                return await self._finish_upload(req, m["name"], m["id"])
            raise RegistryError(405, "UNSUPPORTED", "chunked uploads are not supported")
        m = _PATH.match(path)
        if not m:
            raise RegistryError(404, "NAME_UNKNOWN", f"no route for {path}")
        name, kind, ref = m["name"], m["kind"], m["ref"]
        self._check_name(name)
        if kind == "manifests":
            if req.method in ("GET", "HEAD"):
                return await self.get_manifest(name, ref, head=req.method == "HEAD")
            if req.method == "PUT":
                return await self.put_manifest(name, ref, req.body)
        else:
            if req.method in ("GET", "HEAD"):
                return await self.get_blob(name, ref, head=req.method == "HEAD")
        raise RegistryError(405, "UNSUPPORTED", f"{req.method} not supported here")

    @staticmethod
    def _check_name(name: str) -> None:
        if not NAME_RE.match(name):
            raise RegistryError(400, "NAME_INVALID", f"invalid repository name {name!r}")

    @staticmethod
    def _parse_digest(text: str, code: str = "DIGEST_INVALID") -> ContentId:
        try:
            return ContentId.parse(text)
        except ValueError:
            raise RegistryError(400, code, f"invalid digest {text!r}") from None

    # -- content lookup ----------------------------------------------------

    async def _ensure(self, name: str, kind: str, digest: ContentId, *, root_only: bool,
                      unknown_code: str) -> ContentId:
        """Root of ``digest`` in the local store, fetching from peers if needed."""
        root = self.store.root_for(digest)
        if root is not None and (root_only or self.store.is_complete(root)):
            return root
        if self.node.config.role == "origin":
            # the origin is the last resort; nobody else to ask
            raise RegistryError(404, unknown_code, f"{digest} not found")
        agent = self.agent
        for delay in (*LOOKUP_BACKOFF, None):
            try:
                if agent is None:
                    return await self._proxy(name, kind, digest)
                return await asyncio.shield(agent.fetch(digest, root_only=root_only))
            except FetchError as err:
                if err.unknown:
                    raise RegistryError(404, unknown_code, f"{digest} not found") from None
                if delay is None:
                    raise RegistryError(503, "UNAVAILABLE", f"no reachable provider for {digest}") from None
                await asyncio.sleep(delay)
        raise AssertionError("unreachable")

    async def _proxy(self, name: str, kind: str, digest: ContentId) -> ContentId:
        """Without P2P, pull the whole blob from the upstream registry over HTTP."""
        if not self.origin_registry or self.http is None:
            raise FetchError(digest, [digest], unknown=True)
        try:
            res = await self.http.request("GET", f"{self.origin_registry}/v2/{name}/{kind}/{digest}",
                                          headers={"accept": MANIFEST_MEDIA_TYPE})
        except (ConnectionError, OSError, asyncio.TimeoutError) as exc:
            log.warning("upstream %s unreachable: %s", self.origin_registry, exc)
            raise FetchError(digest, [digest]) from None
        if res.status == 404:
            raise FetchError(digest, [digest], unknown=True)
        if res.status != 200 or ContentId.of(res.body) != digest:
            log.warning("upstream answered %s for %s with unusable content", res.status, digest)
            raise FetchError(digest, [digest])
        root = self.store.chunk_blob(res.body)
        self.note_fetch(digest, len(res.body), from_origin=True)
        return root

    async def _tag_from_origin(self, name: str, tag: str) -> ContentId | None:
        if not self.origin_registry or self.http is None:
            return None
        try:
            res = await asyncio.wait_for(
                self.http.request(
                    "HEAD", f"{self.origin_registry}/v2/{name}/manifests/{tag}",
                    headers={"accept": MANIFEST_MEDIA_TYPE},
                ),
                TAG_CHECK_TIMEOUT,
            )
        except (ConnectionError, OSError, asyncio.TimeoutError):
            return None
        if res.status != 200:
            return None
        try:
            return ContentId.parse(res.headers.get("docker-content-digest", ""))
        except ValueError:
            return None

    async def resolve(self, name: str, ref: str) -> ContentId:
        if ref.startswith("sha256:"):
            return self._parse_digest(ref, "MANIFEST_INVALID")
        if not TAG_RE.match(ref):
            raise RegistryError(400, "TAG_INVALID", f"invalid tag {ref!r}")
        digest = self.local_tags.resolve(name, ref)
        if digest is not None:
            return digest
        # the upstream registry is authoritative for tags while reachable
        digest = await self._tag_from_origin(name, ref)
        if digest is None and self.replicator is not None:
            digest = await self.replicator.resolve_tag(name, ref)
        if digest is None:
            raise RegistryError(404, "MANIFEST_UNKNOWN", f"unknown manifest {name}:{ref}")
        return digest

    # -- manifests -------------------------------------------------------

    async def get_manifest(self, name: str, ref: str, head: bool = False) -> Response:
        digest = await self.resolve(name, ref)
        root = await self._ensure(name, "manifests", digest, root_only=head, unknown_code="MANIFEST_UNKNOWN")
        node = self.store.get_node(root)
        headers = {
            "content-type": MANIFEST_MEDIA_TYPE,
            "docker-content-digest": str(digest),
            "docker-distribution-api-version": "registry/2.0",
        }
        if head:
            return Response(200, headers, b"", content_length=node.total_size)
        data = self._read(root)
        if not ref.startswith("sha256:"):
            self._start_session(name, ref, digest, data)
        return Response(200, headers, data)

    def _read(self, root: ContentId) -> bytes:
        try:
            return self.store.read_blob(root)
        except (IntegrityError, MissingBlocksError) as err:
            raise RegistryError(503, "UNAVAILABLE", f"stored content damaged: {err}") from None

    async def put_manifest(self, name: str, ref: str, body: bytes) -> Response:
        try:
            manifest = parse_manifest(body)
        except ManifestError as err:
            raise RegistryError(400, "MANIFEST_INVALID", str(err)) from None
        digest = ContentId.of(body)
        if ref.startswith("sha256:"):
            if self._parse_digest(ref) != digest:
                raise RegistryError(400, "DIGEST_INVALID", "manifest digest does not match reference")
        elif not TAG_RE.match(ref):
            raise RegistryError(400, "TAG_INVALID", f"invalid tag {ref!r}")
        for desc in manifest.blobs:
            if not self.store.has_file(desc.digest):
                raise RegistryError(400, "BLOB_UNKNOWN", f"blob unknown to registry: {desc.digest}")
        root = self.store.chunk_blob(body)
        self.node.pin_image_locally(manifest, root)
        await self.node.announce_image(manifest, root)
        if not ref.startswith("sha256:"):
            if self.replicator is not None:
                self.replicator.set_tag(name, ref, digest)
            else:
                self.local_tags.add_tag(_local_tag(self.local_tags, name, ref, digest))
        if self.replicator is not None:
            self.replicator.pin_image(digest)
        return Response(201, {"location": f"/v2/{name}/manifests/{digest}", "docker-content-digest": str(digest)})

    # -- blobs -------------------------------------------------------------

    async def get_blob(self, name: str, ref: str, head: bool = False) -> Response:
        digest = self._parse_digest(ref)
        root = await self._ensure(name, "blobs", digest, root_only=head, unknown_code="BLOB_UNKNOWN")
        node = self.store.get_node(root)
        headers = {
            "content-type": "application/octet-stream",
            "docker-content-digest": str(digest),
            "accept-ranges": "none",
        }
        if head:
            return Response(200, headers, b"", content_length=node.total_size)
        try:
            chunks = self.store.assemble_blob(root)
        except MissingBlocksError:
            # evicted between fetch and read; fetch again once
            root = await self._ensure(name, "blobs", digest, root_only=False, unknown_code="BLOB_UNKNOWN")
            chunks = self.store.assemble_blob(root)
        return Response(200, headers, self._stream(digest, chunks), content_length=node.total_size)

    def _stream(self, digest: ContentId, chunks: Iterator[bytes]) -> Iterator[bytes]:
        try:
            for chunk in chunks:
                yield chunk
                self._progress(digest, len(chunk))
        except (IntegrityError, MissingBlocksError, StoreError) as err:
            log.error("aborting stream of %s: %s", digest, err)
            raise StreamAborted(str(err)) from None

    def _start_upload(self, req: Request, name: str) -> Response:
        if "digest" in req.query:
            # monolithic upload in a single POST
            return self._store_blob(name, req.query["digest"], req.body)
        upload_id = uuid.UUID(int=next(self._ids)).hex if self.node.deterministic else uuid.uuid4().hex
        self.uploads[upload_id] = name
        return Response(202, {
            "location": f"/v2/{name}/blobs/uploads/{upload_id}",
            "docker-upload-uuid": upload_id,
            "range": "0-0",
        })

    async def _finish_upload(self, req: Request, name: str, upload_id: str) -> Response:
        if self.uploads.get(upload_id) != name:
            raise RegistryError(404, "BLOB_UPLOAD_UNKNOWN", "unknown upload")
        if "digest" not in req.query:
            raise RegistryError(400, "DIGEST_INVALID", "digest parameter required")
        response = self._store_blob(name, req.query["digest"], req.body)
        del self.uploads[upload_id]
        digest = ContentId.parse(req.query["digest"])
        root = self.store.root_for(digest)
        if root is not None and self.agent is not None:
            await self.agent.provide_file(root, complete=True)
        return response

    def _store_blob(self, name: str, digest_text: str, body: bytes) -> Response:
        digest = self._parse_digest(digest_text)
        if ContentId.of(body) != digest:
            raise RegistryError(400, "DIGEST_INVALID", "content does not match digest")
        root = self.store.root_for(digest)
        if root is None or not self.store.is_complete(root):
            root = self.store.chunk_blob(body)
        self.node.pin_root(root)
        return Response(201, {"location": f"/v2/{name}/blobs/{digest}", "docker-content-digest": str(digest)})

    # -- pull sessions -------------------------------------------------------

    def _start_session(self, name: str, ref: str, digest: ContentId, data: bytes) -> None:
        try:
            manifest = parse_manifest(data)
        except ManifestError:
            return
        session = self.sessions.get(digest)
        if session is not None and session.ended is None:
            return
        session = PullSession(next(self._ids), f"{name}:{ref}", digest, self.now())
        for desc in manifest.blobs:
            session.sizes[desc.digest] = desc.size
        self.sessions[digest] = session
        session.name, session.tag = name, ref  # type: ignore[attr-defined]
        if session.done:
            self._finish_session(session)

    def _progress(self, blob: ContentId, n: int) -> None:
        for session in list(self.sessions.values()):
            if session.ended is None and blob in session.sizes:
                session.progress[blob] = session.progress.get(blob, 0) + n
                if session.done:
                    self._finish_session(session)

    def note_fetch(self, blob: ContentId, n: int, from_origin: bool) -> None:
        for session in self.sessions.values():
            if session.ended is None and blob in session.sizes:
                if from_origin:
                    session.bytes_from_origin += n
                else:
                    session.bytes_from_peers += n

    def _finish_session(self, session: PullSession) -> None:
        session.ended = self.now()
        metrics = PullMetrics(self.node.name, session.image, session.started, session.ended,
                              session.bytes_from_origin, session.bytes_from_peers)
        self.metrics.append(metrics)
        if self.on_metrics is not None:
            self.on_metrics(metrics)
        self.node.pull_completed(session.digest, session.name, session.tag)  # type: ignore[attr-defined]


def _local_tag(state: PinsetState, name: str, tag: str, digest: ContentId):
    from .replication import TagRecord

    return TagRecord(name, tag, digest, state.tick(), b"\x00" * 32)


def is_manifest(manifest: object) -> bool:
    return isinstance(manifest, ImageManifest)
