"""Registry V2 client used by the CLI and the benchmark."""
from __future__ import annotations

import asyncio
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .cas import ContentId
from .httpio import HttpClient, HttpResult
from .image import (
    CONFIG_MEDIA_TYPE,
    LAYER_MEDIA_TYPE,
    MANIFEST_MEDIA_TYPE,
    ImageManifest,
    ImageRef,
    LayerDescriptor,
    parse_manifest,
)

BLOB_CONCURRENCY = 3
CONFIG_FILE = "config.json"


class RegistryClientError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(f"{status} {code}: {message}")
        self.status = status
        self.code = code
        self.message = message


def _raise_for(res: HttpResult, what: str) -> None:
    code, message = "UNKNOWN", what
    try:
        err = res.json()["errors"][0]
        code, message = err.get("code", code), err.get("message", message)
    except (ValueError, KeyError, IndexError, TypeError):
        pass
    raise RegistryClientError(res.status, code, message)


@dataclass
class PulledImage:
    digest: ContentId
    manifest: ImageManifest
    blobs: dict[ContentId, bytes] = field(default_factory=dict)

    @property
    def config(self) -> bytes:
        return self.blobs[self.manifest.config.digest]

    @property
    def layers(self) -> list[bytes]:
        return [self.blobs[d.digest] for d in self.manifest.layers]


class RegistryClient:
    def __init__(self, http: HttpClient, registry: str):
        self.http = http
        self.registry = registry.removeprefix("http://").rstrip("/")

    def _url(self, path: str) -> str:
        return f"{self.registry}{path}"

    async def manifest_digest(self, name: str, reference: str) -> ContentId:
        res = await self.http.request("HEAD", self._url(f"/v2/{name}/manifests/{reference}"),
                                      headers={"accept": MANIFEST_MEDIA_TYPE})
        if res.status != 200:
            raise RegistryClientError(res.status, "MANIFEST_UNKNOWN", f"{name}:{reference}")
        return ContentId.parse(res.headers["docker-content-digest"])

    async def get_manifest(self, name: str, reference: str) -> tuple[ContentId, ImageManifest]:
        res = await self.http.request("GET", self._url(f"/v2/{name}/manifests/{reference}"),
                                      headers={"accept": MANIFEST_MEDIA_TYPE})
        if res.status != 200:
            _raise_for(res, f"manifest {name}:{reference}")
        digest = ContentId.of(res.body)
        claimed = res.headers.get("docker-content-digest")
        if claimed and ContentId.parse(claimed) != digest:
            raise RegistryClientError(res.status, "DIGEST_INVALID", "manifest does not match its digest header")
        if reference.startswith("sha256:") and ContentId.parse(reference) != digest:
            raise RegistryClientError(res.status, "DIGEST_INVALID", "manifest does not match requested digest")
        return digest, parse_manifest(res.body)

    async def get_blob(self, name: str, digest: ContentId) -> bytes:
        hasher = hashlib.sha256()
        parts: list[bytes] = []

        def sink(chunk: bytes) -> None:
            hasher.update(chunk)
            parts.append(chunk)

        res = await self.http.request("GET", self._url(f"/v2/{name}/blobs/{digest}"), sink=sink)
        if res.status != 200:
            res.body = b"".join(parts)
            _raise_for(res, f"blob {digest}")
        if hasher.hexdigest() != digest.hex:
            raise RegistryClientError(res.status, "DIGEST_INVALID", f"blob {digest} failed verification")
        return b"".join(parts)

    async def pull(self, image: str | ImageRef) -> PulledImage:
        ref = ImageRef.parse(image) if isinstance(image, str) else image
        digest, manifest = await self.get_manifest(ref.name, ref.reference)
        pulled = PulledImage(digest, manifest)
        sem = asyncio.Semaphore(BLOB_CONCURRENCY)

        async def one(desc: LayerDescriptor) -> None:
            async with sem:
                pulled.blobs[desc.digest] = await self.get_blob(ref.name, desc.digest)

        unique = list({d.digest: d for d in manifest.blobs}.values())
        await asyncio.gather(*(one(d) for d in unique))
        return pulled

    async def blob_exists(self, name: str, digest: ContentId) -> bool:
        res = await self.http.request("HEAD", self._url(f"/v2/{name}/blobs/{digest}"))
        return res.status == 200

    async def push_blob(self, name: str, data: bytes) -> ContentId:
        digest = ContentId.of(data)
        if await self.blob_exists(name, digest):
            return digest
        res = await self.http.request("POST", self._url(f"/v2/{name}/blobs/uploads/"))
        if res.status != 202:
            _raise_for(res, "starting upload")
        location = res.headers["location"]
        sep = "&" if "?" in location else "?"
        res = await self.http.request("PUT", self._url(f"{location}{sep}digest={digest}"), body=data,
                                      headers={"content-type": "application/octet-stream"})
        if res.status != 201:
            _raise_for(res, f"uploading {digest}")
        return digest

    async def push(self, image: str | ImageRef, layers: list[bytes], config: bytes) -> ContentId:
        ref = ImageRef.parse(image) if isinstance(image, str) else image
        descs = []
        for data in layers:
            descs.append(LayerDescriptor(LAYER_MEDIA_TYPE, await self.push_blob(ref.name, data), len(data)))
        config_desc = LayerDescriptor(CONFIG_MEDIA_TYPE, await self.push_blob(ref.name, config), len(config))
        manifest = ImageManifest(config_desc, tuple(descs))
        res = await self.http.request("PUT", self._url(f"/v2/{ref.name}/manifests/{ref.reference}"),
                                      body=manifest.canonical_bytes,
                                      headers={"content-type": MANIFEST_MEDIA_TYPE})
        if res.status != 201:
            _raise_for(res, "pushing manifest")
        return manifest.digest


def load_image_dir(path: str | Path) -> tuple[list[bytes], bytes]:
    """``config.json`` plus every other regular file, in name order, as layers."""
    root = Path(path)
    config_path = root / CONFIG_FILE
    if not config_path.is_file():
        raise FileNotFoundError(f"{config_path} not found")
    layers = [p.read_bytes() for p in sorted(root.iterdir()) if p.is_file() and p.name != CONFIG_FILE]
    if not layers:
        raise ValueError(f"{root} holds no layer files")
    return layers, config_path.read_bytes()


def save_image_dir(image: PulledImage, path: str | Path) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_bytes(image.config)
    for i, layer in enumerate(image.layers):
        (out / f"layer{i:03d}.tar.gz").write_bytes(layer)
