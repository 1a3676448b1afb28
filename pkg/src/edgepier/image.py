"""Docker image manifests (schema 2) and image references."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .cas import BlockStore, ContentId

MANIFEST_MEDIA_TYPE = "application/vnd.docker.distribution.manifest.v2+json"
CONFIG_MEDIA_TYPE = "application/vnd.docker.container.image.v1+json"
LAYER_MEDIA_TYPE = "application/vnd.docker.image.rootfs.diff.tar.gzip"

NAME_RE = re.compile(r"^[a-z0-9]+(?:[._/-][a-z0-9]+)*$")
TAG_RE = re.compile(r"^[A-Za-z0-9_][A-Za-z0-9._-]{0,127}$")


class ManifestError(ValueError):
    pass


class MalformedManifest(ManifestError):
    pass


class UnsupportedSchema(ManifestError):
    pass


class MissingField(ManifestError):
    pass


@dataclass(frozen=True)
class LayerDescriptor:
    media_type: str
    digest: ContentId
    size: int

    def to_json(self) -> dict:
        return {"digest": str(self.digest), "mediaType": self.media_type, "size": self.size}

    @classmethod
    def from_json(cls, obj: object, where: str) -> "LayerDescriptor":
        if not isinstance(obj, dict):
            raise MalformedManifest(f"{where} must be an object")
        for key in ("mediaType", "digest", "size"):
            if key not in obj:
                raise MissingField(f"{where}.{key} is missing")
        media_type, digest, size = obj["mediaType"], obj["digest"], obj["size"]
        if not isinstance(media_type, str):
            raise MalformedManifest(f"{where}.mediaType must be a string")
        if not isinstance(size, int) or isinstance(size, bool) or size < 0:
            raise MalformedManifest(f"{where}.size must be a non-negative integer")
        try:
            cid = ContentId.parse(digest)
        except ValueError as exc:
            raise MalformedManifest(f"{where}.digest: {exc}") from None
        return cls(media_type, cid, size)


@dataclass(frozen=True)
class ImageManifest:
    config: LayerDescriptor
    layers: tuple[LayerDescriptor, ...]
    schema_version: int = 2
    media_type: str = MANIFEST_MEDIA_TYPE
    canonical_bytes: bytes = field(default=b"", compare=False, repr=False)

    def __post_init__(self) -> None:
        if not self.canonical_bytes:
            object.__setattr__(self, "canonical_bytes", self._serialize())

    def _serialize(self) -> bytes:
        doc = {
            "config": self.config.to_json(),
            "layers": [layer.to_json() for layer in self.layers],
            "mediaType": self.media_type,
            "schemaVersion": self.schema_version,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()

    @property
    def digest(self) -> ContentId:
        return ContentId.of(self.canonical_bytes)

    @property
    def total_layer_size(self) -> int:
        return sum(layer.size for layer in self.layers)

    @property
    def blobs(self) -> list[LayerDescriptor]:
        return [self.config, *self.layers]

    @classmethod
    def parse(cls, data: bytes) -> "ImageManifest":
        return parse_manifest(data)


def parse_manifest(data: bytes) -> ImageManifest:
    """Parse manifest bytes; the original bytes are kept as the identity."""
    try:
        doc = json.loads(bytes(data).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedManifest(f"manifest is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise MalformedManifest("manifest must be a JSON object")
    if "schemaVersion" not in doc:
        raise MissingField("schemaVersion is missing")
    if doc["schemaVersion"] != 2:
        raise UnsupportedSchema(f"unsupported schemaVersion {doc['schemaVersion']!r}")
    for key in ("mediaType", "config", "layers"):
        if key not in doc:
            raise MissingField(f"{key} is missing")
    if doc["mediaType"] != MANIFEST_MEDIA_TYPE:
        raise UnsupportedSchema(f"unsupported mediaType {doc['mediaType']!r}")
    if not isinstance(doc["layers"], list):
        raise MalformedManifest("layers must be a list")
    config = LayerDescriptor.from_json(doc["config"], "config")
    layers = tuple(LayerDescriptor.from_json(obj, f"layers[{i}]") for i, obj in enumerate(doc["layers"]))
    return ImageManifest(config, layers, 2, doc["mediaType"], canonical_bytes=bytes(data))


@dataclass(frozen=True)
class ImageRef:
    name: str
    reference: str

    def __post_init__(self) -> None:
        if not NAME_RE.match(self.name):
            raise ValueError(f"invalid repository name: {self.name!r}")
        if not (self.is_digest or TAG_RE.match(self.reference)):
            raise ValueError(f"invalid tag or digest: {self.reference!r}")

    @property
    def is_digest(self) -> bool:
        try:
            ContentId.parse(self.reference)
        except ValueError:
            return False
        return True

    @classmethod
    def parse(cls, text: str) -> "ImageRef":
        if "@" in text:
            name, ref = text.split("@", 1)
        elif ":" in text.rsplit("/", 1)[-1]:
            name, ref = text.rsplit(":", 1)
        else:
            name, ref = text, "latest"
        return cls(name, ref)

    def __str__(self) -> str:
        sep = "@" if self.is_digest else ":"
        return f"{self.name}{sep}{self.reference}"


@dataclass(frozen=True)
class BuiltImage:
    manifest: ImageManifest
    manifest_root: ContentId
    roots: dict[ContentId, ContentId]  # blob digest -> DAG root

    @property
    def digest(self) -> ContentId:
        return self.manifest.digest


def build_image(
    store: BlockStore,
    layers: Sequence[bytes] | Iterable[bytes],
    config: bytes,
    *,
    layer_media_type: str = LAYER_MEDIA_TYPE,
    chunk_size: int | None = None,
) -> BuiltImage:
    """Chunk layer and config blobs into ``store`` and build their manifest."""
    layers = list(layers)
    if not layers:
        raise ValueError("an image needs at least one layer")
    roots: dict[ContentId, ContentId] = {}

    def add(blob: bytes, media_type: str) -> LayerDescriptor:
        root = store.chunk_blob(blob, chunk_size)
        digest = store.file_digest(root)
        roots[digest] = root
        return LayerDescriptor(media_type, digest, len(blob))

    config_desc = add(config, CONFIG_MEDIA_TYPE)
    descriptors = tuple(add(blob, layer_media_type) for blob in layers)
    manifest = ImageManifest(config_desc, descriptors)
    manifest_root = store.chunk_blob(manifest.canonical_bytes, chunk_size)
    roots[manifest.digest] = manifest_root
    return BuiltImage(manifest, manifest_root, roots)


def missing_layers(
    manifest: ImageManifest, store: BlockStore, *, include_config: bool = False
) -> list[ContentId]:
    """Layer digests, in manifest order, whose DAGs are not complete in ``store``."""
    out: list[ContentId] = []
    descs = manifest.blobs if include_config else manifest.layers
    for desc in descs:
        if desc.digest not in out and not store.has_file(desc.digest):
            out.append(desc.digest)
    return out
