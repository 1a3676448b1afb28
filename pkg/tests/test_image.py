import json
import random

import pytest

from edgepier.cas import BlockStore, ContentId
from edgepier.image import (
    MANIFEST_MEDIA_TYPE,
    ImageManifest,
    ImageRef,
    MalformedManifest,
    MissingField,
    UnsupportedSchema,
    build_image,
    missing_layers,
    parse_manifest,
)

from test_cas import sha256sum


def blob(seed: int, n: int = 50_000) -> bytes:
    return random.Random(seed).randbytes(n)


def test_reference_image_shape():
    # five 100 MB layers, scaled down 1000x to keep the test light; the
    # descriptor arithmetic is identical
    store = BlockStore()
    layers = [blob(i, 100_000) for i in range(5)]
    img = build_image(store, layers, b"{}")
    assert len(img.manifest.layers) == 5
    assert img.manifest.total_layer_size == 500_000
    assert [d.size for d in img.manifest.layers] == [100_000] * 5


def test_single_zero_byte_layer():
    img = build_image(BlockStore(), [b"\x00"], b"{}")
    (desc,) = img.manifest.layers
    assert desc.size == 1
    assert desc.digest.hex == sha256sum(b"\x00")


def test_deterministic_digest():
    layers = [blob(1), blob(2)]
    a = build_image(BlockStore(), layers, b'{"a":1}')
    b = build_image(BlockStore(chunk_size=65_536), layers, b'{"a":1}')
    assert a.digest == b.digest
    assert a.manifest.canonical_bytes == b.manifest.canonical_bytes


def test_canonical_form():
    img = build_image(BlockStore(), [b"abc"], b"{}")
    raw = img.manifest.canonical_bytes
    assert b" " not in raw and b"\n" not in raw
    doc = json.loads(raw)
    assert list(doc) == sorted(doc)
    assert list(doc["layers"][0]) == ["digest", "mediaType", "size"]
    assert doc["mediaType"] == MANIFEST_MEDIA_TYPE
    assert img.digest == ContentId.of(raw)


def test_layer_order_preserved():
    layers = [blob(i, 5000) for i in range(6)]
    img = build_image(BlockStore(), layers, b"{}")
    assert [d.digest for d in img.manifest.layers] == [ContentId.of(l) for l in layers]


def test_needs_a_layer():
    with pytest.raises(ValueError):
        build_image(BlockStore(), [], b"{}")


def test_parse_round_trip():
    img = build_image(BlockStore(), [blob(3), blob(4)], b"{}")
    parsed = parse_manifest(img.manifest.canonical_bytes)
    assert parsed == img.manifest
    assert parsed.canonical_bytes == img.manifest.canonical_bytes


def test_truncated():
    raw = build_image(BlockStore(), [b"x"], b"{}").manifest.canonical_bytes
    with pytest.raises(MalformedManifest):
        parse_manifest(raw[:-3])


def test_schema_one_rejected():
    raw = json.dumps({"schemaVersion": 1, "name": "x"}).encode()
    with pytest.raises(UnsupportedSchema):
        parse_manifest(raw)


@pytest.mark.parametrize("drop", ["config", "layers", "mediaType", "schemaVersion"])
def test_missing_field(drop):
    doc = json.loads(build_image(BlockStore(), [b"x"], b"{}").manifest.canonical_bytes)
    del doc[drop]
    with pytest.raises(MissingField):
        parse_manifest(json.dumps(doc).encode())


def test_missing_descriptor_field():
    doc = json.loads(build_image(BlockStore(), [b"x"], b"{}").manifest.canonical_bytes)
    del doc["layers"][0]["size"]
    with pytest.raises(MissingField):
        parse_manifest(json.dumps(doc).encode())


def test_errors_are_distinct():
    assert len({MalformedManifest, UnsupportedSchema, MissingField}) == 3
    assert not issubclass(UnsupportedSchema, MissingField)


def test_descriptor_sizes_match_dag_sizes():
    store = BlockStore(chunk_size=4096)
    img = build_image(store, [blob(1, 9000), blob(2, 123)], b"{}")
    total = sum(store.get_node(img.roots[d.digest]).total_size for d in img.manifest.layers)
    assert total == img.manifest.total_layer_size


class TestMissingLayers:
    def test_fresh_store(self):
        img = build_image(BlockStore(), [blob(1), blob(2)], b"{}")
        assert missing_layers(img.manifest, BlockStore()) == [d.digest for d in img.manifest.layers]

    def test_all_present(self):
        store = BlockStore()
        img = build_image(store, [blob(1), blob(2)], b"{}")
        assert missing_layers(img.manifest, store) == []

    def test_shared_base_layer(self):
        base = blob(10)
        first = build_image(BlockStore(), [base, blob(11)], b"{}")
        second_src = BlockStore()
        second = build_image(second_src, [base, blob(12), blob(13)], b"{}")
        node = BlockStore()
        build_image(node, [base, blob(11)], b"{}")  # first image fully pulled
        assert first.manifest.layers[0].digest == second.manifest.layers[0].digest
        assert missing_layers(second.manifest, node) == [d.digest for d in second.manifest.layers[1:]]

    def test_monotone_as_blocks_arrive(self):
        src = BlockStore(chunk_size=4096)
        img = build_image(src, [blob(1, 20_000), blob(2, 20_000)], b"{}")
        dst = BlockStore(chunk_size=4096)
        counts = [len(missing_layers(img.manifest, dst))]
        for digest, root in img.roots.items():
            dst.put_node_bytes(src.get_block(root))
            for link in src.get_node(root).links:
                dst.put_verified(link.cid, src.get_block(link.cid))
                counts.append(len(missing_layers(img.manifest, dst)))
        assert counts == sorted(counts, reverse=True)
        assert counts[-1] == 0


class TestImageRef:
    def test_parse_tag(self):
        ref = ImageRef.parse("library/app:v1.2")
        assert (ref.name, ref.reference) == ("library/app", "v1.2")

    def test_default_tag(self):
        assert ImageRef.parse("app").reference == "latest"

    def test_digest(self):
        d = str(ContentId.of(b"m"))
        ref = ImageRef.parse(f"app@{d}")
        assert ref.is_digest and str(ref) == f"app@{d}"

    @pytest.mark.parametrize("bad", ["App:v1", "app:-bad", "app:" + "x" * 129, "a//b:v"])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            ImageRef.parse(bad)
