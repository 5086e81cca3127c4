import json

import numpy as np
import pytest

from jointface.dataset import (Dataset, build_dataset, decode_image, encode_image, format_label_line,
                               parse_label_line, read_dataset, read_manifest, write_dataset)
from jointface.errors import ChecksumMismatch, CorruptManifest, DatasetMissing
from jointface.synth import GenConfig, generate_dataset


@pytest.fixture(scope="module")
def written(tmp_path_factory):
    path = tmp_path_factory.mktemp("ds")
    cfg = GenConfig()
    records = list(generate_dataset(5, 100, cfg))
    manifest = write_dataset(records, path, cfg, master_seed=5)
    return path, records, manifest


def test_roundtrip_bit_identical(written):
    path, records, _ = written
    back = list(read_dataset(path))
    assert len(back) == 100
    for a, b in zip(records, back):
        assert np.array_equal(a.image, b.image) and a.image.dtype == b.image.dtype
        assert (a.seed, a.record_id) == (b.seed, b.record_id)
        for fa, fb in zip(a.faces, b.faces, strict=True):
            assert fa.box == fb.box
            assert np.array_equal(fa.landmarks, fb.landmarks) and np.array_equal(fa.attrs, fb.attrs)


def test_manifest_contents(written):
    path, _, manifest = written
    m = read_manifest(path)
    assert m == json.loads(json.dumps(manifest))
    assert m["count"] == 100 and m["num_attributes"] == 8
    assert m["split_counts"] == {"train": 80, "val": 10, "test": 10}
    assert m["config_hash"] == GenConfig().hash()
    assert "stand-in" in m["bbox_rule"]


def test_split_access(written):
    ds = Dataset(written[0])
    assert [len(ds.split(s)) for s in ("train", "val", "test")] == [80, 10, 10]
    assert ds.split("test")[0].record_id == 90


def test_truncated_image_is_checksum_mismatch(written, tmp_path):
    import shutil
    path = tmp_path / "copy"
    shutil.copytree(written[0], path)
    f = path / "images" / "000003.bin"
    f.write_bytes(f.read_bytes()[:-7])
    with pytest.raises(ChecksumMismatch):
        list(read_dataset(path))


def test_truncated_labels_is_checksum_mismatch(written, tmp_path):
    import shutil
    path = tmp_path / "copy"
    shutil.copytree(written[0], path)
    f = path / "labels"
    f.write_bytes(f.read_bytes()[:-20])
    with pytest.raises(ChecksumMismatch):
        list(read_dataset(path))


def test_count_mismatch_is_corrupt_manifest(written, tmp_path):
    import shutil
    path = tmp_path / "copy"
    shutil.copytree(written[0], path)
    m = json.loads((path / "manifest").read_text())
    m["count"] = 99
    (path / "manifest").write_text(json.dumps(m))
    with pytest.raises(CorruptManifest):
        read_manifest(path)


def test_missing_dataset(tmp_path):
    with pytest.raises(DatasetMissing):
        read_manifest(tmp_path / "nope")


def test_image_codec_header():
    img = np.arange(12, dtype=np.float32).reshape(1, 3, 4)
    blob = encode_image(img)
    assert blob[:4] == b"JFIM" and len(blob) == 4 + 8 + 12 + 48
    assert np.array_equal(decode_image(blob), img)
    with pytest.raises(ChecksumMismatch):
        decode_image(b"XXXX" + blob[4:])


def test_label_line_roundtrip(written):
    rec = next(r for r in written[1] if len(r.faces) == 2)
    rid, faces = parse_label_line(format_label_line(rec), 8)
    assert rid == rec.record_id and [f.box for f in faces] == rec.boxes
    with pytest.raises(CorruptManifest):
        parse_label_line(format_label_line(rec) + " 7", 8)


def test_build_is_deterministic(tmp_path):
    a = build_dataset(tmp_path / "a", 3, 12)
    b = build_dataset(tmp_path / "b", 3, 12)
    assert a == b
    assert (tmp_path / "a" / "labels").read_bytes() == (tmp_path / "b" / "labels").read_bytes()
