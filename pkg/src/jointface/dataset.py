"""On-disk dataset format.

Layout of a dataset directory::

    manifest        JSON text: format name/version, record count, attribute
                    names, generator config and its hash, per-record split and
                    SHA-256 of the image file, SHA-256 of ``labels``
    images/NNNNNN.bin
                    b"JFIM", uint32 version, uint32 ndim, ndim x uint32 dims,
                    then float32 pixels; all little-endian
    labels          one line per record:
                    ``id n_faces`` then per face ``x1 y1 x2 y2``, ten landmark
                    coordinates ``lx1 ly1 ... lx5 ly5`` and the attribute bits
                    as a 0/1 string (1 = +1). Reals use shortest round-trip repr.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .boxes import BBox
from .errors import ChecksumMismatch, CorruptManifest, DatasetMissing
from .synth import Face, GenConfig, SceneRecord, generate_dataset, split_of

FORMAT = "jointface-dataset"
VERSION = 1
IMAGE_MAGIC = b"JFIM"
IMAGE_VERSION = 1
BBOX_RULE = "landmark hull grown by margin x hull size per side (stand-in for an external face detector)"


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def encode_image(image: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(image, dtype="<f4")
    header = IMAGE_MAGIC + struct.pack("<II", IMAGE_VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode_image(blob: bytes, name: str = "") -> np.ndarray:
    if len(blob) < 12 or blob[:4] != IMAGE_MAGIC:
        raise ChecksumMismatch(f"{name}: bad image header")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version != IMAGE_VERSION or ndim > 8:
        raise ChecksumMismatch(f"{name}: unsupported image version {version} / ndim {ndim}")
    off = 12 + 4 * ndim
    dims = struct.unpack_from(f"<{ndim}I", blob, 12)
    expected = off + 4 * int(np.prod(dims))
    if len(blob) != expected:
        raise ChecksumMismatch(f"{name}: expected {expected} bytes, found {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", offset=off).reshape(dims).astype(np.float32)


def format_label_line(rec: SceneRecord) -> str:
    parts = [str(rec.record_id), str(len(rec.faces))]
    for f in rec.faces:
        parts += [repr(float(v)) for v in (f.box.x1, f.box.y1, f.box.x2, f.box.y2)]
        parts += [repr(float(v)) for v in np.asarray(f.landmarks).reshape(-1)]
        parts.append("".join("1" if a > 0 else "0" for a in f.attrs))
    return " ".join(parts)


def parse_label_line(line: str, num_attributes: int):
    tok = line.split()
    try:
        rid, n = int(tok[0]), int(tok[1])
        faces = []
        pos = 2
        for _ in range(n):
            box = BBox(*(float(t) for t in tok[pos:pos + 4]))
            lm = np.array([float(t) for t in tok[pos + 4:pos + 14]]).reshape(5, 2)
            bits = tok[pos + 14]
            if len(bits) != num_attributes or set(bits) - {"0", "1"}:
                raise ValueError(f"bad attribute bits {bits!r}")
            faces.append(Face(box, lm, np.array([1 if b == "1" else -1 for b in bits], dtype=np.int64)))
            pos += 15
        if pos != len(tok):
            raise ValueError("trailing tokens")
    except (IndexError, ValueError) as exc:
        raise CorruptManifest(f"unparseable label line: {line[:80]!r} ({exc})") from None
    return rid, faces


def write_dataset(records: Iterable[SceneRecord], path, config: GenConfig | None = None,
                  splits: dict | None = None, master_seed: int | None = None) -> dict:
    """Write records and return the manifest.

    ``splits`` maps record id to a split tag; by default the contiguous
    80/10/10 train/val/test rule is applied in record order.
    """
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = list(records)
    n = len(records)
    entries, lines = [], []
    num_attributes = config.num_attributes if config else (len(records[0].faces[0].attrs) if n and records[0].faces else 0)
    for i, rec in enumerate(records):
        blob = encode_image(rec.image)
        name = f"images/{rec.record_id:06d}.bin"
        (root / name).write_bytes(blob)
        split = splits.get(rec.record_id) if splits else split_of(i, n)
        entries.append({"id": rec.record_id, "seed": rec.seed, "split": split,
                        "image": name, "sha256": _sha256(blob)})
        lines.append(format_label_line(rec))
    labels = ("\n".join(lines) + "\n").encode() if lines else b""
    (root / "labels").write_bytes(labels)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "count": n,
        "num_attributes": num_attributes,
        "attribute_names": list(config.attributes) if config else [],
        "config": config.to_dict() if config else None,
        "config_hash": config.hash() if config else None,
        "master_seed": master_seed,
        "bbox_rule": BBOX_RULE,
        "split_counts": {s: sum(e["split"] == s for e in entries) for s in ("train", "val", "test")},
        "labels_sha256": _sha256(labels),
        "records": entries,
    }
    tmp = root / "manifest.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, root / "manifest")
    return manifest


def read_manifest(path) -> dict:
    root = Path(path)
    mpath = root / "manifest"
    if not mpath.exists():
        raise DatasetMissing(f"no dataset manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptManifest(f"manifest is not valid JSON: {exc}") from None
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
        raise CorruptManifest("not a jointface dataset manifest")
    if manifest.get("version") != VERSION:
        raise CorruptManifest(f"unsupported dataset version {manifest.get('version')}")
    records = manifest.get("records")
    if not isinstance(records, list) or manifest.get("count") != len(records):
        raise CorruptManifest(f"manifest count {manifest.get('count')} disagrees with "
                              f"{len(records) if isinstance(records, list) else 'missing'} record entries")
    return manifest


def read_dataset(path, split: str | None = None) -> Iterator[SceneRecord]:
    """Stream records back, verifying every checksum."""
    root = Path(path)
    manifest = read_manifest(root)
    labels = (root / "labels").read_bytes() if (root / "labels").exists() else None
    if labels is None or _sha256(labels) != manifest["labels_sha256"]:
        raise ChecksumMismatch("labels file is missing or does not match its checksum")
    lines = labels.decode().splitlines()
    if len(lines) != manifest["count"]:
        raise CorruptManifest(f"manifest count {manifest['count']} disagrees with {len(lines)} label lines")
    m = manifest["num_attributes"]
    for entry, line in zip(manifest["records"], lines):
        if split is not None and entry["split"] != split:
            continue
        ipath = root / entry["image"]
        if not ipath.exists():
            raise ChecksumMismatch(f"missing image file {entry['image']}")
        blob = ipath.read_bytes()
        if _sha256(blob) != entry["sha256"]:
            raise ChecksumMismatch(f"{entry['image']} does not match its checksum")
        rid, faces = parse_label_line(line, m)
        if rid != entry["id"]:
            raise CorruptManifest(f"label line id {rid} does not match manifest id {entry['id']}")
        yield SceneRecord(decode_image(blob, entry["image"]), faces, entry["seed"], rid)


class Dataset:
    """A loaded dataset with split access."""

    def __init__(self, path):
        self.path = Path(path)
        self.manifest = read_manifest(self.path)
        self.records = list(read_dataset(self.path))
        self._splits = {e["id"]: e["split"] for e in self.manifest["records"]}

    @property
    def num_attributes(self) -> int:
        return self.manifest["num_attributes"]

    @property
    def attribute_names(self) -> list:
        names = self.manifest.get("attribute_names") or []
        return names or [f"attr{j}" for j in range(self.num_attributes)]

    @property
    def config_hash(self):
        return self.manifest.get("config_hash")

    @property
    def style(self) -> str:
        cfg = self.manifest.get("config") or {}
        return cfg.get("style", "line")

    def split(self, name: str) -> list:
        return [r for r in self.records if self._splits[r.record_id] == name]

    def __len__(self):
        return len(self.records)


def build_dataset(path, master_seed: int, count: int, config: GenConfig | None = None) -> dict:
    """Generate ``count`` scenes from ``master_seed`` and write them to ``path``."""
    cfg = config or GenConfig()
    return write_dataset(generate_dataset(master_seed, count, cfg), path, cfg, master_seed=master_seed)
